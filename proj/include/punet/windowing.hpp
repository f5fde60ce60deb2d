#pragma once

#include "punet/autodiff.hpp"

namespace punet::win {

// Feature values plus per-cell world coordinates (row, col) in input-pixel
// units of the underlying volume. Grids let losses relate cells across
// differently cropped and warped views.
struct FeatureMap {
    ad::Var values;  // (B,H,W,C)
    Tensor grid;     // (B,H,W,2)
};

// Identity-view grid: cell centers of a map with the given total stride,
// offset by a crop origin. Uses the resize convention
// center(i) = origin + stride*(i+0.5) - 0.5, so stride 1 gives origin + i.
inline Tensor make_grid(int B, int H, int W, double stride, double origin_r = 0.0,
                        double origin_c = 0.0) {
    Tensor g({B, H, W, 2});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                std::int64_t at = ((static_cast<std::int64_t>(b) * H + i) * W + j) * 2;
                g.data[at] = origin_r + stride * (i + 0.5) - 0.5;
                g.data[at + 1] = origin_c + stride * (j + 0.5) - 0.5;
            }
    return g;
}

// Bilinear resample of a grid to a coarser stride. For affinely warped grids
// this reproduces the exact transform of the coarser cell centers (the grid
// is linear in position, away from borders no clamping occurs).
inline Tensor grid_at_stride(const Tensor& grid, int stride) {
    if (grid.ndim() != 4 || grid.shape[3] != 2)
        throw validation_error("grid_at_stride: need (B,H,W,2), got " + shape_str(grid.shape));
    int B = grid.shape[0], H = grid.shape[1], W = grid.shape[2];
    if (H % stride != 0 || W % stride != 0)
        throw geometry_error("grid_at_stride: grid size not divisible by stride");
    int Ho = H / stride, Wo = W / stride;
    Tensor out({B, Ho, Wo, 2});
    auto clampi = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                double si = stride * (i + 0.5) - 0.5;
                double sj = stride * (j + 0.5) - 0.5;
                int i0 = clampi(static_cast<int>(std::floor(si)), H - 1);
                int j0 = clampi(static_cast<int>(std::floor(sj)), W - 1);
                int i1 = clampi(i0 + 1, H - 1);
                int j1 = clampi(j0 + 1, W - 1);
                double fi = si - std::floor(si), fj = sj - std::floor(sj);
                for (int k = 0; k < 2; ++k) {
                    auto at = [&](int r, int c) {
                        return grid.data[((static_cast<std::int64_t>(b) * H + r) * W + c) * 2 + k];
                    };
                    out.data[((static_cast<std::int64_t>(b) * Ho + i) * Wo + j) * 2 + k] =
                        (1 - fi) * ((1 - fj) * at(i0, j0) + fj * at(i0, j1)) +
                        fi * ((1 - fj) * at(i1, j0) + fj * at(i1, j1));
                }
            }
    return out;
}

// Non-overlapping window tiling of a (B,H,W,C) map. Row order inside
// `windows`: batch, then window row, window col, then cell row, cell col.
// provenance[k] is the flat source cell (b*H + r)*W + c of output row cell k.
struct WindowedContent {
    ad::Var windows;  // (B*n_windows, window*window, C)
    int batch = 0, height = 0, width = 0, channels = 0, window = 0;
    std::vector<std::int64_t> provenance;

    int windows_per_item() const { return (height / window) * (width / window); }
};

inline WindowedContent partition(const ad::Var& x, int window) {
    ad::expect_rank4(x->value, "partition");
    int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], C = x->value.shape[3];
    if (window < 1 || H % window != 0 || W % window != 0)
        throw geometry_error("partition: map " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by window " + std::to_string(window));
    WindowedContent wc;
    wc.batch = B;
    wc.height = H;
    wc.width = W;
    wc.channels = C;
    wc.window = window;
    wc.provenance.reserve(static_cast<std::size_t>(B) * H * W);
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < H / window; ++wy)
            for (int wx = 0; wx < W / window; ++wx)
                for (int iy = 0; iy < window; ++iy)
                    for (int ix = 0; ix < window; ++ix) {
                        std::int64_t r = static_cast<std::int64_t>(wy) * window + iy;
                        std::int64_t c = static_cast<std::int64_t>(wx) * window + ix;
                        wc.provenance.push_back((static_cast<std::int64_t>(b) * H + r) * W + c);
                    }
    int n_win = (H / window) * (W / window);
    wc.windows = ad::gather_rows(x, wc.provenance, {B * n_win, window * window, C});
    return wc;
}

// Undo partition. Rejects provenance that is not a bijection onto the map.
inline ad::Var reverse_windows(const WindowedContent& wc) {
    std::int64_t cells = static_cast<std::int64_t>(wc.batch) * wc.height * wc.width;
    if (static_cast<std::int64_t>(wc.provenance.size()) != cells)
        throw geometry_error("reverse_windows: provenance size does not cover the map");
    std::vector<std::int64_t> inverse(static_cast<std::size_t>(cells), -1);
    for (std::size_t k = 0; k < wc.provenance.size(); ++k) {
        std::int64_t src = wc.provenance[k];
        if (src < 0 || src >= cells || inverse[static_cast<std::size_t>(src)] != -1)
            throw geometry_error("reverse_windows: provenance is not a bijection");
        inverse[static_cast<std::size_t>(src)] = static_cast<std::int64_t>(k);
    }
    return ad::gather_rows(wc.windows, inverse, {wc.batch, wc.height, wc.width, wc.channels});
}

// Values at [i][j] move to [(i+dr) mod H, (j+dc) mod W].
inline std::vector<std::int64_t> shift_index(int B, int H, int W, int dr, int dc) {
    auto mod = [](int a, int n) { return ((a % n) + n) % n; };
    std::vector<std::int64_t> idx(static_cast<std::size_t>(B) * H * W);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                idx[(static_cast<std::size_t>(b) * H + i) * W + j] =
                    (static_cast<std::int64_t>(b) * H + mod(i - dr, H)) * W + mod(j - dc, W);
    return idx;
}

inline ad::Var cyclic_shift_values(const ad::Var& x, int dr, int dc) {
    ad::expect_rank4(x->value, "cyclic_shift");
    int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], C = x->value.shape[3];
    return ad::gather_rows(x, shift_index(B, H, W, dr, dc), {B, H, W, C});
}

inline Tensor cyclic_shift_grid(const Tensor& grid, int dr, int dc) {
    int B = grid.shape[0], H = grid.shape[1], W = grid.shape[2];
    auto idx = shift_index(B, H, W, dr, dc);
    Tensor out({B, H, W, 2});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        out.data[2 * k] = grid.data[static_cast<std::size_t>(2 * idx[k])];
        out.data[2 * k + 1] = grid.data[static_cast<std::size_t>(2 * idx[k] + 1)];
    }
    return out;
}

// Grid moves with the values.
inline FeatureMap cyclic_shift(const FeatureMap& fm, int dr, int dc) {
    return {cyclic_shift_values(fm.values, dr, dc), cyclic_shift_grid(fm.grid, dr, dc)};
}

}  // namespace punet::win
