#pragma once

#include "punet/nn.hpp"
#include "punet/windowing.hpp"

namespace punet::att {

using ad::Var;

// Learned relative-position machinery for one attention layer. Content cells
// get a bias from their (row, col) offset; prompt tokens get a per-token bias
// from their own embedding table. Offset tables have exactly 2*window-1 rows
// per axis; any lookup outside that range is an indexing error.
struct BiasTable {
    Var e_row, e_col;          // (2*window-1, C_bias)
    Var w_row, w_col, w_prompt;  // (heads, C_bias)
    int window = 0;
    int bias_channels = 0;

    static BiasTable make(int window, int heads, int bias_channels, Rng& rng) {
        BiasTable bt;
        bt.window = window;
        bt.bias_channels = bias_channels;
        int nd = 2 * window - 1;
        bt.e_row = ad::param(Tensor::randn({nd, bias_channels}, rng, 0.02));
        bt.e_col = ad::param(Tensor::randn({nd, bias_channels}, rng, 0.02));
        bt.w_row = ad::param(Tensor::randn({heads, bias_channels}, rng, 0.02));
        bt.w_col = ad::param(Tensor::randn({heads, bias_channels}, rng, 0.02));
        bt.w_prompt = ad::param(Tensor::randn({heads, bias_channels}, rng, 0.02));
        return bt;
    }

    void register_into(nn::ParamRegistry& reg, const std::string& prefix) const {
        reg.add(prefix + ".e_row", e_row);
        reg.add(prefix + ".e_col", e_col);
        reg.add(prefix + ".w_row", w_row);
        reg.add(prefix + ".w_col", w_col);
        reg.add(prefix + ".w_prompt", w_prompt);
    }
};

// B_content[h][i][j] = (w_row[h].E_row[d_row] + w_col[h].E_col[d_col]) / 2
// for window cells i, j with axis offsets d_* in [0, 2*window-2].
// Unscaled; the score assembly divides by sqrt(C_bias).
inline Var content_bias(const BiasTable& bt) {
    int w = bt.window;
    int nw = w * w;
    std::vector<std::int64_t> dr(static_cast<std::size_t>(nw) * nw), dc(dr.size());
    for (int i = 0; i < nw; ++i) {
        int iy = i / w, ix = i % w;
        for (int j = 0; j < nw; ++j) {
            int jy = j / w, jx = j % w;
            dr[static_cast<std::size_t>(i) * nw + j] = iy - jy + w - 1;
            dc[static_cast<std::size_t>(i) * nw + j] = ix - jx + w - 1;
        }
    }
    auto er = ad::gather_rows(bt.e_row, dr);                       // (nw*nw, C_bias)
    auto ec = ad::gather_rows(bt.e_col, dc);
    auto row_part = ad::matmul_nt(er, bt.w_row);                   // (nw*nw, heads)
    auto col_part = ad::matmul_nt(ec, bt.w_col);
    auto b = ad::scale(ad::add(row_part, col_part), 0.5);
    int heads = bt.w_row->value.shape[0];
    return ad::reshape(ad::transpose2d(b), {heads, nw, nw});
}

// B_prompt[h][t] = w_prompt[h].E_prompt[t] for the selected prompt rows.
inline Var prompt_bias(const BiasTable& bt, const Var& e_prompt_rows) {
    if (e_prompt_rows->value.shape.back() != bt.bias_channels)
        throw validation_error("prompt_bias: embedding width mismatch");
    return ad::transpose2d(ad::matmul_nt(e_prompt_rows, bt.w_prompt));  // (heads, N_p)
}

// Selected prompt material for one batch element at one attention layer.
struct PromptTokens {
    Var tokens;      // (N_p, C); null means no prompts for this element
    Var bias_embed;  // (N_p, C_bias) rows aligned with tokens

    int count() const { return tokens ? tokens->value.shape[0] : 0; }
};

struct PMALayer {
    nn::Linear q, k, v, o;
    BiasTable bias;
    int heads = 0;

    static PMALayer make(int channels, int heads, int window, int bias_channels, Rng& rng) {
        if (channels % heads != 0) throw validation_error("pma: heads must divide channels");
        PMALayer l;
        l.q = nn::Linear::make(channels, channels, rng, 0.02);
        l.k = nn::Linear::make(channels, channels, rng, 0.02);
        l.v = nn::Linear::make(channels, channels, rng, 0.02);
        l.o = nn::Linear::make(channels, channels, rng, 0.02);
        l.bias = BiasTable::make(window, heads, bias_channels, rng);
        l.heads = heads;
        return l;
    }

    void register_into(nn::ParamRegistry& reg, const std::string& prefix) const {
        q.register_into(reg, prefix + ".q");
        k.register_into(reg, prefix + ".k");
        v.register_into(reg, prefix + ".v");
        o.register_into(reg, prefix + ".o");
        bias.register_into(reg, prefix + ".bias");
    }
};

// Windowed prompt-mixing attention. Queries come from window content only;
// keys/values additionally cover the element's prompt tokens, which every
// window of that element attends to. Output has the content shape, so the
// block structure is independent of prompt count.
//
// score = Q K^T / sqrt(C_head) + [B_content, B_prompt] / sqrt(C_bias)
//
// `prompts` is per batch element (may be empty for a prompt-free forward);
// elements of the same batch may carry different prompt counts.
inline Var pma_forward(const PMALayer& layer, const win::WindowedContent& wc,
                       const std::vector<PromptTokens>& prompts, bool prompt_bias_enabled = true) {
    if (!prompts.empty() && static_cast<int>(prompts.size()) != wc.batch)
        throw validation_error("pma_forward: prompt list must match batch size");
    int B = wc.batch;
    int n_win = wc.windows_per_item();
    int nw = wc.window * wc.window;
    int C = wc.channels;
    int H = layer.heads;
    int ch = C / H;
    double qk_scale = 1.0 / std::sqrt(static_cast<double>(ch));
    double bias_scale = 1.0 / std::sqrt(static_cast<double>(layer.bias.bias_channels));

    auto flat = ad::reshape(wc.windows, {B * n_win * nw, C});
    auto Q = layer.q(flat);
    auto K = layer.k(flat);
    auto V = layer.v(flat);

    Var bc = ad::scale(content_bias(layer.bias), bias_scale);  // (H, nw, nw)

    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(B));
    std::int64_t rows_per_el = static_cast<std::int64_t>(n_win) * nw;
    for (int e = 0; e < B; ++e) {
        auto qe = ad::split_heads(ad::slice_rows(Q, e * rows_per_el, rows_per_el), H);
        auto ke = ad::split_heads(ad::slice_rows(K, e * rows_per_el, rows_per_el), H);
        auto ve = ad::split_heads(ad::slice_rows(V, e * rows_per_el, rows_per_el), H);
        auto q3 = ad::reshape(qe, {H * n_win, nw, ch});
        auto k3 = ad::reshape(ke, {H * n_win, nw, ch});
        auto v3 = ad::reshape(ve, {H * n_win, nw, ch});

        int np = prompts.empty() ? 0 : prompts[e].count();
        Var bias_full = bc;
        if (np > 0) {
            const auto& pt = prompts[e];
            auto kp = ad::split_heads(layer.k(pt.tokens), H);  // (H*np, ch)
            auto vp = ad::split_heads(layer.v(pt.tokens), H);
            std::vector<std::int64_t> rep(static_cast<std::size_t>(H) * n_win * np);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < n_win; ++w)
                    for (int p = 0; p < np; ++p)
                        rep[(static_cast<std::size_t>(h) * n_win + w) * np + p] =
                            static_cast<std::int64_t>(h) * np + p;
            auto kp3 = ad::gather_rows(kp, rep, {H * n_win, np, ch});
            auto vp3 = ad::gather_rows(vp, rep, {H * n_win, np, ch});
            k3 = ad::concat_dim1(k3, kp3);
            v3 = ad::concat_dim1(v3, vp3);

            Var bp_block;
            if (prompt_bias_enabled) {
                auto bp = ad::scale(prompt_bias(layer.bias, pt.bias_embed), bias_scale);  // (H, np)
                std::vector<std::int64_t> rows(static_cast<std::size_t>(H) * nw);
                for (int h = 0; h < H; ++h)
                    for (int i = 0; i < nw; ++i) rows[static_cast<std::size_t>(h) * nw + i] = h;
                bp_block = ad::gather_rows(bp, rows, {H, nw, np});
            } else {
                bp_block = ad::constant(Tensor::zeros({H, nw, np}));
            }
            bias_full = ad::concat_last({bc, bp_block}, {H, nw, nw + np});
        }

        auto scores = ad::scale(ad::bmm_nt(q3, k3), qk_scale);
        scores = ad::add_bias_grouped(scores, bias_full);
        auto att = ad::bmm(ad::softmax_lastdim(scores), v3);  // (H*n_win, nw, ch)
        auto merged = ad::merge_heads(ad::reshape(att, {H * n_win * nw, ch}), H);
        outs.push_back(layer.o(merged));
    }
    auto out = outs.size() == 1 ? outs[0] : ad::concat_rows(outs);
    return ad::reshape(out, {B * n_win, nw, C});
}

}  // namespace punet::att
