#pragma once

#include <Eigen/Dense>

#include "punet/autodiff.hpp"

namespace punet::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

inline void expect_rank(const Tensor& t, std::size_t r, const char* who) {
    if (t.ndim() != r)
        throw validation_error(std::string(who) + ": need rank " + std::to_string(r) + ", got " + shape_str(t.shape));
}

// a (n,k) x b (k,m) -> (n,m)
inline Var matmul(const Var& a, const Var& b) {
    expect_rank(a->value, 2, "matmul lhs");
    expect_rank(b->value, 2, "matmul rhs");
    int n = a->value.shape[0], k = a->value.shape[1], m = b->value.shape[1];
    if (b->value.shape[0] != k) throw validation_error("matmul: inner dim mismatch");
    Tensor out({n, m});
    CMapM A(a->value.data.data(), n, k);
    CMapM B(b->value.data.data(), k, m);
    MapM O(out.data.data(), n, m);
    O.noalias() = A * B;
    return make_op("matmul", std::move(out), {a, b}, [n, k, m](Node& nd) {
        CMapM G(nd.grad.data.data(), n, m);
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            MapM GA(pa.grad.data.data(), n, k);
            CMapM B(pb.value.data.data(), k, m);
            GA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            MapM GB(pb.grad.data.data(), k, m);
            CMapM A(pa.value.data.data(), n, k);
            GB.noalias() += A.transpose() * G;
        }
    });
}

// a (n,k) x b(m,k)^T -> (n,m). Linear layers store weights as (out, in).
inline Var matmul_nt(const Var& a, const Var& b) {
    expect_rank(a->value, 2, "matmul_nt lhs");
    expect_rank(b->value, 2, "matmul_nt rhs");
    int n = a->value.shape[0], k = a->value.shape[1], m = b->value.shape[0];
    if (b->value.shape[1] != k) throw validation_error("matmul_nt: inner dim mismatch");
    Tensor out({n, m});
    CMapM A(a->value.data.data(), n, k);
    CMapM B(b->value.data.data(), m, k);
    MapM O(out.data.data(), n, m);
    O.noalias() = A * B.transpose();
    return make_op("matmul_nt", std::move(out), {a, b}, [n, k, m](Node& nd) {
        CMapM G(nd.grad.data.data(), n, m);
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            MapM GA(pa.grad.data.data(), n, k);
            CMapM B(pb.value.data.data(), m, k);
            GA.noalias() += G * B;
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            MapM GB(pb.grad.data.data(), m, k);
            CMapM A(pa.value.data.data(), n, k);
            GB.noalias() += G.transpose() * A;
        }
    });
}

// Batched: a (G,n,k) x b (G,k,m) -> (G,n,m)
inline Var bmm(const Var& a, const Var& b) {
    expect_rank(a->value, 3, "bmm lhs");
    expect_rank(b->value, 3, "bmm rhs");
    int G = a->value.shape[0], n = a->value.shape[1], k = a->value.shape[2], m = b->value.shape[2];
    if (b->value.shape[0] != G || b->value.shape[1] != k) throw validation_error("bmm: shape mismatch");
    Tensor out({G, n, m});
    for (int g = 0; g < G; ++g) {
        CMapM A(a->value.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
        CMapM B(b->value.data.data() + static_cast<std::int64_t>(g) * k * m, k, m);
        MapM O(out.data.data() + static_cast<std::int64_t>(g) * n * m, n, m);
        O.noalias() = A * B;
    }
    return make_op("bmm", std::move(out), {a, b}, [G, n, k, m](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) ensure_grad(pa);
        if (pb.requires_grad) ensure_grad(pb);
        for (int g = 0; g < G; ++g) {
            CMapM Gm(nd.grad.data.data() + static_cast<std::int64_t>(g) * n * m, n, m);
            if (pa.requires_grad) {
                MapM GA(pa.grad.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
                CMapM B(pb.value.data.data() + static_cast<std::int64_t>(g) * k * m, k, m);
                GA.noalias() += Gm * B.transpose();
            }
            if (pb.requires_grad) {
                MapM GB(pb.grad.data.data() + static_cast<std::int64_t>(g) * k * m, k, m);
                CMapM A(pa.value.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
                GB.noalias() += A.transpose() * Gm;
            }
        }
    });
}

// Batched with transposed rhs: a (G,n,k) x b (G,m,k) -> (G,n,m)
inline Var bmm_nt(const Var& a, const Var& b) {
    expect_rank(a->value, 3, "bmm_nt lhs");
    expect_rank(b->value, 3, "bmm_nt rhs");
    int G = a->value.shape[0], n = a->value.shape[1], k = a->value.shape[2], m = b->value.shape[1];
    if (b->value.shape[0] != G || b->value.shape[2] != k) throw validation_error("bmm_nt: shape mismatch");
    Tensor out({G, n, m});
    for (int g = 0; g < G; ++g) {
        CMapM A(a->value.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
        CMapM B(b->value.data.data() + static_cast<std::int64_t>(g) * m * k, m, k);
        MapM O(out.data.data() + static_cast<std::int64_t>(g) * n * m, n, m);
        O.noalias() = A * B.transpose();
    }
    return make_op("bmm_nt", std::move(out), {a, b}, [G, n, k, m](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) ensure_grad(pa);
        if (pb.requires_grad) ensure_grad(pb);
        for (int g = 0; g < G; ++g) {
            CMapM Gm(nd.grad.data.data() + static_cast<std::int64_t>(g) * n * m, n, m);
            if (pa.requires_grad) {
                MapM GA(pa.grad.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
                CMapM B(pb.value.data.data() + static_cast<std::int64_t>(g) * m * k, m, k);
                GA.noalias() += Gm * B;
            }
            if (pb.requires_grad) {
                MapM GB(pb.grad.data.data() + static_cast<std::int64_t>(g) * m * k, m, k);
                CMapM A(pa.value.data.data() + static_cast<std::int64_t>(g) * n * k, n, k);
                GB.noalias() += Gm.transpose() * A;
            }
        }
    });
}

// (R, H*Ch) -> (H*R, Ch), head-major: out row h*R + r is head h of input row r.
inline Var split_heads(const Var& a, int heads) {
    std::int64_t R = view_rows(a->value);
    int C = view_cols(a->value);
    if (C % heads != 0) throw validation_error("split_heads: channels not divisible by head count");
    int ch = C / heads;
    Tensor out({static_cast<int>(heads * R), ch});
    for (int h = 0; h < heads; ++h)
        for (std::int64_t r = 0; r < R; ++r)
            std::copy_n(a->value.data.data() + r * C + static_cast<std::int64_t>(h) * ch, ch,
                        out.data.data() + (static_cast<std::int64_t>(h) * R + r) * ch);
    return make_op("split_heads", std::move(out), {a}, [heads, R, C, ch](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (int h = 0; h < heads; ++h)
            for (std::int64_t r = 0; r < R; ++r) {
                const double* g = n.grad.data.data() + (static_cast<std::int64_t>(h) * R + r) * ch;
                double* pg = p.grad.data.data() + r * C + static_cast<std::int64_t>(h) * ch;
                for (int c = 0; c < ch; ++c) pg[c] += g[c];
            }
    });
}

// Inverse of split_heads: (H*R, Ch) -> (R, H*Ch).
inline Var merge_heads(const Var& a, int heads) {
    std::int64_t rows = view_rows(a->value);
    int ch = view_cols(a->value);
    if (rows % heads != 0) throw validation_error("merge_heads: rows not divisible by head count");
    std::int64_t R = rows / heads;
    int C = heads * ch;
    Tensor out({static_cast<int>(R), C});
    for (int h = 0; h < heads; ++h)
        for (std::int64_t r = 0; r < R; ++r)
            std::copy_n(a->value.data.data() + (static_cast<std::int64_t>(h) * R + r) * ch, ch,
                        out.data.data() + r * C + static_cast<std::int64_t>(h) * ch);
    return make_op("merge_heads", std::move(out), {a}, [heads, R, C, ch](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (int h = 0; h < heads; ++h)
            for (std::int64_t r = 0; r < R; ++r) {
                const double* g = n.grad.data.data() + r * C + static_cast<std::int64_t>(h) * ch;
                double* pg = p.grad.data.data() + (static_cast<std::int64_t>(h) * R + r) * ch;
                for (int c = 0; c < ch; ++c) pg[c] += g[c];
            }
    });
}

// scores (G,n,m) + bias (H,n,m) where G = H*W; group g uses bias[g / W].
inline Var add_bias_grouped(const Var& scores, const Var& bias) {
    expect_rank(scores->value, 3, "add_bias_grouped scores");
    expect_rank(bias->value, 3, "add_bias_grouped bias");
    int G = scores->value.shape[0], n = scores->value.shape[1], m = scores->value.shape[2];
    int H = bias->value.shape[0];
    if (bias->value.shape[1] != n || bias->value.shape[2] != m || H <= 0 || G % H != 0)
        throw validation_error("add_bias_grouped: incompatible shapes " + shape_str(scores->value.shape) + " vs " + shape_str(bias->value.shape));
    int W = G / H;
    std::int64_t nm = static_cast<std::int64_t>(n) * m;
    Tensor out = scores->value;
    for (int g = 0; g < G; ++g) {
        const double* b = bias->value.data.data() + static_cast<std::int64_t>(g / W) * nm;
        double* o = out.data.data() + static_cast<std::int64_t>(g) * nm;
        for (std::int64_t i = 0; i < nm; ++i) o[i] += b[i];
    }
    return make_op("add_bias_grouped", std::move(out), {scores, bias}, [G, W, nm](Node& nd) {
        Node& ps = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (ps.requires_grad) {
            ensure_grad(ps);
            for (std::size_t i = 0; i < nd.grad.data.size(); ++i) ps.grad.data[i] += nd.grad.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (int g = 0; g < G; ++g) {
                const double* gr = nd.grad.data.data() + static_cast<std::int64_t>(g) * nm;
                double* bg = pb.grad.data.data() + static_cast<std::int64_t>(g / W) * nm;
                for (std::int64_t i = 0; i < nm; ++i) bg[i] += gr[i];
            }
        }
    });
}

// a (G,n1,m) ++ b (G,n2,m) -> (G,n1+n2,m) along dim 1.
inline Var concat_dim1(const Var& a, const Var& b) {
    expect_rank(a->value, 3, "concat_dim1 lhs");
    expect_rank(b->value, 3, "concat_dim1 rhs");
    int G = a->value.shape[0], n1 = a->value.shape[1], m = a->value.shape[2], n2 = b->value.shape[1];
    if (b->value.shape[0] != G || b->value.shape[2] != m) throw validation_error("concat_dim1: shape mismatch");
    Tensor out({G, n1 + n2, m});
    for (int g = 0; g < G; ++g) {
        std::copy_n(a->value.data.data() + static_cast<std::int64_t>(g) * n1 * m, static_cast<std::int64_t>(n1) * m,
                    out.data.data() + static_cast<std::int64_t>(g) * (n1 + n2) * m);
        std::copy_n(b->value.data.data() + static_cast<std::int64_t>(g) * n2 * m, static_cast<std::int64_t>(n2) * m,
                    out.data.data() + static_cast<std::int64_t>(g) * (n1 + n2) * m + static_cast<std::int64_t>(n1) * m);
    }
    return make_op("concat_dim1", std::move(out), {a, b}, [G, n1, n2, m](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        std::int64_t stride = static_cast<std::int64_t>(n1 + n2) * m;
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (int g = 0; g < G; ++g) {
                const double* gr = nd.grad.data.data() + g * stride;
                double* pg = pa.grad.data.data() + static_cast<std::int64_t>(g) * n1 * m;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(n1) * m; ++i) pg[i] += gr[i];
            }
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (int g = 0; g < G; ++g) {
                const double* gr = nd.grad.data.data() + g * stride + static_cast<std::int64_t>(n1) * m;
                double* pg = pb.grad.data.data() + static_cast<std::int64_t>(g) * n2 * m;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(n2) * m; ++i) pg[i] += gr[i];
            }
        }
    });
}

namespace detail {
inline void im2col(const Tensor& x, int b, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, Tensor& col) {
    int H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
    int patch = kh * kw * Cin;
    const double* xb = x.data.data() + static_cast<std::int64_t>(b) * H * W * Cin;
    for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
            double* row = col.data.data() + (static_cast<std::int64_t>(i) * Wo + j) * patch;
            for (int di = 0; di < kh; ++di) {
                int si = i * stride - pad + di;
                for (int dj = 0; dj < kw; ++dj) {
                    int sj = j * stride - pad + dj;
                    double* dst = row + (static_cast<std::int64_t>(di) * kw + dj) * Cin;
                    if (si < 0 || si >= H || sj < 0 || sj >= W) {
                        std::fill_n(dst, Cin, 0.0);
                    } else {
                        std::copy_n(xb + (static_cast<std::int64_t>(si) * W + sj) * Cin, Cin, dst);
                    }
                }
            }
        }
}
}  // namespace detail

// x (B,H,W,Cin), w (kh,kw,Cin,Cout), bias (Cout) -> (B,Ho,Wo,Cout)
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    expect_rank4(x->value, "conv2d input");
    expect_rank(w->value, 4, "conv2d weight");
    int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], Cin = x->value.shape[3];
    int kh = w->value.shape[0], kw = w->value.shape[1], Cout = w->value.shape[3];
    if (w->value.shape[2] != Cin) throw validation_error("conv2d: Cin mismatch");
    if (bias->value.numel() != Cout) throw validation_error("conv2d: bias size mismatch");
    if (stride < 1 || pad < 0) throw validation_error("conv2d: bad stride/pad");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw geometry_error("conv2d: output would be empty");
    int patch = kh * kw * Cin;
    Tensor out({B, Ho, Wo, Cout});
    Tensor col({Ho * Wo, patch});
    CMapM Wm(w->value.data.data(), patch, Cout);
    for (int b = 0; b < B; ++b) {
        detail::im2col(x->value, b, kh, kw, stride, pad, Ho, Wo, col);
        CMapM C(col.data.data(), Ho * Wo, patch);
        MapM O(out.data.data() + static_cast<std::int64_t>(b) * Ho * Wo * Cout, Ho * Wo, Cout);
        O.noalias() = C * Wm;
        for (int i = 0; i < Ho * Wo; ++i)
            for (int c = 0; c < Cout; ++c)
                O(i, c) += bias->value.data[static_cast<std::size_t>(c)];
    }
    return make_op("conv2d", std::move(out), {x, w, bias},
                   [B, H, W, Cin, kh, kw, Cout, stride, pad, Ho, Wo, patch](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        Node& pb = *nd.parents[2];
        if (px.requires_grad) ensure_grad(px);
        if (pw.requires_grad) ensure_grad(pw);
        if (pb.requires_grad) ensure_grad(pb);
        Tensor col({Ho * Wo, patch});
        Tensor gcol({Ho * Wo, patch});
        for (int b = 0; b < B; ++b) {
            CMapM G(nd.grad.data.data() + static_cast<std::int64_t>(b) * Ho * Wo * Cout, Ho * Wo, Cout);
            if (pw.requires_grad || pb.requires_grad) {
                if (pw.requires_grad) {
                    detail::im2col(px.value, b, kh, kw, stride, pad, Ho, Wo, col);
                    CMapM C(col.data.data(), Ho * Wo, patch);
                    MapM GW(pw.grad.data.data(), patch, Cout);
                    GW.noalias() += C.transpose() * G;
                }
                if (pb.requires_grad)
                    for (int i = 0; i < Ho * Wo; ++i)
                        for (int c = 0; c < Cout; ++c) pb.grad.data[static_cast<std::size_t>(c)] += G(i, c);
            }
            if (px.requires_grad) {
                CMapM Wm(pw.value.data.data(), patch, Cout);
                MapM GC(gcol.data.data(), Ho * Wo, patch);
                GC.noalias() = G * Wm.transpose();
                double* gx = px.grad.data.data() + static_cast<std::int64_t>(b) * H * W * Cin;
                for (int i = 0; i < Ho; ++i)
                    for (int j = 0; j < Wo; ++j) {
                        const double* row = gcol.data.data() + (static_cast<std::int64_t>(i) * Wo + j) * patch;
                        for (int di = 0; di < kh; ++di) {
                            int si = i * stride - pad + di;
                            if (si < 0 || si >= H) continue;
                            for (int dj = 0; dj < kw; ++dj) {
                                int sj = j * stride - pad + dj;
                                if (sj < 0 || sj >= W) continue;
                                const double* src = row + (static_cast<std::int64_t>(di) * kw + dj) * Cin;
                                double* dst = gx + (static_cast<std::int64_t>(si) * W + sj) * Cin;
                                for (int c = 0; c < Cin; ++c) dst[c] += src[c];
                            }
                        }
                    }
            }
        }
    });
}

namespace detail {
struct LerpIdx {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};
// align_corners=false mapping for a fixed x2 factor.
inline LerpIdx upsample2x_axis(int n) {
    LerpIdx li;
    li.lo.resize(2 * n);
    li.hi.resize(2 * n);
    li.frac.resize(2 * n);
    for (int i = 0; i < 2 * n; ++i) {
        double s = (i + 0.5) / 2.0 - 0.5;
        int i0 = static_cast<int>(std::floor(s));
        double f = s - i0;
        li.lo[i] = std::min(std::max(i0, 0), n - 1);
        li.hi[i] = std::min(std::max(i0 + 1, 0), n - 1);
        li.frac[i] = f;
    }
    return li;
}
}  // namespace detail

// (B,H,W,C) -> (B,2H,2W,C), bilinear, align_corners=false.
inline Var upsample_bilinear2x(const Var& x) {
    expect_rank4(x->value, "upsample_bilinear2x");
    int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], C = x->value.shape[3];
    auto ri = detail::upsample2x_axis(H);
    auto ci = detail::upsample2x_axis(W);
    Tensor out({B, 2 * H, 2 * W, C});
    for (int b = 0; b < B; ++b) {
        const double* xb = x->value.data.data() + static_cast<std::int64_t>(b) * H * W * C;
        double* ob = out.data.data() + static_cast<std::int64_t>(b) * 4 * H * W * C;
        for (int i = 0; i < 2 * H; ++i) {
            double fi = ri.frac[i];
            const double* r0 = xb + static_cast<std::int64_t>(ri.lo[i]) * W * C;
            const double* r1 = xb + static_cast<std::int64_t>(ri.hi[i]) * W * C;
            for (int j = 0; j < 2 * W; ++j) {
                double fj = ci.frac[j];
                const double* p00 = r0 + static_cast<std::int64_t>(ci.lo[j]) * C;
                const double* p01 = r0 + static_cast<std::int64_t>(ci.hi[j]) * C;
                const double* p10 = r1 + static_cast<std::int64_t>(ci.lo[j]) * C;
                const double* p11 = r1 + static_cast<std::int64_t>(ci.hi[j]) * C;
                double* o = ob + (static_cast<std::int64_t>(i) * 2 * W + j) * C;
                for (int c = 0; c < C; ++c)
                    o[c] = (1 - fi) * ((1 - fj) * p00[c] + fj * p01[c]) + fi * ((1 - fj) * p10[c] + fj * p11[c]);
            }
        }
    }
    return make_op("upsample_bilinear2x", std::move(out), {x},
                   [B, H, W, C, ri = std::move(ri), ci = std::move(ci)](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        for (int b = 0; b < B; ++b) {
            const double* gb = nd.grad.data.data() + static_cast<std::int64_t>(b) * 4 * H * W * C;
            double* pg = p.grad.data.data() + static_cast<std::int64_t>(b) * H * W * C;
            for (int i = 0; i < 2 * H; ++i) {
                double fi = ri.frac[i];
                double* r0 = pg + static_cast<std::int64_t>(ri.lo[i]) * W * C;
                double* r1 = pg + static_cast<std::int64_t>(ri.hi[i]) * W * C;
                for (int j = 0; j < 2 * W; ++j) {
                    double fj = ci.frac[j];
                    const double* g = gb + (static_cast<std::int64_t>(i) * 2 * W + j) * C;
                    double* p00 = r0 + static_cast<std::int64_t>(ci.lo[j]) * C;
                    double* p01 = r0 + static_cast<std::int64_t>(ci.hi[j]) * C;
                    double* p10 = r1 + static_cast<std::int64_t>(ci.lo[j]) * C;
                    double* p11 = r1 + static_cast<std::int64_t>(ci.hi[j]) * C;
                    for (int c = 0; c < C; ++c) {
                        p00[c] += (1 - fi) * (1 - fj) * g[c];
                        p01[c] += (1 - fi) * fj * g[c];
                        p10[c] += fi * (1 - fj) * g[c];
                        p11[c] += fi * fj * g[c];
                    }
                }
            }
        }
    });
}

}  // namespace punet::ad
