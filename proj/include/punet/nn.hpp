#pragma once

#include <map>
#include <memory>
#include <string>

#include "punet/ops_linalg.hpp"
#include "punet/rng.hpp"

namespace punet::nn {

using ad::Var;

// Ordered name -> parameter map. Names are stable across runs and are the
// checkpoint / freeze-mask / EMA alignment key.
struct ParamRegistry {
    std::vector<std::pair<std::string, Var>> params;
    std::vector<std::pair<std::string, std::shared_ptr<Tensor>>> buffers;

    void add(const std::string& name, const Var& v) {
        if (find(name)) throw validation_error("registry: duplicate param name " + name);
        params.emplace_back(name, v);
    }

    void add_buffer(const std::string& name, const std::shared_ptr<Tensor>& t) {
        for (const auto& [n, _] : buffers)
            if (n == name) throw validation_error("registry: duplicate buffer name " + name);
        buffers.emplace_back(name, t);
    }

    Var find(const std::string& name) const {
        for (const auto& [n, v] : params)
            if (n == name) return v;
        return nullptr;
    }

    Var at(const std::string& name) const {
        Var v = find(name);
        if (!v) throw validation_error("registry: unknown param " + name);
        return v;
    }

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& [_, v] : params) n += v->value.numel();
        return n;
    }

    std::vector<Var> param_vars() const {
        std::vector<Var> out;
        out.reserve(params.size());
        for (const auto& [_, v] : params) out.push_back(v);
        return out;
    }
};

// He-normal for conv/linear feeding leaky ReLU; scaled normal elsewhere.
inline Tensor he_normal(Shape s, std::int64_t fan_in, Rng& rng) {
    return Tensor::randn(std::move(s), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

struct Linear {
    Var w;  // (out, in)
    Var b;  // (out)

    static Linear make(int in, int out, Rng& rng, double w_std) {
        Linear l;
        l.w = ad::param(Tensor::randn({out, in}, rng, w_std));
        l.b = ad::param(Tensor::zeros({out}));
        return l;
    }

    static Linear make_he(int in, int out, Rng& rng) {
        Linear l;
        l.w = ad::param(he_normal({out, in}, in, rng));
        l.b = ad::param(Tensor::zeros({out}));
        return l;
    }

    Var operator()(const Var& x) const { return ad::add_rowvec(ad::matmul_nt(x, w), b); }

    void register_into(ParamRegistry& reg, const std::string& prefix) const {
        reg.add(prefix + ".w", w);
        reg.add(prefix + ".b", b);
    }
};

// Per-instance, per-channel normalization over H,W with affine params.
struct InstanceNorm {
    Var gamma, beta;
    double eps = 1e-5;

    static InstanceNorm make(int C) {
        InstanceNorm n;
        n.gamma = ad::param(Tensor::full({C}, 1.0));
        n.beta = ad::param(Tensor::zeros({C}));
        return n;
    }

    Var operator()(const Var& x) const {
        ad::expect_rank4(x->value, "instance_norm");
        int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
        auto mu = ad::reduce_mean_spatial(x);
        auto d = ad::sub(x, ad::broadcast_spatial(mu, H, W));
        auto var = ad::reduce_mean_spatial(ad::mul(d, d));
        auto inv = ad::pow_const(ad::add_scalar(var, eps), -0.5);
        auto xn = ad::mul(d, ad::broadcast_spatial(inv, H, W));
        return ad::add(ad::mul(xn, ad::broadcast_channel(gamma, B, H, W)),
                       ad::broadcast_channel(beta, B, H, W));
    }

    void register_into(ParamRegistry& reg, const std::string& prefix) const {
        reg.add(prefix + ".gamma", gamma);
        reg.add(prefix + ".beta", beta);
    }
};

// Batch norm over (B,H,W) per channel. `frozen` layers always use running
// stats; live layers use batch stats in training mode and update the
// running buffers. Eval mode always uses running stats.
struct BatchNorm {
    Var gamma, beta;
    std::shared_ptr<Tensor> running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;
    bool frozen = false;

    static BatchNorm make(int C) {
        BatchNorm n;
        n.gamma = ad::param(Tensor::full({C}, 1.0));
        n.beta = ad::param(Tensor::zeros({C}));
        n.running_mean = std::make_shared<Tensor>(Shape{C});
        n.running_var = std::make_shared<Tensor>(Tensor::full({C}, 1.0));
        return n;
    }

    Var forward(const Var& x, bool training) const {
        ad::expect_rank4(x->value, "batch_norm");
        int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], C = x->value.shape[3];
        bool batch_stats = training && !frozen;
        if (batch_stats) {
            auto mu = ad::reduce_mean_bhw(x);
            auto d = ad::sub(x, ad::broadcast_channel(mu, B, H, W));
            auto var = ad::reduce_mean_bhw(ad::mul(d, d));
            {
                // Running stats update is value-only bookkeeping.
                double n = static_cast<double>(x->value.numel() / C);
                double corr = n > 1.0 ? n / (n - 1.0) : 1.0;
                for (int c = 0; c < C; ++c) {
                    running_mean->data[static_cast<std::size_t>(c)] =
                        (1.0 - momentum) * running_mean->data[static_cast<std::size_t>(c)] + momentum * mu->value.data[static_cast<std::size_t>(c)];
                    running_var->data[static_cast<std::size_t>(c)] =
                        (1.0 - momentum) * running_var->data[static_cast<std::size_t>(c)] + momentum * corr * var->value.data[static_cast<std::size_t>(c)];
                }
            }
            auto inv = ad::pow_const(ad::add_scalar(var, eps), -0.5);
            auto xn = ad::mul(d, ad::broadcast_channel(inv, B, H, W));
            return ad::add(ad::mul(xn, ad::broadcast_channel(gamma, B, H, W)),
                           ad::broadcast_channel(beta, B, H, W));
        }
        Tensor inv_t({C});
        for (int c = 0; c < C; ++c)
            inv_t.data[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(running_var->data[static_cast<std::size_t>(c)] + eps);
        auto d = ad::sub(x, ad::broadcast_channel(ad::constant(*running_mean), B, H, W));
        auto xn = ad::mul(d, ad::broadcast_channel(ad::constant(inv_t), B, H, W));
        return ad::add(ad::mul(xn, ad::broadcast_channel(gamma, B, H, W)),
                       ad::broadcast_channel(beta, B, H, W));
    }

    void register_into(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".gamma", gamma);
        reg.add(prefix + ".beta", beta);
        reg.add_buffer(prefix + ".running_mean", running_mean);
        reg.add_buffer(prefix + ".running_var", running_var);
    }
};

// Euclidean norms of the 2D-view rows: (..., C) -> (rows).
inline Var row_norms(const Var& x) {
    return ad::pow_const(ad::sum_last(ad::mul(x, x)), 0.5);
}

// All-pairs cosine similarity between rows of a (R,C) and rows of b (M,C),
// denominator guarded by max(|a||b|, guard_eps).
inline Var cosine_pairs(const Var& a, const Var& b, double guard_eps = 1e-8) {
    auto num = ad::matmul_nt(a, b);
    int R = num->value.shape[0], M = num->value.shape[1];
    auto na = ad::reshape(row_norms(a), {R, 1});
    auto nb = ad::reshape(row_norms(b), {1, M});
    auto denom = ad::maximum_scalar(ad::matmul(na, nb), guard_eps);
    return ad::mul(num, ad::pow_const(denom, -1.0));
}

}  // namespace punet::nn
