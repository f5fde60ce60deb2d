#pragma once

#include "punet/nn.hpp"

namespace punet::opt {

using ad::Var;

// One optimized parameter. lr_mult scales the shared base rate (prompt
// parameters usually run hotter than the backbone); decay gates decoupled
// weight decay (off for biases, norms and prompts).
struct Entry {
    Var v;
    double lr_mult = 1.0;
    bool decay = true;
};

// Build the entry list for the trainable subset of a registry. Decay applies
// to matrices/kernels only; prompt-owned parameters get prompt_lr_mult.
inline std::vector<Entry> entries_for(const nn::ParamRegistry& reg, const std::vector<bool>& mask,
                                      double prompt_lr_mult = 1.0) {
    if (mask.size() != reg.params.size())
        throw validation_error("optimizer: mask size does not match registry");
    std::vector<Entry> out;
    for (std::size_t i = 0; i < reg.params.size(); ++i) {
        if (!mask[i]) continue;
        const auto& [name, v] = reg.params[i];
        Entry e;
        e.v = v;
        e.lr_mult = name.rfind("prompt.", 0) == 0 ? prompt_lr_mult : 1.0;
        e.decay = v->value.ndim() >= 2 && name.rfind("prompt.", 0) != 0;
        out.push_back(std::move(e));
    }
    return out;
}

// AdamW with decoupled weight decay. Entries whose grad is empty this step
// (parameter unused in the current graph) are skipped.
class AdamW {
public:
    AdamW(std::vector<Entry> entries, double lr, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : entries_(std::move(entries)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& e : entries_) {
            m_.push_back(Tensor(e.v->value.shape));
            u_.push_back(Tensor(e.v->value.shape));
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void zero_grad() {
        for (auto& e : entries_) e.v->grad = Tensor();
    }

    void step() {
        ++t_;
        double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            auto& e = entries_[i];
            if (e.v->grad.numel() == 0) continue;
            if (!e.v->grad.all_finite())
                throw numeric_error("optimizer: non-finite gradient encountered");
            double rate = lr_ * e.lr_mult;
            for (std::size_t j = 0; j < e.v->value.data.size(); ++j) {
                double g = e.v->grad.data[j];
                m_[i].data[j] = b1_ * m_[i].data[j] + (1.0 - b1_) * g;
                u_[i].data[j] = b2_ * u_[i].data[j] + (1.0 - b2_) * g * g;
                double mh = m_[i].data[j] / c1;
                double uh = u_[i].data[j] / c2;
                e.v->value.data[j] -= rate * mh / (std::sqrt(uh) + eps_);
                if (e.decay) e.v->value.data[j] -= rate * wd_ * e.v->value.data[j];
            }
        }
    }

private:
    std::vector<Entry> entries_;
    std::vector<Tensor> m_, u_;
    double lr_, wd_, b1_, b2_, eps_;
    int t_ = 0;
};

// Plain SGD, mostly for sanity experiments and tests.
class SGD {
public:
    SGD(std::vector<Entry> entries, double lr) : entries_(std::move(entries)), lr_(lr) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void zero_grad() {
        for (auto& e : entries_) e.v->grad = Tensor();
    }

    void step() {
        for (auto& e : entries_) {
            if (e.v->grad.numel() == 0) continue;
            if (!e.v->grad.all_finite())
                throw numeric_error("optimizer: non-finite gradient encountered");
            for (std::size_t j = 0; j < e.v->value.data.size(); ++j)
                e.v->value.data[j] -= lr_ * e.lr_mult * e.v->grad.data[j];
        }
    }

private:
    std::vector<Entry> entries_;
    double lr_;
};

// One-cycle schedule: linear warmup over the first 30% of steps from peak/10
// to peak, then linear decay to peak/100.
inline double one_cycle_lr(double peak, int step, int total) {
    if (total < 1) throw validation_error("one_cycle_lr: total must be positive");
    double t = total == 1 ? 1.0 : static_cast<double>(step) / (total - 1);
    t = std::min(std::max(t, 0.0), 1.0);
    const double warm = 0.3;
    if (t < warm) {
        double f = t / warm;
        return peak / 10.0 + (peak - peak / 10.0) * f;
    }
    double f = (t - warm) / (1.0 - warm);
    return peak + (peak / 100.0 - peak) * f;
}

}  // namespace punet::opt
