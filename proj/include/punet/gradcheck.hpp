#pragma once

#include <functional>
#include <string>

#include "punet/autodiff.hpp"
#include "punet/rng.hpp"

namespace punet::gradcheck {

// A differentiable scalar function of a set of leaf tensors. `forward` must
// rebuild its graph from the current leaf values on every call and must not
// consume RNG (the checker perturbs leaves in place).
struct FnSpec {
    std::string name;
    std::vector<ad::Var> inputs;
    std::function<ad::Var()> forward;
    double tolerance = 1e-4;
};

struct Report {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
    double tolerance = 1e-4;
    std::string worst_coord;
    bool passed() const { return max_rel_err < tolerance; }
};

// Central differences, h = 1e-5 * max(1, |x|), on up to max_coords sampled
// coordinates across all inputs. Relative error uses a hybrid denominator
// max(1, |analytic|, |numeric|) so near-zero gradients compare absolutely.
inline Report check(const FnSpec& fn, Rng rng, int max_coords = 1000) {
    Report rep;
    rep.name = fn.name;
    rep.tolerance = fn.tolerance;

    ad::zero_grad(fn.inputs);
    ad::Var loss = fn.forward();
    ad::backward(loss);
    std::vector<Tensor> analytic;
    for (const auto& in : fn.inputs) {
        ad::ensure_grad(*in);
        analytic.push_back(in->grad);
    }

    std::vector<std::pair<std::size_t, std::int64_t>> coords;
    for (std::size_t i = 0; i < fn.inputs.size(); ++i)
        for (std::int64_t j = 0; j < fn.inputs[i]->value.numel(); ++j) coords.emplace_back(i, j);
    if (static_cast<int>(coords.size()) > max_coords) {
        rng.shuffle(coords);
        coords.resize(static_cast<std::size_t>(max_coords));
    }

    ad::NoGradGuard ng;
    for (const auto& [i, j] : coords) {
        Tensor& x = fn.inputs[i]->value;
        double x0 = x[j];
        double h = 1e-5 * std::max(1.0, std::fabs(x0));
        x[j] = x0 + h;
        double fp = fn.forward()->value.data[0];
        x[j] = x0 - h;
        double fm = fn.forward()->value.data[0];
        x[j] = x0;
        double fd = (fp - fm) / (2.0 * h);
        double an = analytic[i][j];
        double rel = std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = fn.name + "/input" + std::to_string(i) + "[" + std::to_string(j) + "]" +
                              " analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
        }
        ++rep.coords_checked;
    }
    ad::zero_grad(fn.inputs);
    return rep;
}

}  // namespace punet::gradcheck
