#pragma once

#include "punet/nn.hpp"

namespace punet::sup {

using ad::Var;

// Inverse-frequency class weights: 1 / mean foreground fraction per class,
// clipped to [0.1, 10], then rescaled to mean 1. Absent classes saturate at
// the clip ceiling instead of dividing by zero.
inline std::vector<double> class_weights(const std::vector<Tensor>& label_maps, int n_classes) {
    if (n_classes < 1) throw validation_error("class_weights: need at least one class");
    if (label_maps.empty()) throw validation_error("class_weights: no label maps");
    std::vector<double> freq(static_cast<std::size_t>(n_classes), 0.0);
    std::int64_t total = 0;
    for (const Tensor& m : label_maps) {
        for (double v : m.data) {
            int c = static_cast<int>(v);
            if (c < 0 || c >= n_classes || static_cast<double>(c) != v)
                throw validation_error("class_weights: label outside [0, n_classes)");
            freq[static_cast<std::size_t>(c)] += 1.0;
        }
        total += m.numel();
    }
    std::vector<double> w(static_cast<std::size_t>(n_classes));
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        double f = freq[static_cast<std::size_t>(c)] / static_cast<double>(total);
        double raw = f > 0.0 ? 1.0 / f : std::numeric_limits<double>::infinity();
        w[static_cast<std::size_t>(c)] = std::min(std::max(raw, 0.1), 10.0);
        sum += w[static_cast<std::size_t>(c)];
    }
    for (double& x : w) x *= static_cast<double>(n_classes) / sum;
    return w;
}

// Multi-class focal loss over raw scores (B,H,W,M) against integer labels
// (B,H,W): softmax over classes, then
//   L = mean_pixels( -alpha[y] * (1 - p_y)^gamma * log(p_y + 1e-12) ).
// gamma = 0 reduces to weighted cross-entropy.
inline Var focal_loss(const Var& scores, const Tensor& labels, const std::vector<double>& alpha,
                      double gamma) {
    ad::expect_rank4(scores->value, "focal_loss scores");
    int M = scores->value.shape[3];
    std::int64_t n = scores->value.numel() / M;
    if (labels.numel() != n)
        throw validation_error("focal_loss: label count does not match score cells");
    if (static_cast<int>(alpha.size()) != M)
        throw validation_error("focal_loss: need one alpha per class");

    Tensor onehot({static_cast<int>(n), M});
    Tensor alpha_pix({static_cast<int>(n)});
    for (std::int64_t i = 0; i < n; ++i) {
        int y = static_cast<int>(labels.data[static_cast<std::size_t>(i)]);
        if (y < 0 || y >= M || static_cast<double>(y) != labels.data[static_cast<std::size_t>(i)])
            throw validation_error("focal_loss: label outside [0, n_classes)");
        onehot.data[static_cast<std::size_t>(i) * M + y] = 1.0;
        alpha_pix.data[static_cast<std::size_t>(i)] = alpha[static_cast<std::size_t>(y)];
    }

    auto probs = ad::softmax_lastdim(ad::reshape(scores, {static_cast<int>(n), M}));
    auto p_true = ad::sum_last(ad::mul(probs, ad::constant(onehot)));            // (n)
    auto mod = ad::pow_const(ad::add_scalar(ad::scale(p_true, -1.0), 1.0), gamma);
    auto nll = ad::scale(ad::vlog(ad::add_scalar(p_true, 1e-12)), -1.0);
    return ad::mean_all(ad::mul(ad::mul(mod, nll), ad::constant(alpha_pix)));
}

}  // namespace punet::sup
