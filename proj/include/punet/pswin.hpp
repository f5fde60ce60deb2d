#pragma once

#include "punet/attention.hpp"

namespace punet::blk {

using ad::Var;

// Prompt material for one element entering one block: the two attention
// sublayers carry distinct token banks.
struct BlockPrompts {
    att::PromptTokens a;  // windowed attention sublayer
    att::PromptTokens b;  // shifted-window sublayer
};

// Residual transformer block on a feature map:
//   x += W-PMA(IN(x))          (windowed attention)
//   x += Linear(IN(x))
//   x += SW-PMA(IN(x))         (cyclic shift by window/2, attend, unshift)
//   x += Linear(IN(x))
// Prompts pass into attention un-normalized; only content goes through IN.
// An optional adapter (zero-initialized, so initially the identity) can be
// appended for the adapter tuning scheme.
struct PSWinBlock {
    nn::InstanceNorm in1, in2, in3, in4;
    att::PMALayer wpma, swpma;
    nn::Linear lin1, lin2;
    int window = 0;
    int channels = 0;

    bool has_adapter = false;
    nn::InstanceNorm adapter_in;
    nn::Linear adapter_lin;

    static PSWinBlock make(int channels, int heads, int window, int bias_channels, Rng& rng) {
        PSWinBlock b;
        b.window = window;
        b.channels = channels;
        b.in1 = nn::InstanceNorm::make(channels);
        b.in2 = nn::InstanceNorm::make(channels);
        b.in3 = nn::InstanceNorm::make(channels);
        b.in4 = nn::InstanceNorm::make(channels);
        b.wpma = att::PMALayer::make(channels, heads, window, bias_channels, rng);
        b.swpma = att::PMALayer::make(channels, heads, window, bias_channels, rng);
        b.lin1 = nn::Linear::make(channels, channels, rng, 0.02);
        b.lin2 = nn::Linear::make(channels, channels, rng, 0.02);
        return b;
    }

    void add_adapter() {
        if (has_adapter) throw validation_error("pswin: adapter already attached");
        has_adapter = true;
        adapter_in = nn::InstanceNorm::make(channels);
        adapter_lin.w = ad::param(Tensor::zeros({channels, channels}));
        adapter_lin.b = ad::param(Tensor::zeros({channels}));
    }

    void register_into(nn::ParamRegistry& reg, const std::string& prefix) const {
        in1.register_into(reg, prefix + ".in1");
        wpma.register_into(reg, prefix + ".wpma");
        in2.register_into(reg, prefix + ".in2");
        lin1.register_into(reg, prefix + ".lin1");
        in3.register_into(reg, prefix + ".in3");
        swpma.register_into(reg, prefix + ".swpma");
        in4.register_into(reg, prefix + ".in4");
        lin2.register_into(reg, prefix + ".lin2");
        if (has_adapter) {
            adapter_in.register_into(reg, prefix + ".adapter.in");
            adapter_lin.register_into(reg, prefix + ".adapter.lin");
        }
    }
};

namespace detail {
inline Var cellwise(const nn::Linear& lin, const Var& x) {
    int B = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2], C = x->value.shape[3];
    return ad::reshape(lin(ad::reshape(x, {B * H * W, C})), {B, H, W, C});
}

inline std::vector<att::PromptTokens> pick(const std::vector<BlockPrompts>& prompts, bool first) {
    std::vector<att::PromptTokens> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) out.push_back(first ? p.a : p.b);
    return out;
}
}  // namespace detail

inline win::FeatureMap pswin_forward(const PSWinBlock& block, const win::FeatureMap& fm,
                                     const std::vector<BlockPrompts>& prompts,
                                     bool prompt_bias_enabled = true) {
    if (block.channels != fm.values->value.shape[3])
        throw validation_error("pswin: channel mismatch");
    int shift = block.window / 2;
    Var x = fm.values;

    {
        auto wc = win::partition(block.in1(x), block.window);
        wc.windows = att::pma_forward(block.wpma, wc, detail::pick(prompts, true), prompt_bias_enabled);
        x = ad::add(x, win::reverse_windows(wc));
    }
    x = ad::add(x, detail::cellwise(block.lin1, block.in2(x)));
    {
        auto xs = win::cyclic_shift_values(x, -shift, -shift);
        auto wc = win::partition(block.in3(xs), block.window);
        wc.windows = att::pma_forward(block.swpma, wc, detail::pick(prompts, false), prompt_bias_enabled);
        xs = ad::add(xs, win::reverse_windows(wc));
        x = win::cyclic_shift_values(xs, shift, shift);
    }
    x = ad::add(x, detail::cellwise(block.lin2, block.in4(x)));

    if (block.has_adapter)
        x = ad::add(x, detail::cellwise(block.adapter_lin, ad::leaky_relu(block.adapter_in(x), 0.01)));
    return {x, fm.grid};
}

}  // namespace punet::blk
