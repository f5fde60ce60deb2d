#pragma once

#include <functional>

#include "punet/config.hpp"
#include "punet/seghead.hpp"

namespace punet::net {

using ad::Var;

// conv -> batch norm -> leaky relu
struct ConvUnit {
    Var w, b;
    nn::BatchNorm bn;
    int stride = 1, pad = 0;

    static ConvUnit make(int k, int cin, int cout, int stride, int pad, Rng& rng) {
        ConvUnit u;
        u.w = ad::param(nn::he_normal({k, k, cin, cout}, static_cast<std::int64_t>(k) * k * cin, rng));
        u.b = ad::param(Tensor::zeros({cout}));
        u.bn = nn::BatchNorm::make(cout);
        u.stride = stride;
        u.pad = pad;
        return u;
    }

    Var forward(const Var& x, bool training) const {
        return ad::leaky_relu(bn.forward(ad::conv2d(x, w, b, stride, pad), training), 0.01);
    }

    void register_into(nn::ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".conv.w", w);
        reg.add(prefix + ".conv.b", b);
        bn.register_into(reg, prefix + ".bn");
    }
};

struct ForwardOptions {
    bool training = false;
    bool deep_prompts = true;  // feed token banks into the attention sublayers
    bool prompt_bias = true;   // heterogeneous bias columns for prompt keys
};

struct SegOut {
    Var scores;                // (B, H, W, M) class score maps at input resolution
    win::FeatureMap features;  // decoder output at half resolution
};

// Prompt-able segmentation UNet. The encoder halves resolution per level
// (stride-2 conv + refinement conv + windowed attention block); the decoder
// mirrors it with bilinear upsampling, skip concatenation, 1x1 fusion and
// another attention block per stage. Every attention block can mix
// per-element prompt tokens into its two attention sublayers. The final
// feature map sits at half the input resolution; class scores are cosine
// similarities against segmentation prompts, aggregated over tokens and
// upsampled to input resolution.
class PUNet {
public:
    PUNet(Config cfg, Rng rng) : cfg_(std::move(cfg)) {
        validate(cfg_);
        if (cfg_.patch_stride != 2)
            throw validation_error("punet: only patch_stride 2 is supported");
        Rng wrng = rng.stream("weights");
        int L = cfg_.levels;
        for (int l = 0; l < L; ++l) {
            Level lev;
            int cin = l == 0 ? 1 : cfg_.channels[static_cast<std::size_t>(l - 1)];
            int c = cfg_.channels[static_cast<std::size_t>(l)];
            lev.down = ConvUnit::make(3, cin, c, 2, 1, wrng);
            lev.refine = ConvUnit::make(3, c, c, 1, 1, wrng);
            lev.block = blk::PSWinBlock::make(c, cfg_.heads, cfg_.window, cfg_.bias_channels, wrng);
            enc_.push_back(std::move(lev));
        }
        for (int l = L - 2; l >= 0; --l) {
            Stage st;
            st.level = l;
            int cin = cfg_.channels[static_cast<std::size_t>(l + 1)] + cfg_.channels[static_cast<std::size_t>(l)];
            st.proj = ConvUnit::make(1, cin, cfg_.channels[static_cast<std::size_t>(l)], 1, 0, wrng);
            st.block = blk::PSWinBlock::make(cfg_.channels[static_cast<std::size_t>(l)], cfg_.heads,
                                             cfg_.window, cfg_.bias_channels, wrng);
            dec_.push_back(std::move(st));
        }
        register_all();
    }

    const Config& config() const { return cfg_; }
    nn::ParamRegistry& registry() { return reg_; }
    const nn::ParamRegistry& registry() const { return reg_; }
    int n_blocks() const { return 2 * cfg_.levels - 1; }

    head::HeadGeometry head_geometry() const {
        head::HeadGeometry g;
        for (int l = 0; l < cfg_.levels; ++l) {
            g.bank_channels.push_back(cfg_.channels[static_cast<std::size_t>(l)]);
            g.bank_channels.push_back(cfg_.channels[static_cast<std::size_t>(l)]);
        }
        for (int l = cfg_.levels - 2; l >= 0; --l) {
            g.bank_channels.push_back(cfg_.channels[static_cast<std::size_t>(l)]);
            g.bank_channels.push_back(cfg_.channels[static_cast<std::size_t>(l)]);
        }
        g.bias_channels = cfg_.bias_channels;
        g.out_channels = cfg_.channels[0];
        return g;
    }

    // Backbone pass: (B,H,W[,1]) images plus per-pixel world grids to
    // half-resolution decoder features. `sel` is one task selection per
    // element; pass {} for a prompt-free forward.
    win::FeatureMap features(const Tensor& images, const Tensor& grid,
                             const std::vector<head::Selection>& sel,
                             const ForwardOptions& opt) const {
        Tensor img4 = images;
        if (img4.ndim() == 3) img4 = img4.reshaped({img4.shape[0], img4.shape[1], img4.shape[2], 1});
        if (img4.ndim() != 4 || img4.shape[3] != 1)
            throw validation_error("punet: images must be (B,H,W) or (B,H,W,1)");
        int B = img4.shape[0], H = img4.shape[1], W = img4.shape[2];
        if (grid.ndim() != 4 || grid.shape[0] != B || grid.shape[1] != H || grid.shape[2] != W ||
            grid.shape[3] != 2)
            throw validation_error("punet: grid must be (B,H,W,2) matching the images");
        if (!sel.empty() && static_cast<int>(sel.size()) != B)
            throw validation_error("punet: need one selection per element (or none)");
        for (int l = 0, sz = std::min(H, W); l < cfg_.levels; ++l) {
            sz /= 2;
            if (sz % cfg_.window != 0)
                throw geometry_error("punet: level " + std::to_string(l) + " map size " +
                                     std::to_string(sz) + " not divisible by window");
        }

        Var x = ad::constant(img4);
        std::vector<win::FeatureMap> skips;
        int block_idx = 0;
        for (int l = 0; l < cfg_.levels; ++l) {
            const Level& lev = enc_[static_cast<std::size_t>(l)];
            x = lev.down.forward(x, opt.training);
            x = lev.refine.forward(x, opt.training);
            win::FeatureMap fm{x, win::grid_at_stride(grid, 1 << (l + 1))};
            fm = blk::pswin_forward(lev.block, fm, block_prompts(block_idx++, B, sel, opt),
                                    opt.prompt_bias);
            x = fm.values;
            skips.push_back(std::move(fm));
        }

        win::FeatureMap deep = skips.back();
        for (const Stage& st : dec_) {
            auto up = ad::upsample_bilinear2x(deep.values);
            const win::FeatureMap& skip = skips[static_cast<std::size_t>(st.level)];
            auto cat = ad::concat_last({up, skip.values});
            win::FeatureMap fm{st.proj.forward(cat, opt.training), skip.grid};
            deep = blk::pswin_forward(st.block, fm, block_prompts(block_idx++, B, sel, opt),
                                      opt.prompt_bias);
        }
        return deep;
    }

    // Full pass to per-class score maps at input resolution. All selections
    // must agree on the class count.
    SegOut segment(const Tensor& images, const Tensor& grid,
                   const std::vector<head::Selection>& sel, const ForwardOptions& opt) const {
        if (sel.empty()) throw validation_error("punet: segment needs task selections");
        auto f = features(images, grid, sel, opt);
        int B = f.values->value.shape[0], Hf = f.values->value.shape[1],
            Wf = f.values->value.shape[2], C = f.values->value.shape[3];
        std::int64_t R = static_cast<std::int64_t>(Hf) * Wf;
        auto flat = ad::reshape(f.values, {B * Hf * Wf, C});

        int M = sel[0].n_classes();
        std::vector<Var> per;
        for (int e = 0; e < B; ++e) {
            const head::Selection& s = sel[static_cast<std::size_t>(e)];
            if (s.n_classes() != M)
                throw validation_error("punet: selections disagree on class count");
            auto rows = ad::slice_rows(flat, e * R, R);
            if (s.linear()) {
                per.push_back(s.set->linear_head(rows));
            } else {
                auto sim = head::token_similarity(rows, s.p_seg_rows(), M, s.set->tokens_per_class);
                per.push_back(head::aggregate_scores(sim, head::agg_variant_from(cfg_.agg_variant),
                                                     cfg_.tau_agg, cfg_.topk_k));
            }
        }
        auto scores = ad::concat_rows(per, {B, Hf, Wf, M});
        return {ad::upsample_bilinear2x(scores), std::move(f)};
    }

    // Zero-initialized adapters on every block, appended to the registry so
    // earlier checkpoints still load (partially) by name.
    void add_adapters() {
        for (auto& [prefix, block] : all_blocks()) {
            block->add_adapter();
            block->adapter_in.register_into(reg_, prefix + ".adapter.in");
            block->adapter_lin.register_into(reg_, prefix + ".adapter.lin");
        }
    }

    bool has_adapters() const { return enc_.front().block.has_adapter; }

    // Freeze/unfreeze batch norm statistics to match a trainability rule:
    // a frozen norm always uses its running statistics.
    void set_bn_frozen(const std::function<bool(const std::string&)>& trainable) {
        for (auto& [gamma_name, bn] : bns_) bn->frozen = !trainable(gamma_name);
    }

private:
    struct Level {
        ConvUnit down, refine;
        blk::PSWinBlock block;
    };
    struct Stage {
        int level = 0;
        ConvUnit proj;
        blk::PSWinBlock block;
    };

    std::vector<std::pair<std::string, blk::PSWinBlock*>> all_blocks() {
        std::vector<std::pair<std::string, blk::PSWinBlock*>> out;
        for (std::size_t l = 0; l < enc_.size(); ++l)
            out.emplace_back("enc" + std::to_string(l) + ".block", &enc_[l].block);
        for (auto& st : dec_) out.emplace_back("dec" + std::to_string(st.level) + ".block", &st.block);
        return out;
    }

    void register_all() {
        for (std::size_t l = 0; l < enc_.size(); ++l) {
            std::string p = "enc" + std::to_string(l);
            enc_[l].down.register_into(reg_, p + ".down");
            enc_[l].refine.register_into(reg_, p + ".refine");
            enc_[l].block.register_into(reg_, p + ".block");
            bns_.emplace_back(p + ".down.bn.gamma", &enc_[l].down.bn);
            bns_.emplace_back(p + ".refine.bn.gamma", &enc_[l].refine.bn);
        }
        for (auto& st : dec_) {
            std::string p = "dec" + std::to_string(st.level);
            st.proj.register_into(reg_, p + ".proj");
            st.block.register_into(reg_, p + ".block");
            bns_.emplace_back(p + ".proj.bn.gamma", &st.proj.bn);
        }
    }

    std::vector<blk::BlockPrompts> block_prompts(int block_idx, int B,
                                                 const std::vector<head::Selection>& sel,
                                                 const ForwardOptions& opt) const {
        std::vector<blk::BlockPrompts> out(static_cast<std::size_t>(B));
        if (!opt.deep_prompts || sel.empty()) return out;
        for (int e = 0; e < B; ++e) {
            const head::Selection& s = sel[static_cast<std::size_t>(e)];
            if (s.linear()) continue;
            out[static_cast<std::size_t>(e)] = {
                s.tokens_for_bank(static_cast<std::size_t>(2 * block_idx)),
                s.tokens_for_bank(static_cast<std::size_t>(2 * block_idx + 1))};
        }
        return out;
    }

    Config cfg_;
    std::vector<Level> enc_;
    std::vector<Stage> dec_;
    nn::ParamRegistry reg_;
    std::vector<std::pair<std::string, nn::BatchNorm*>> bns_;
};

// ---- tuning schemes ---------------------------------------------------------------

// What a parameter-efficiency scheme may train and how it drives the forward
// pass. Task-owned parameters are those under prompt.<task>. for a task in
// the active set.
enum class Scheme {
    fixed,             // frozen backbone, linear task head
    bias,              // additive biases + norm affines + task p_seg
    prompt_no_bias,    // token banks + p_seg, prompt bias columns disabled
    prompt,            // token banks + bias embeddings + p_seg
    bias_plus_prompt,  // union of bias and prompt
    adapter,           // zero-init adapters + task p_seg
    decoder,           // decoder stages + task p_seg
    full,              // everything
    full_fixed,        // full backbone fine-tune with a linear task head
};

inline const char* scheme_name(Scheme s) {
    switch (s) {
        case Scheme::fixed: return "fixed";
        case Scheme::bias: return "bias";
        case Scheme::prompt_no_bias: return "prompt_no_bias";
        case Scheme::prompt: return "prompt";
        case Scheme::bias_plus_prompt: return "bias_plus_prompt";
        case Scheme::adapter: return "adapter";
        case Scheme::decoder: return "decoder";
        case Scheme::full: return "full";
        case Scheme::full_fixed: return "full_fixed";
    }
    return "?";
}

inline Scheme scheme_from(const std::string& s) {
    for (Scheme v : {Scheme::fixed, Scheme::bias, Scheme::prompt_no_bias, Scheme::prompt,
                     Scheme::bias_plus_prompt, Scheme::adapter, Scheme::decoder, Scheme::full,
                     Scheme::full_fixed})
        if (s == scheme_name(v)) return v;
    throw validation_error("unknown tuning scheme: " + s);
}

struct SchemeTraits {
    bool deep_prompts = false;
    bool prompt_bias = false;
    head::HeadMode head_mode = head::HeadMode::prompts;
    bool needs_adapters = false;
};

inline SchemeTraits scheme_traits(Scheme s) {
    switch (s) {
        case Scheme::fixed: return {false, false, head::HeadMode::linear, false};
        case Scheme::bias: return {false, false, head::HeadMode::prompts, false};
        case Scheme::prompt_no_bias: return {true, false, head::HeadMode::prompts, false};
        case Scheme::prompt: return {true, true, head::HeadMode::prompts, false};
        case Scheme::bias_plus_prompt: return {true, true, head::HeadMode::prompts, false};
        case Scheme::adapter: return {false, false, head::HeadMode::prompts, true};
        case Scheme::decoder: return {false, false, head::HeadMode::prompts, false};
        case Scheme::full: return {true, true, head::HeadMode::prompts, false};
        case Scheme::full_fixed: return {false, false, head::HeadMode::linear, false};
    }
    return {};
}

inline bool name_trainable(Scheme s, const std::string& name,
                           const std::vector<std::string>& tasks) {
    auto starts = [](const std::string& n, const std::string& p) { return n.rfind(p, 0) == 0; };
    auto ends = [](const std::string& n, const std::string& suf) {
        return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
    };
    bool backbone = !starts(name, "prompt.");
    std::string rest;
    bool task_owned = false;
    for (const auto& t : tasks) {
        std::string p = "prompt." + t + ".";
        if (starts(name, p)) {
            task_owned = true;
            rest = name.substr(p.size());
            break;
        }
    }
    switch (s) {
        case Scheme::fixed:
            return task_owned && starts(rest, "linear.");
        case Scheme::bias:
            return (backbone && (ends(name, ".b") || ends(name, ".beta") || ends(name, ".gamma"))) ||
                   (task_owned && rest == "p_seg");
        case Scheme::prompt_no_bias:
            return task_owned && (starts(rest, "bank") || rest == "p_seg");
        case Scheme::prompt:
            return task_owned && (starts(rest, "bank") || rest == "e_prompt" || rest == "p_seg");
        case Scheme::bias_plus_prompt:
            return name_trainable(Scheme::bias, name, tasks) ||
                   name_trainable(Scheme::prompt, name, tasks);
        case Scheme::adapter:
            return (backbone && name.find(".adapter.") != std::string::npos) ||
                   (task_owned && rest == "p_seg");
        case Scheme::decoder:
            return (backbone && starts(name, "dec")) || (task_owned && rest == "p_seg");
        case Scheme::full:
            return backbone || task_owned;
        case Scheme::full_fixed:
            return backbone || (task_owned && starts(rest, "linear."));
    }
    return false;
}

inline std::vector<bool> trainable_mask(const nn::ParamRegistry& reg, Scheme s,
                                        const std::vector<std::string>& tasks) {
    std::vector<bool> mask;
    mask.reserve(reg.params.size());
    for (const auto& [name, _] : reg.params) mask.push_back(name_trainable(s, name, tasks));
    return mask;
}

// Backbone plus prompt parameters in one registry (shared variables, not
// copies); the standard layout for checkpoints and optimizers.
inline nn::ParamRegistry combined_registry(PUNet& model, const head::PromptStore& store) {
    nn::ParamRegistry reg = model.registry();
    store.register_into(reg);
    return reg;
}

}  // namespace punet::net
