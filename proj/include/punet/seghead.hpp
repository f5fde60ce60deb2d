#pragma once

#include <map>
#include <optional>

#include "punet/pswin.hpp"

namespace punet::head {

using ad::Var;

// Widths a prompt set must match: one channel count per token bank (two
// banks per block, in block order), the bias embedding width and the
// decoder output width.
struct HeadGeometry {
    std::vector<int> bank_channels;
    int bias_channels = 0;
    int out_channels = 0;
};

enum class HeadMode { prompts, linear };

// Everything one task owns. Token bank rows are class-major: row m*T + t is
// token t of class m, and e_prompt / p_seg rows align with that order.
// Linear-head tasks (for the frozen-backbone baselines) own a single
// out_channels -> M projection instead.
struct PromptSet {
    std::string task;
    std::vector<std::string> class_names;
    int tokens_per_class = 0;
    HeadMode mode = HeadMode::prompts;

    std::vector<Var> banks;  // per bank: (M*T, bank_channels[i])
    Var e_prompt;            // (M*T, bias_channels)
    Var p_seg;               // (M*T, out_channels)
    nn::Linear linear_head;

    int n_classes() const { return static_cast<int>(class_names.size()); }
    int rows() const { return n_classes() * tokens_per_class; }
};

// A task selection for one forward pass: which classes participate and in
// which score-channel order.
struct Selection {
    const PromptSet* set = nullptr;
    std::vector<int> classes;

    bool linear() const { return set && set->mode == HeadMode::linear; }
    int n_classes() const { return static_cast<int>(classes.size()); }

    std::vector<std::int64_t> row_index() const {
        std::vector<std::int64_t> idx;
        idx.reserve(static_cast<std::size_t>(classes.size()) * set->tokens_per_class);
        for (int m : classes)
            for (int t = 0; t < set->tokens_per_class; ++t)
                idx.push_back(static_cast<std::int64_t>(m) * set->tokens_per_class + t);
        return idx;
    }

    bool full() const {
        if (static_cast<int>(classes.size()) != set->n_classes()) return false;
        for (int m = 0; m < set->n_classes(); ++m)
            if (classes[static_cast<std::size_t>(m)] != m) return false;
        return true;
    }

    att::PromptTokens tokens_for_bank(std::size_t bank) const {
        if (!set || set->mode != HeadMode::prompts) return {};
        if (bank >= set->banks.size()) throw validation_error("selection: bank index out of range");
        if (full()) return {set->banks[bank], set->e_prompt};
        auto idx = row_index();
        return {ad::gather_rows(set->banks[bank], idx), ad::gather_rows(set->e_prompt, idx)};
    }

    Var p_seg_rows() const {
        if (!set || set->mode != HeadMode::prompts)
            throw validation_error("selection: task has no segmentation prompts");
        return full() ? set->p_seg : ad::gather_rows(set->p_seg, row_index());
    }
};

class PromptStore {
public:
    explicit PromptStore(HeadGeometry geometry) : geom_(std::move(geometry)) {}

    const HeadGeometry& geometry() const { return geom_; }

    PromptSet& create_task(const std::string& name, std::vector<std::string> class_names,
                           int tokens_per_class, Rng rng, HeadMode mode = HeadMode::prompts) {
        if (tasks_.count(name)) throw validation_error("prompt store: task already exists: " + name);
        if (class_names.empty()) throw validation_error("prompt store: task needs classes");
        if (tokens_per_class < 1) throw validation_error("prompt store: tokens_per_class must be positive");
        PromptSet set;
        set.task = name;
        set.class_names = std::move(class_names);
        set.tokens_per_class = tokens_per_class;
        set.mode = mode;
        int rows = set.rows();
        if (mode == HeadMode::prompts) {
            for (int c : geom_.bank_channels)
                set.banks.push_back(ad::param(Tensor::randn({rows, c}, rng, 0.02)));
            set.e_prompt = ad::param(Tensor::randn({rows, geom_.bias_channels}, rng, 0.02));
            set.p_seg = ad::param(Tensor::randn({rows, geom_.out_channels}, rng, 0.02));
        } else {
            set.linear_head = nn::Linear::make(geom_.out_channels, set.n_classes(), rng, 0.02);
        }
        return tasks_.emplace(name, std::move(set)).first->second;
    }

    const PromptSet& task(const std::string& name) const {
        auto it = tasks_.find(name);
        if (it == tasks_.end()) throw validation_error("prompt store: unknown task " + name);
        return it->second;
    }

    bool has_task(const std::string& name) const { return tasks_.count(name) > 0; }

    std::vector<std::string> task_names() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : tasks_) out.push_back(k);
        return out;
    }

    Selection select(const std::string& name,
                     std::optional<std::vector<int>> class_subset = std::nullopt) const {
        const PromptSet& set = task(name);
        Selection sel;
        sel.set = &set;
        if (class_subset) {
            std::vector<bool> seen(static_cast<std::size_t>(set.n_classes()), false);
            for (int m : *class_subset) {
                if (m < 0 || m >= set.n_classes())
                    throw validation_error("prompt store: class index out of range for task " + name);
                if (seen[static_cast<std::size_t>(m)])
                    throw validation_error("prompt store: duplicate class in selection");
                seen[static_cast<std::size_t>(m)] = true;
            }
            sel.classes = *class_subset;
        } else {
            sel.classes.resize(static_cast<std::size_t>(set.n_classes()));
            for (int m = 0; m < set.n_classes(); ++m) sel.classes[static_cast<std::size_t>(m)] = m;
        }
        return sel;
    }

    void register_into(nn::ParamRegistry& reg) const {
        for (const auto& [name, set] : tasks_) {
            std::string prefix = "prompt." + name;
            if (set.mode == HeadMode::prompts) {
                for (std::size_t i = 0; i < set.banks.size(); ++i) {
                    char buf[16];
                    std::snprintf(buf, sizeof buf, ".bank%02zu", i);
                    reg.add(prefix + buf, set.banks[i]);
                }
                reg.add(prefix + ".e_prompt", set.e_prompt);
                reg.add(prefix + ".p_seg", set.p_seg);
            } else {
                set.linear_head.register_into(reg, prefix + ".linear");
            }
        }
    }

private:
    HeadGeometry geom_;
    std::map<std::string, PromptSet> tasks_;
};

// Cosine similarity between every feature cell and every selected prompt:
// F (R, C) x p_seg rows (M*T, C) -> (R, M, T).
inline Var token_similarity(const Var& features, const Var& p_seg_rows, int n_classes,
                            int tokens_per_class) {
    auto cos = nn::cosine_pairs(features, p_seg_rows);
    int R = cos->value.shape[0];
    if (cos->value.shape[1] != n_classes * tokens_per_class)
        throw validation_error("token_similarity: selection size mismatch");
    return ad::reshape(cos, {R, n_classes, tokens_per_class});
}

enum class AggVariant { softmax, topk, mean };

inline AggVariant agg_variant_from(const std::string& s) {
    if (s == "softmax") return AggVariant::softmax;
    if (s == "topk") return AggVariant::topk;
    if (s == "mean") return AggVariant::mean;
    throw validation_error("aggregate: unknown variant " + s);
}

// Per-class reduction over token similarities, (R, M, T) -> (R, M).
// softmax: temperature-weighted average whose weights are treated as
// constants in backward (the gradient of S w.r.t. each similarity is exactly
// its weight). topk: plain mean of the k largest similarities. mean: plain
// mean. T = 1 reduces to the identity for every variant.
inline Var aggregate_scores(const Var& sim, AggVariant variant, double tau_agg, int topk_k) {
    if (sim->value.ndim() != 3) throw validation_error("aggregate: need (R,M,T)");
    int R = sim->value.shape[0], M = sim->value.shape[1], T = sim->value.shape[2];
    auto flat = ad::reshape(sim, {R * M, T});
    Var out;
    switch (variant) {
        case AggVariant::softmax: {
            auto w = ad::detach(ad::softmax_lastdim(ad::scale(flat, 1.0 / tau_agg)));
            out = ad::sum_last(ad::mul(flat, w));
            break;
        }
        case AggVariant::topk: {
            if (topk_k < 1 || topk_k > T) throw validation_error("aggregate: topk_k out of range");
            std::vector<std::vector<int>> idx(static_cast<std::size_t>(R) * M);
            for (std::int64_t r = 0; r < static_cast<std::int64_t>(R) * M; ++r) {
                std::vector<int> order(static_cast<std::size_t>(T));
                for (int t = 0; t < T; ++t) order[static_cast<std::size_t>(t)] = t;
                const double* row = flat->value.data.data() + r * T;
                std::partial_sort(order.begin(), order.begin() + topk_k, order.end(),
                                  [&](int a, int b) { return row[a] > row[b]; });
                order.resize(static_cast<std::size_t>(topk_k));
                std::sort(order.begin(), order.end());  // canonical order: k = T sums like mean
                idx[static_cast<std::size_t>(r)] = std::move(order);
            }
            out = ad::mean_last(ad::row_gather_cols(flat, std::move(idx)));
            break;
        }
        case AggVariant::mean:
            out = ad::mean_last(flat);
            break;
    }
    return ad::reshape(out, {R, M});
}

}  // namespace punet::head
