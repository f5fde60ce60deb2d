#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "punet/checkpoint.hpp"
#include "punet/config.hpp"
#include "punet/data.hpp"
#include "punet/gradcheck.hpp"
#include "punet/metrics.hpp"
#include "punet/optim.hpp"
#include "punet/punet.hpp"
#include "punet/selfsup.hpp"
#include "punet/supervise.hpp"

namespace punet::hn {

inline constexpr int kBatch = 8;
// Adaptation runs a one-cycle schedule; its peak sits above the flat
// pretraining rate so the short phase still moves its few parameters.
inline constexpr double kP2PeakFactor = 5.0;
inline constexpr const char* kCodeVersion = "punet-0.1.0";

enum class Phase { p1, p2 };

// Declarative description of one training phase. Phase 1 pretrains the
// backbone (self-supervision and/or group-A segmentation); phase 2 adapts a
// pretrained network to group B under a parameter freeze scheme.
struct PhasePlan {
    Phase phase = Phase::p1;
    std::string variant = "joint";  // phase 1: joint | seg | self | random
    bool use_cpa = true;
    bool use_focal = true;
    bool prompt_insertion = true;
    std::string group = "A";
    net::Scheme scheme = net::Scheme::full;  // phase 2 freeze scheme
    int epochs = 0;
    bool one_cycle = false;
};

inline void validate(const PhasePlan& p) {
    if (p.epochs < 0) throw validation_error("plan: epochs must be non-negative");
    if (p.phase == Phase::p1) {
        if (p.use_focal && !p.prompt_insertion)
            throw validation_error("plan: segmentation loss in phase 1 requires prompt insertion");
        if (!p.use_cpa && !p.use_focal && p.epochs > 0)
            throw validation_error("plan: phase 1 with steps needs at least one active loss");
    } else {
        if (p.use_cpa) throw validation_error("plan: phase 2 trains with the focal loss only");
        if (!p.use_focal) throw validation_error("plan: phase 2 requires the focal loss");
    }
}

inline PhasePlan p1_plan(const std::string& variant, const Config& cfg) {
    PhasePlan p;
    p.phase = Phase::p1;
    p.variant = variant;
    p.group = "A";
    p.epochs = cfg.epochs_p1;
    if (variant == "joint") {
        p.use_cpa = true, p.use_focal = true, p.prompt_insertion = true;
    } else if (variant == "seg") {
        p.use_cpa = false, p.use_focal = true, p.prompt_insertion = true;
    } else if (variant == "self") {
        p.use_cpa = true, p.use_focal = false, p.prompt_insertion = false;
    } else if (variant == "random") {
        p.use_cpa = false, p.use_focal = false, p.prompt_insertion = false;
        p.epochs = 0;
    } else {
        throw validation_error("plan: unknown phase 1 variant " + variant);
    }
    validate(p);
    return p;
}

inline PhasePlan p2_plan(net::Scheme scheme, const Config& cfg) {
    PhasePlan p;
    p.phase = Phase::p2;
    p.variant = net::scheme_name(scheme);
    p.use_cpa = false;
    p.use_focal = true;
    p.prompt_insertion = net::scheme_traits(scheme).head_mode == head::HeadMode::prompts;
    p.group = "B";
    p.scheme = scheme;
    p.epochs = cfg.epochs_p2;
    p.one_cycle = true;
    validate(p);
    return p;
}

// Student/teacher pair plus the prompt store. Both networks start from the
// same derived weight stream, so the teacher begins as an exact copy.
struct Workspace {
    Config cfg;
    net::PUNet student;
    net::PUNet teacher;
    head::PromptStore store;

    Workspace(Config c, const Rng& rng)
        : cfg(std::move(c)),
          student(cfg, rng.stream("net")),
          teacher(cfg, rng.stream("net")),
          store(student.head_geometry()) {}
};

inline std::string task_name(const std::string& group) { return "group" + group; }

inline head::PromptSet& add_group_task(Workspace& ws, const data::Dataset& ds,
                                       const std::string& group, head::HeadMode mode) {
    std::string task = task_name(group);
    std::vector<std::string> classes = {"background"};
    for (int id : ds.class_ids(group))
        classes.push_back(ds.spec.classes[static_cast<std::size_t>(id - 1)].name);
    if (classes.size() < 2) throw validation_error("harness: class group " + group + " is empty");
    return ws.store.create_task(task, std::move(classes), ws.cfg.tokens_per_class,
                                Rng(ws.cfg.seed).stream("prompt." + task), mode);
}

// Student, prompt store and teacher (under a name prefix) in one registry;
// the layout checkpoints use.
inline nn::ParamRegistry full_registry(Workspace& ws) {
    nn::ParamRegistry reg = net::combined_registry(ws.student, ws.store);
    for (const auto& [n, v] : ws.teacher.registry().params) reg.add("teacher." + n, v);
    for (const auto& [n, t] : ws.teacher.registry().buffers) reg.add_buffer("teacher." + n, t);
    return reg;
}

struct StepLog {
    int step = 0;
    double total = 0.0, seg = 0.0, cpa = 0.0, lr = 0.0;
};

namespace detail {

struct Batch {
    Tensor images, grid, labels;
    std::vector<head::Selection> sel;
};

inline int slot_of(const std::vector<int>& group_ids, int class_id) {
    for (std::size_t i = 0; i < group_ids.size(); ++i)
        if (group_ids[i] == class_id) return static_cast<int>(i) + 1;
    return 0;
}

// Weakly augmented training crops. Binary mode draws one class per element
// and selects {background, that class}; multiclass selects the whole group
// and remaps label ids to task slots.
inline Batch batch_from(const std::vector<const data::Slice*>& slices, const head::PromptSet* set,
                        const std::vector<int>& group_ids, int fov, bool binary, Rng& rng) {
    int B = static_cast<int>(slices.size());
    Batch b;
    b.images = Tensor({B, fov, fov});
    b.grid = Tensor({B, fov, fov, 2});
    b.labels = Tensor({B, fov, fov});
    std::int64_t n = static_cast<std::int64_t>(fov) * fov;
    for (int e = 0; e < B; ++e) {
        data::View v = data::augment_weak(*slices[static_cast<std::size_t>(e)], fov, rng);
        std::copy(v.image.data.begin(), v.image.data.end(), b.images.data.begin() + e * n);
        std::copy(v.grid.data.begin(), v.grid.data.end(), b.grid.data.begin() + e * n * 2);
        head::Selection sel;
        sel.set = set;
        if (binary) {
            int ci = group_ids[rng.randint(group_ids.size())];
            for (std::int64_t i = 0; i < n; ++i)
                b.labels.data[static_cast<std::size_t>(e * n + i)] =
                    std::lround(v.mask.data[static_cast<std::size_t>(i)]) == ci ? 1.0 : 0.0;
            sel.classes = {0, slot_of(group_ids, ci)};
        } else {
            for (std::int64_t i = 0; i < n; ++i)
                b.labels.data[static_cast<std::size_t>(e * n + i)] = slot_of(
                    group_ids,
                    static_cast<int>(std::lround(v.mask.data[static_cast<std::size_t>(i)])));
            sel.classes.resize(group_ids.size() + 1);
            for (std::size_t m = 0; m < sel.classes.size(); ++m)
                sel.classes[m] = static_cast<int>(m);
        }
        b.sel.push_back(std::move(sel));
    }
    return b;
}

// The teacher tracks student parameters by EMA; its normalization statistics
// are mirrored directly so eval-mode teacher forwards see current stats.
inline void sync_buffers(nn::ParamRegistry& teacher, const nn::ParamRegistry& student) {
    for (std::size_t i = 0; i < teacher.buffers.size(); ++i) {
        if (teacher.buffers[i].first != student.buffers[i].first)
            throw validation_error("harness: teacher/student buffer layout mismatch");
        *teacher.buffers[i].second = *student.buffers[i].second;
    }
}

inline std::uint64_t frozen_checksum(const nn::ParamRegistry& reg, const std::vector<bool>& mask) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < reg.params.size(); ++i) {
        if (mask[i]) continue;
        const Tensor& t = reg.params[i].second->value;
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
}

inline void write_diag(const std::string& out_prefix, const char* phase, int step, double seg,
                       double cpa, double lr, const std::vector<StepLog>& logs) {
    if (out_prefix.empty()) return;
    nlohmann::json j;
    j["phase"] = phase;
    j["step"] = step;
    j["seg"] = seg;
    j["cpa"] = cpa;
    j["lr"] = lr;
    auto recent = nlohmann::json::array();
    std::size_t from = logs.size() > 5 ? logs.size() - 5 : 0;
    for (std::size_t i = from; i < logs.size(); ++i)
        recent.push_back({{"step", logs[i].step}, {"total", logs[i].total}});
    j["recent"] = recent;
    std::ofstream f(out_prefix + ".diag.json");
    f << j.dump(2) << "\n";
}

inline long long steps_for(int epochs, const Config& cfg) {
    return epochs <= 0 ? 0 : static_cast<long long>(epochs) * cfg.samples_per_epoch / kBatch;
}

// Task sets present in a checkpoint manifest, inferred from parameter names.
inline std::map<std::string, head::HeadMode> checkpoint_tasks(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("harness: missing manifest " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("harness: bad manifest: ") + e.what());
    }
    std::map<std::string, head::HeadMode> out;
    for (const auto& entry : manifest.at("params")) {
        std::string name = entry.at("name").get<std::string>();
        if (name.rfind("prompt.", 0) != 0) continue;
        std::string rest = name.substr(7);
        auto dot = rest.find('.');
        if (dot == std::string::npos) continue;
        std::string task = rest.substr(0, dot);
        bool linear = rest.compare(dot + 1, 7, "linear.") == 0;
        auto it = out.find(task);
        if (it == out.end())
            out.emplace(task, linear ? head::HeadMode::linear : head::HeadMode::prompts);
        else if (linear)
            it->second = head::HeadMode::linear;
    }
    return out;
}

inline bool checkpoint_has_adapters(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("harness: missing manifest " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("harness: bad manifest: ") + e.what());
    }
    for (const auto& entry : manifest.at("params"))
        if (entry.at("name").get<std::string>().find(".adapter.") != std::string::npos) return true;
    return false;
}

}  // namespace detail

struct P1Result {
    std::vector<StepLog> logs;
    std::string task;  // empty when no prompts were inserted
};

// Phase 1: student trained on weighted focal + CPA losses, teacher updated by
// EMA every step. Writes <out_prefix>.json/.bin (config, both networks, the
// prompt store) when a prefix is given; a non-finite loss dumps a diagnostics
// snapshot next to it and aborts.
inline P1Result pretrain_p1(Workspace& ws, const data::Dataset& ds, const PhasePlan& plan,
                            const std::string& out_prefix = "") {
    validate(plan);
    if (plan.phase != Phase::p1) throw validation_error("pretrain: plan is not phase 1");
    const Config& cfg = ws.cfg;
    P1Result res;

    std::vector<int> group_ids = ds.class_ids(plan.group);
    const head::PromptSet* set = nullptr;
    if (plan.prompt_insertion) {
        if (group_ids.empty())
            throw validation_error("pretrain: class group " + plan.group + " is empty");
        res.task = task_name(plan.group);
        if (!ws.store.has_task(res.task))
            add_group_task(ws, ds, plan.group, head::HeadMode::prompts);
        set = &ws.store.task(res.task);
    }

    auto train = ds.split(data::Split::train);
    if (train.empty()) throw validation_error("pretrain: empty training split");

    nn::ParamRegistry reg = net::combined_registry(ws.student, ws.store);
    std::vector<std::string> tasks;
    if (!res.task.empty()) tasks.push_back(res.task);
    auto mask = net::trainable_mask(reg, net::Scheme::full, tasks);
    opt::AdamW optim(opt::entries_for(reg, mask, cfg.lr_prompt / cfg.lr_net), cfg.lr_net,
                     cfg.weight_decay);

    long long steps = detail::steps_for(plan.epochs, cfg);
    Rng root(cfg.seed);
    net::ForwardOptions student_opt{true, true, true};
    net::ForwardOptions teacher_opt{false, false, false};

    for (long long step = 0; step < steps; ++step) {
        Rng srng = root.stream("p1.step", static_cast<std::uint64_t>(step));
        optim.zero_grad();

        std::vector<const data::Slice*> batch(kBatch);
        for (auto& s : batch) s = train[srng.randint(train.size())];

        double seg_val = 0.0, cpa_val = 0.0;
        ad::Var total;
        if (plan.use_focal) {
            detail::Batch b =
                detail::batch_from(batch, set, group_ids, cfg.fov_teacher, true, srng);
            auto out = ws.student.segment(b.images, b.grid, b.sel, student_opt);
            auto alpha = sup::class_weights({b.labels}, 2);
            ad::Var seg = sup::focal_loss(out.scores, b.labels, alpha, cfg.focal_gamma);
            seg_val = seg->value.data[0];
            total = ad::scale(seg, cfg.loss_weight_seg);
        }
        if (plan.use_cpa) {
            ad::Var acc;
            for (const data::Slice* s : batch) {
                ss::ViewSet vs = ss::make_views(*s, cfg, srng);
                win::FeatureMap tf;
                {
                    ad::NoGradGuard ng;
                    tf = ws.teacher.features(
                        vs.teacher.image.reshaped({1, cfg.fov_teacher, cfg.fov_teacher}),
                        vs.teacher.grid.reshaped({1, cfg.fov_teacher, cfg.fov_teacher, 2}), {},
                        teacher_opt);
                }
                std::vector<win::FeatureMap> sf;
                for (const data::View& v : vs.students) {
                    int f = v.image.shape[0];
                    sf.push_back(ws.student.features(v.image.reshaped({1, f, f}),
                                                     v.grid.reshaped({1, f, f, 2}), {},
                                                     student_opt));
                }
                ss::CpaParts parts = ss::cpa_loss(tf, sf, cfg, srng);
                acc = acc ? ad::add(acc, parts.loss) : parts.loss;
            }
            ad::Var cpa = ad::scale(acc, 1.0 / kBatch);
            cpa_val = cpa->value.data[0];
            ad::Var weighted = ad::scale(cpa, cfg.loss_weight_cpa);
            total = total ? ad::add(total, weighted) : weighted;
        }

        double tot_val = total->value.data[0];
        if (!std::isfinite(tot_val)) {
            detail::write_diag(out_prefix, "p1", static_cast<int>(step), seg_val, cpa_val,
                               optim.lr(), res.logs);
            throw numeric_error("pretrain: non-finite loss at step " + std::to_string(step));
        }
        ad::backward(total);
        optim.step();
        ss::ema_update(ws.teacher.registry(), ws.student.registry(), cfg.ema_momentum);
        detail::sync_buffers(ws.teacher.registry(), ws.student.registry());
        res.logs.push_back({static_cast<int>(step), tot_val, seg_val, cpa_val, optim.lr()});
    }

    if (!out_prefix.empty()) {
        nn::ParamRegistry full = full_registry(ws);
        ckpt::save(out_prefix, cfg, full);
    }
    return res;
}

struct P2Options {
    std::string base_checkpoint;  // empty: adapt the workspace as it stands
    std::string out_prefix;
    int budget_subjects = 0;  // 0: every training subject
    unsigned long long seed = 0;  // 0: cfg.seed
};

struct P2Result {
    std::vector<StepLog> logs;
    std::string task;
    std::vector<std::string> trained;
    std::size_t frozen_count = 0;
};

// Phase 2: focal-only adaptation of group B under a freeze scheme with a
// one-cycle schedule. Frozen parameters are checksummed before and after; any
// drift is an internal error. Group-A annotations are never read.
inline P2Result adapt_p2(Workspace& ws, const data::Dataset& ds, const PhasePlan& plan,
                         const P2Options& po = {}) {
    validate(plan);
    if (plan.phase != Phase::p2) throw validation_error("adapt: plan is not phase 2");
    const Config& cfg = ws.cfg;
    auto traits = net::scheme_traits(plan.scheme);
    P2Result res;

    if (traits.needs_adapters && !ws.student.has_adapters()) ws.student.add_adapters();

    // Recreate every task stored in the base checkpoint, then the target one,
    // so the manifest maps onto the registry exactly.
    if (!po.base_checkpoint.empty())
        for (const auto& [task, mode] : detail::checkpoint_tasks(po.base_checkpoint)) {
            if (ws.store.has_task(task)) continue;
            if (task.rfind("group", 0) != 0)
                throw validation_error("adapt: checkpoint holds unrecognized task " + task);
            add_group_task(ws, ds, task.substr(5), mode);
        }
    res.task = task_name(plan.group);
    if (!ws.store.has_task(res.task)) add_group_task(ws, ds, plan.group, traits.head_mode);
    const head::PromptSet* set = &ws.store.task(res.task);

    if (!po.base_checkpoint.empty()) {
        nn::ParamRegistry full = full_registry(ws);
        ckpt::load(po.base_checkpoint, full, &cfg, true);
    }

    std::vector<int> group_ids = ds.class_ids(plan.group);
    if (group_ids.empty()) throw validation_error("adapt: class group " + plan.group + " is empty");

    auto train = ds.split(data::Split::train);
    if (po.budget_subjects > 0) {
        std::vector<int> subjects;
        for (const data::Slice* s : train)
            if (std::find(subjects.begin(), subjects.end(), s->subject) == subjects.end())
                subjects.push_back(s->subject);
        std::sort(subjects.begin(), subjects.end());
        if (static_cast<std::size_t>(po.budget_subjects) < subjects.size())
            subjects.resize(static_cast<std::size_t>(po.budget_subjects));
        std::vector<const data::Slice*> kept;
        for (const data::Slice* s : train)
            if (std::find(subjects.begin(), subjects.end(), s->subject) != subjects.end())
                kept.push_back(s);
        train = std::move(kept);
    }
    if (train.empty()) throw validation_error("adapt: empty training split");

    nn::ParamRegistry reg = net::combined_registry(ws.student, ws.store);
    auto mask = net::trainable_mask(reg, plan.scheme, {res.task});
    for (std::size_t i = 0; i < reg.params.size(); ++i)
        if (mask[i])
            res.trained.push_back(reg.params[i].first);
        else
            ++res.frozen_count;
    if (res.trained.empty()) throw validation_error("adapt: scheme trains no parameters");

    net::Scheme scheme = plan.scheme;
    std::string task = res.task;
    ws.student.set_bn_frozen(
        [scheme, task](const std::string& name) { return net::name_trainable(scheme, name, {task}); });

    std::uint64_t before = detail::frozen_checksum(reg, mask);

    opt::AdamW optim(opt::entries_for(reg, mask, cfg.lr_prompt / cfg.lr_net), cfg.lr_net, 0.0);
    long long steps = detail::steps_for(plan.epochs, cfg);
    double peak = kP2PeakFactor * cfg.lr_net;
    Rng root(po.seed ? po.seed : cfg.seed);
    net::ForwardOptions fopt{true, traits.deep_prompts, traits.prompt_bias};
    int n_slots = static_cast<int>(group_ids.size()) + 1;

    for (long long step = 0; step < steps; ++step) {
        Rng srng = root.stream("p2.step", static_cast<std::uint64_t>(step));
        if (plan.one_cycle)
            optim.set_lr(opt::one_cycle_lr(peak, static_cast<int>(step), static_cast<int>(steps)));
        optim.zero_grad();

        std::vector<const data::Slice*> batch(kBatch);
        for (auto& s : batch) s = train[srng.randint(train.size())];
        detail::Batch b = detail::batch_from(batch, set, group_ids, cfg.fov_teacher, false, srng);
        auto out = ws.student.segment(b.images, b.grid, b.sel, fopt);
        auto alpha = sup::class_weights({b.labels}, n_slots);
        ad::Var loss = sup::focal_loss(out.scores, b.labels, alpha, cfg.focal_gamma);

        double val = loss->value.data[0];
        if (!std::isfinite(val)) {
            detail::write_diag(po.out_prefix, "p2", static_cast<int>(step), val, 0.0, optim.lr(),
                               res.logs);
            throw numeric_error("adapt: non-finite loss at step " + std::to_string(step));
        }
        ad::backward(loss);
        optim.step();
        res.logs.push_back({static_cast<int>(step), val, val, 0.0, optim.lr()});
    }

    if (detail::frozen_checksum(reg, mask) != before)
        throw numeric_error("adapt: frozen parameters drifted");

    if (!po.out_prefix.empty()) {
        nn::ParamRegistry full = full_registry(ws);
        ckpt::save(po.out_prefix, cfg, full);
    }
    return res;
}

// Recreate the tasks and adapters a checkpoint expects, then load it exactly.
// The workspace must have been built from the checkpoint's own config.
inline void restore(Workspace& ws, const std::string& prefix, const data::Dataset& ds) {
    for (const auto& [task, mode] : detail::checkpoint_tasks(prefix)) {
        if (ws.store.has_task(task)) continue;
        if (task.rfind("group", 0) != 0)
            throw validation_error("restore: checkpoint holds unrecognized task " + task);
        add_group_task(ws, ds, task.substr(5), mode);
    }
    if (detail::checkpoint_has_adapters(prefix) && !ws.student.has_adapters())
        ws.student.add_adapters();
    nn::ParamRegistry full = full_registry(ws);
    ckpt::load(prefix, full, &ws.cfg);
}

// Test-split evaluation: argmax segmentation of every full slice, slices
// stacked per subject into volumes, DSC/ASSD per subject and class.
inline met::EvalReport evaluate(Workspace& ws, const std::string& task, const data::Dataset& ds,
                                data::Split split, net::Scheme scheme) {
    const head::PromptSet& set = ws.store.task(task);
    auto traits = net::scheme_traits(scheme);
    net::ForwardOptions fopt{false, traits.deep_prompts, traits.prompt_bias};

    std::vector<int> ids;  // dataset class id per task slot 1..n
    for (std::size_t i = 1; i < set.class_names.size(); ++i) {
        int id = 0;
        for (std::size_t c = 0; c < ds.spec.classes.size(); ++c)
            if (ds.spec.classes[c].name == set.class_names[i]) id = static_cast<int>(c) + 1;
        if (id == 0) throw validation_error("evaluate: unknown class " + set.class_names[i]);
        ids.push_back(id);
    }

    head::Selection sel;
    sel.set = &set;
    sel.classes.resize(ids.size() + 1);
    for (std::size_t m = 0; m < sel.classes.size(); ++m) sel.classes[m] = static_cast<int>(m);

    std::map<int, std::vector<const data::Slice*>> by_subject;
    for (const data::Slice* s : ds.split(split)) by_subject[s->subject].push_back(s);

    met::EvalReport report;
    report.scheme = net::scheme_name(scheme);
    report.config = config_hash(ws.cfg);

    ad::NoGradGuard ng;
    for (auto& [subject, slices] : by_subject) {
        std::sort(slices.begin(), slices.end(),
                  [](const data::Slice* a, const data::Slice* b) { return a->index < b->index; });
        std::vector<Tensor> pred, gt;
        for (const data::Slice* s : slices) {
            int H = s->image.shape[0], W = s->image.shape[1];
            auto out = ws.student.segment(s->image.reshaped({1, H, W}),
                                          win::make_grid(1, H, W, 1.0), {sel}, fopt);
            const Tensor& sc = out.scores->value;
            int M = sc.shape[3];
            Tensor p({H, W});
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    std::int64_t at = (static_cast<std::int64_t>(i) * W + j) * M;
                    int best = 0;
                    for (int m = 1; m < M; ++m)
                        if (sc.data[static_cast<std::size_t>(at + m)] >
                            sc.data[static_cast<std::size_t>(at + best)])
                            best = m;
                    p.data[static_cast<std::size_t>(i) * W + j] = best;
                }
            pred.push_back(std::move(p));
            Tensor g(s->mask.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                g.data[i] = detail::slot_of(ids, static_cast<int>(std::lround(s->mask.data[i])));
            gt.push_back(std::move(g));
        }
        Tensor pred3 = met::stack_slices(pred), gt3 = met::stack_slices(gt);
        for (std::size_t m = 0; m < ids.size(); ++m) {
            int slot = static_cast<int>(m) + 1;
            Tensor pb = met::binarize(pred3, slot), gb = met::binarize(gt3, slot);
            met::ScoreRow row;
            row.subject = "s" + std::to_string(subject);
            row.class_name = set.class_names[m + 1];
            row.dsc_pct = 100.0 * met::dsc(gb, pb);
            auto assd = met::assd(gb, pb, 1.0);
            row.assd_valid = assd.has_value();
            row.assd = assd.value_or(0.0);
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

struct AblationCell {
    std::string scheme;
    int budget = 0;  // 0: whole training split
    met::EvalReport report;
};

inline std::string budget_label(int b) { return b > 0 ? std::to_string(b) : "all"; }

// One phase-2 run per (scheme, budget) cell from a shared base checkpoint,
// each on a pinned seed stream; per-cell CSVs plus a combined one.
inline std::vector<AblationCell> ablate(const Config& cfg, const data::Dataset& ds,
                                        const std::string& base_checkpoint,
                                        const std::vector<std::string>& schemes,
                                        const std::vector<int>& budgets,
                                        const std::string& out_dir, unsigned long long seed) {
    std::vector<net::Scheme> parsed;
    for (const auto& s : schemes) parsed.push_back(net::scheme_from(s));
    if (parsed.empty() || budgets.empty()) throw validation_error("ablate: empty grid");
    std::filesystem::create_directories(out_dir);

    std::vector<AblationCell> cells;
    Rng root(seed);
    for (std::size_t i = 0; i < parsed.size(); ++i)
        for (int budget : budgets) {
            std::string label = schemes[i] + "_" + budget_label(budget);
            Rng cell = root.stream("ablate." + label);
            Workspace ws(cfg, cell.stream("init"));
            PhasePlan plan = p2_plan(parsed[i], cfg);
            P2Options po;
            po.base_checkpoint = base_checkpoint;
            po.budget_subjects = budget;
            po.seed = cell.stream("train").next_u64();
            adapt_p2(ws, ds, plan, po);
            AblationCell c{schemes[i], budget,
                           evaluate(ws, task_name("B"), ds, data::Split::test, parsed[i])};
            met::write_csv(out_dir + "/eval_" + label + ".csv", c.report);
            cells.push_back(std::move(c));
        }

    std::ofstream f(out_dir + "/ablation.csv");
    if (!f) throw io_error("ablate: cannot write " + out_dir + "/ablation.csv");
    f << "scheme,budget,subject,class,dsc_pct,assd,assd_valid\n";
    char buf[64];
    for (const auto& c : cells)
        for (const auto& r : c.report.rows) {
            f << c.scheme << "," << budget_label(c.budget) << "," << r.subject << ","
              << r.class_name << ",";
            std::snprintf(buf, sizeof(buf), "%.6f", r.dsc_pct);
            f << buf << ",";
            if (r.assd_valid) {
                std::snprintf(buf, sizeof(buf), "%.6f", r.assd);
                f << buf;
            }
            f << "," << (r.assd_valid ? 1 : 0) << "\n";
        }
    return cells;
}

// Provenance record for a CLI run: configuration and code identity plus the
// seed and produced files. Deliberately timestamp-free so reruns match.
inline void write_run_json(const std::string& path, const std::string& command, const Config& cfg,
                           unsigned long long seed, const std::vector<std::string>& outputs) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["code_version"] = kCodeVersion;
    j["code_hash"] = fnv1a64_hex(std::string(kCodeVersion));
    j["seed"] = seed;
    j["outputs"] = outputs;
    std::ofstream f(path);
    if (!f) throw io_error("run record: cannot write " + path);
    f << j.dump(2) << "\n";
}

}  // namespace punet::hn
