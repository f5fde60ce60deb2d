#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "punet/common.hpp"

namespace punet {

// Experiment configuration. One struct covers model geometry, the two
// training phases and the self-supervision knobs; presets give the reference
// scale and a fast-running toy scale. The JSON form round-trips bit exactly
// through normalize().
struct Config {
    int schema_version = 1;

    // model geometry
    int levels = 5;
    std::vector<int> channels = {32, 64, 128, 256, 384};
    int window = 8;  // cyclic shift is window/2
    int heads = 8;
    int bias_channels = 32;
    int tokens_per_class = 16;
    int patch_stride = 2;

    // views
    int fov_teacher = 256;
    int fov_student1 = 224;
    int fov_student2 = 160;

    // aggregation / self-supervision
    double tau_agg = 0.1;
    std::string agg_variant = "softmax";  // softmax | topk | mean
    int topk_k = 3;
    double tau_teacher = 0.033;
    double tau_student = 0.066;
    double fwhm = 128.0;
    int proto_reduction = 8;
    int cluster_iters = 3;
    double ema_momentum = 0.999;

    // losses
    double focal_gamma = 4.0;
    double loss_weight_seg = 1.0;
    double loss_weight_cpa = 0.01;

    // optimization
    double lr_net = 1e-4;
    double lr_prompt = 1e-3;
    double weight_decay = 1e-2;
    int epochs_p1 = 400;
    int epochs_p2 = 100;
    int samples_per_epoch = 5000;

    unsigned long long seed = 42;

    int shift() const { return window / 2; }

    static Config reference();
    static Config toy();
};

inline Config Config::reference() { return Config{}; }

inline Config Config::toy() {
    Config c;
    c.levels = 3;
    c.channels = {8, 16, 32};
    c.window = 4;
    c.heads = 4;
    c.bias_channels = 8;
    c.tokens_per_class = 4;
    c.fov_teacher = 64;
    c.fov_student1 = 64;
    c.fov_student2 = 32;
    c.fwhm = 32.0;
    c.ema_momentum = 0.99;
    c.lr_net = 3e-4;
    c.lr_prompt = 1e-3;
    c.epochs_p1 = 20;
    c.epochs_p2 = 5;
    c.samples_per_epoch = 800;
    return c;
}

namespace detail {
inline void config_require(bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw validation_error("config: " + key + " " + why);
}
}  // namespace detail

inline void validate(const Config& c) {
    using detail::config_require;
    config_require(c.schema_version == 1, "schema_version", "must be 1");
    config_require(c.levels >= 2, "levels", "must be at least 2");
    config_require(static_cast<int>(c.channels.size()) == c.levels, "channels",
                   "must list one entry per level");
    for (int ch : c.channels) config_require(ch >= 1, "channels", "entries must be positive");
    config_require(c.window >= 2, "window", "must be at least 2");
    config_require(c.window % 2 == 0, "window", "must be even (shift is window/2)");
    config_require(c.heads >= 1, "heads", "must be positive");
    for (int ch : c.channels)
        config_require(ch % c.heads == 0, "heads", "must divide every channel count");
    config_require(c.bias_channels >= 1, "bias_channels", "must be positive");
    config_require(c.tokens_per_class >= 1, "tokens_per_class", "must be positive");
    config_require(c.patch_stride >= 1, "patch_stride", "must be positive");

    auto check_fov = [&](int fov, const std::string& key) {
        config_require(fov >= 1, key, "must be positive");
        config_require(fov % (c.patch_stride * c.window) == 0, key,
                       "must be divisible by patch_stride*window");
    };
    check_fov(c.fov_teacher, "fov_teacher");
    check_fov(c.fov_student1, "fov_student1");
    check_fov(c.fov_student2, "fov_student2");
    config_require(c.fov_student1 <= c.fov_teacher, "fov_student1", "must not exceed fov_teacher");
    config_require(c.fov_student2 <= c.fov_student1, "fov_student2", "must not exceed fov_student1");

    config_require(c.tau_agg > 0.0, "tau_agg", "must be positive");
    config_require(c.agg_variant == "softmax" || c.agg_variant == "topk" || c.agg_variant == "mean",
                   "agg_variant", "must be one of softmax|topk|mean");
    config_require(c.topk_k >= 1 && c.topk_k <= c.tokens_per_class, "topk_k",
                   "must be in [1, tokens_per_class]");
    config_require(c.tau_teacher > 0.0, "tau_teacher", "must be positive");
    config_require(c.tau_student > 0.0, "tau_student", "must be positive");
    config_require(c.tau_teacher < c.tau_student, "tau_teacher",
                   "must be sharper (smaller) than tau_student");
    config_require(c.fwhm > 0.0, "fwhm", "must be positive");
    config_require(c.proto_reduction >= 1, "proto_reduction", "must be positive");
    config_require(c.cluster_iters >= 1, "cluster_iters", "must be positive");
    config_require(c.ema_momentum > 0.0 && c.ema_momentum < 1.0, "ema_momentum",
                   "must lie in (0, 1)");

    config_require(c.focal_gamma >= 0.0, "focal_gamma", "must be non-negative");
    config_require(c.loss_weight_seg >= 0.0, "loss_weight_seg", "must be non-negative");
    config_require(c.loss_weight_cpa >= 0.0, "loss_weight_cpa", "must be non-negative");
    config_require(c.lr_net > 0.0, "lr_net", "must be positive");
    config_require(c.lr_prompt > 0.0, "lr_prompt", "must be positive");
    config_require(c.weight_decay >= 0.0, "weight_decay", "must be non-negative");
    config_require(c.epochs_p1 >= 0, "epochs_p1", "must be non-negative");
    config_require(c.epochs_p2 >= 0, "epochs_p2", "must be non-negative");
    config_require(c.samples_per_epoch >= 1, "samples_per_epoch", "must be positive");
}

inline nlohmann::json to_json(const Config& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["levels"] = c.levels;
    j["channels"] = c.channels;
    j["window"] = c.window;
    j["heads"] = c.heads;
    j["bias_channels"] = c.bias_channels;
    j["tokens_per_class"] = c.tokens_per_class;
    j["patch_stride"] = c.patch_stride;
    j["fov_teacher"] = c.fov_teacher;
    j["fov_student1"] = c.fov_student1;
    j["fov_student2"] = c.fov_student2;
    j["tau_agg"] = c.tau_agg;
    j["agg_variant"] = c.agg_variant;
    j["topk_k"] = c.topk_k;
    j["tau_teacher"] = c.tau_teacher;
    j["tau_student"] = c.tau_student;
    j["fwhm"] = c.fwhm;
    j["proto_reduction"] = c.proto_reduction;
    j["cluster_iters"] = c.cluster_iters;
    j["ema_momentum"] = c.ema_momentum;
    j["focal_gamma"] = c.focal_gamma;
    j["loss_weight_seg"] = c.loss_weight_seg;
    j["loss_weight_cpa"] = c.loss_weight_cpa;
    j["lr_net"] = c.lr_net;
    j["lr_prompt"] = c.lr_prompt;
    j["weight_decay"] = c.weight_decay;
    j["epochs_p1"] = c.epochs_p1;
    j["epochs_p2"] = c.epochs_p2;
    j["samples_per_epoch"] = c.samples_per_epoch;
    j["seed"] = c.seed;
    return j;
}

inline Config config_from_json(const nlohmann::json& j) {
    Config def;
    nlohmann::json known = to_json(def);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key()))
            throw validation_error("config: unknown key " + it.key());

    Config c;
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const nlohmann::json::exception&) {
            throw validation_error(std::string("config: ") + key + " has the wrong type");
        }
    };
    get("schema_version", c.schema_version);
    get("levels", c.levels);
    get("channels", c.channels);
    get("window", c.window);
    get("heads", c.heads);
    get("bias_channels", c.bias_channels);
    get("tokens_per_class", c.tokens_per_class);
    get("patch_stride", c.patch_stride);
    get("fov_teacher", c.fov_teacher);
    get("fov_student1", c.fov_student1);
    get("fov_student2", c.fov_student2);
    get("tau_agg", c.tau_agg);
    get("agg_variant", c.agg_variant);
    get("topk_k", c.topk_k);
    get("tau_teacher", c.tau_teacher);
    get("tau_student", c.tau_student);
    get("fwhm", c.fwhm);
    get("proto_reduction", c.proto_reduction);
    get("cluster_iters", c.cluster_iters);
    get("ema_momentum", c.ema_momentum);
    get("focal_gamma", c.focal_gamma);
    get("loss_weight_seg", c.loss_weight_seg);
    get("loss_weight_cpa", c.loss_weight_cpa);
    get("lr_net", c.lr_net);
    get("lr_prompt", c.lr_prompt);
    get("weight_decay", c.weight_decay);
    get("epochs_p1", c.epochs_p1);
    get("epochs_p2", c.epochs_p2);
    get("samples_per_epoch", c.samples_per_epoch);
    get("seed", c.seed);
    validate(c);
    return c;
}

// Parse + validate + canonical re-serialization (sorted keys, round-trip
// exact numbers). normalize is idempotent.
inline std::string normalize_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("config: parse failure: ") + e.what());
    }
    Config c = config_from_json(j);
    return to_json(c).dump(2);
}

inline std::string config_hash(const Config& c) {
    return fnv1a64_hex(to_json(c).dump(2));
}

}  // namespace punet
