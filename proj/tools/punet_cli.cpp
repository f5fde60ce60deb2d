// Command-line front end: dataset generation, the two training phases,
// evaluation, scheme ablations, similarity-map export, and the gradient
// checker. Every run writes a run.json provenance record into --out.
//
// Exit codes: 0 success, 2 validation/usage error, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "punet/checkpoint.hpp"
#include "punet/config.hpp"
#include "punet/data.hpp"
#include "punet/gradsuite.hpp"
#include "punet/harness.hpp"
#include "punet/metrics.hpp"

namespace {

using namespace punet;

// Seed precedence: PUNET_SEED env var > --seed flag > config file value.
unsigned long long resolve_seed(const Config& cfg, unsigned long long flag_seed, bool flag_set) {
    unsigned long long seed = flag_set ? flag_seed : cfg.seed;
    if (const char* env = std::getenv("PUNET_SEED")) {
        try {
            seed = std::stoull(env);
        } catch (const std::exception&) {
            throw validation_error("PUNET_SEED is not an unsigned integer: " + std::string(env));
        }
    }
    return seed;
}

Config load_config(const std::string& path) {
    if (path.empty()) return Config::toy();
    std::ifstream f(path);
    if (!f) throw io_error("config: cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("config: parse failure: ") + e.what());
    }
    return config_from_json(j);
}

std::string ensure_dir(const std::string& out) {
    if (out.empty()) throw validation_error("--out directory is required");
    std::filesystem::create_directories(out);
    return out;
}

data::Dataset load_data(const std::string& dir) {
    if (dir.empty()) throw validation_error("--data directory is required");
    return data::load_dataset(dir);
}

void write_pgm(const std::string& path, const Tensor& map, double lo, double hi) {
    int h = map.shape[0], w = map.shape[1];
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("simmap: cannot write " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double v : map.data) {
        double t = (v - lo) / (hi - lo);
        int byte = static_cast<int>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
        f.put(static_cast<char>(byte));
    }
}

int run_generate_data(const std::string& out, const Config& cfg, unsigned long long seed,
                      int subjects, int slices, int image_size) {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = subjects;
    spec.slices_per_subject = slices;
    spec.image_size = image_size;
    auto ds = data::generate_dataset(spec, seed);
    data::write_dataset(out, ds);
    hn::write_run_json(out + "/run.json", "generate-data", cfg, seed, {out + "/meta.json"});
    std::cout << "wrote " << ds.slices.size() << " slices for " << subjects << " subjects to "
              << out << "\n";
    return 0;
}

int run_pretrain(const std::string& out, Config cfg, unsigned long long seed,
                 const std::string& data_dir, const std::string& variant) {
    cfg.seed = seed;
    auto ds = load_data(data_dir);
    hn::Workspace ws(cfg, Rng(seed));
    std::string prefix = out + "/p1";
    auto res = hn::pretrain_p1(ws, ds, hn::p1_plan(variant, cfg), prefix);
    hn::write_run_json(out + "/run.json", "pretrain " + variant, cfg, seed,
                       {prefix + ".json", prefix + ".bin"});
    if (!res.logs.empty()) {
        const auto& last = res.logs.back();
        std::printf("pretrain %s: %zu steps, final total %.6f (seg %.6f cpa %.6f)\n",
                    variant.c_str(), res.logs.size(), last.total, last.seg, last.cpa);
    } else {
        std::cout << "pretrain " << variant << ": no steps (initialization checkpoint)\n";
    }
    return 0;
}

int run_adapt(const std::string& out, unsigned long long seed, bool seed_set,
              const std::string& data_dir, const std::string& checkpoint,
              const std::string& scheme, int budget) {
    Config cfg = ckpt::manifest_config(checkpoint);
    unsigned long long s = resolve_seed(cfg, seed, seed_set);
    auto ds = load_data(data_dir);
    hn::Workspace ws(cfg, Rng(s));
    hn::P2Options po;
    po.base_checkpoint = checkpoint;
    po.out_prefix = out + "/p2";
    po.budget_subjects = budget;
    po.seed = s;
    auto res = hn::adapt_p2(ws, ds, hn::p2_plan(net::scheme_from(scheme), cfg), po);
    hn::write_run_json(out + "/run.json", "adapt " + scheme, cfg, s,
                       {po.out_prefix + ".json", po.out_prefix + ".bin"});
    std::printf("adapt %s: %zu steps, %zu trainable tensors, %zu frozen\n", scheme.c_str(),
                res.logs.size(), res.trained.size(), res.frozen_count);
    return 0;
}

int run_eval(const std::string& out, const std::string& data_dir, const std::string& checkpoint,
             const std::string& scheme, const std::string& group, const std::string& split_name) {
    Config cfg = ckpt::manifest_config(checkpoint);
    auto ds = load_data(data_dir);
    data::Split split;
    if (split_name == "train")
        split = data::Split::train;
    else if (split_name == "val")
        split = data::Split::val;
    else if (split_name == "test")
        split = data::Split::test;
    else
        throw validation_error("eval: unknown split " + split_name);

    hn::Workspace ws(cfg, Rng(cfg.seed));
    hn::restore(ws, checkpoint, ds);
    auto report = hn::evaluate(ws, hn::task_name(group), ds, split, net::scheme_from(scheme));
    std::string csv = out + "/eval.csv";
    met::write_csv(csv, report);
    hn::write_run_json(out + "/run.json", "eval " + scheme, cfg, cfg.seed, {csv});
    std::printf("eval %s/%s on %s: mean DSC %.2f%% over %zu rows\n", scheme.c_str(), group.c_str(),
                split_name.c_str(), report.dsc_overall().mean, report.rows.size());
    return 0;
}

int run_ablate(const std::string& out, unsigned long long seed, bool seed_set,
               const std::string& data_dir, const std::string& checkpoint,
               const std::vector<std::string>& schemes, const std::vector<int>& budgets) {
    Config cfg = ckpt::manifest_config(checkpoint);
    unsigned long long s = resolve_seed(cfg, seed, seed_set);
    auto ds = load_data(data_dir);
    auto cells = hn::ablate(cfg, ds, checkpoint, schemes, budgets, out, s);
    std::vector<std::string> outputs = {out + "/ablation.csv"};
    for (const auto& c : cells) {
        outputs.push_back(out + "/eval_" + c.scheme + "_" + hn::budget_label(c.budget) + ".csv");
        std::printf("ablate %s budget %s: mean DSC %.2f%%\n", c.scheme.c_str(),
                    hn::budget_label(c.budget).c_str(), c.report.dsc_overall().mean);
    }
    hn::write_run_json(out + "/run.json", "ablate", cfg, s, outputs);
    return 0;
}

// Cosine similarity between one student-view feature cell and every teacher
// cell of the full slice, exported as an 8-bit PGM plus raw CSV values.
int run_simmap(const std::string& out, const std::string& data_dir, const std::string& checkpoint,
               int subject, int slice_index, int row, int col, int crop_row, int crop_col) {
    Config cfg = ckpt::manifest_config(checkpoint);
    auto ds = load_data(data_dir);
    hn::Workspace ws(cfg, Rng(cfg.seed));
    hn::restore(ws, checkpoint, ds);

    const data::Slice* slice = nullptr;
    for (const auto& sl : ds.slices)
        if (sl.subject == subject && sl.index == slice_index) slice = &sl;
    if (!slice) throw validation_error("simmap: no slice " + std::to_string(slice_index) +
                                       " for subject " + std::to_string(subject));

    int H = slice->image.shape[0], W = slice->image.shape[1], fov = cfg.fov_student1;
    if (crop_row < 0) crop_row = (H - fov) / 2;
    if (crop_col < 0) crop_col = (W - fov) / 2;
    if (crop_row + fov > H || crop_col + fov > W)
        throw validation_error("simmap: student crop exceeds the slice");
    if (row < 0) row = fov / 2;
    if (col < 0) col = fov / 2;
    if (row >= fov || col >= fov)
        throw validation_error("simmap: query pixel outside the student view");

    Tensor crop({1, fov, fov});
    for (int i = 0; i < fov; ++i)
        for (int j = 0; j < fov; ++j)
            crop.data[static_cast<std::size_t>(i) * fov + j] =
                slice->image.data[static_cast<std::size_t>(crop_row + i) * W + (crop_col + j)];

    ad::NoGradGuard ng;
    net::ForwardOptions fopt{false, true, true};
    auto teacher = ws.student.features(slice->image.reshaped({1, H, W}),
                                       win::make_grid(1, H, W, 1.0), {}, fopt);
    auto student = ws.student.features(
        crop, win::make_grid(1, fov, fov, 1.0, crop_row, crop_col), {}, fopt);

    const Tensor& tf = teacher.values->value;  // (1, H/2, W/2, C)
    const Tensor& sf = student.values->value;
    int th = tf.shape[1], tw = tf.shape[2], c = tf.shape[3];
    int qr = std::min(row / 2, sf.shape[1] - 1), qc = std::min(col / 2, sf.shape[2] - 1);

    std::vector<double> q(static_cast<std::size_t>(c));
    double qn = 0.0;
    for (int d = 0; d < c; ++d) {
        q[static_cast<std::size_t>(d)] =
            sf.data[(static_cast<std::size_t>(qr) * sf.shape[2] + qc) * c + d];
        qn += q[static_cast<std::size_t>(d)] * q[static_cast<std::size_t>(d)];
    }
    qn = std::sqrt(qn);

    Tensor sim({th, tw});
    for (int i = 0; i < th; ++i)
        for (int j = 0; j < tw; ++j) {
            double dot = 0.0, nn = 0.0;
            for (int d = 0; d < c; ++d) {
                double v = tf.data[(static_cast<std::size_t>(i) * tw + j) * c + d];
                dot += v * q[static_cast<std::size_t>(d)];
                nn += v * v;
            }
            sim.data[static_cast<std::size_t>(i) * tw + j] =
                dot / std::max(1e-12, std::sqrt(nn) * qn);
        }

    std::string pgm = out + "/simmap.pgm", csv = out + "/simmap.csv";
    write_pgm(pgm, sim, -1.0, 1.0);
    std::ofstream f(csv);
    if (!f) throw io_error("simmap: cannot write " + csv);
    char buf[32];
    for (int i = 0; i < th; ++i)
        for (int j = 0; j < tw; ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f", sim.data[static_cast<std::size_t>(i) * tw + j]);
            f << buf << (j + 1 == tw ? "\n" : ",");
        }
    hn::write_run_json(out + "/run.json", "simmap", cfg, cfg.seed, {pgm, csv});
    std::printf("simmap: %dx%d map for subject %d slice %d query (%d,%d)\n", th, tw, subject,
                slice_index, row, col);
    return 0;
}

int run_gradcheck(const std::string& out, const Config& cfg, unsigned long long seed, int coords) {
    auto suite = hn::run_gradcheck_suite(Rng(seed), coords);
    std::string csv = out + "/gradcheck.csv";
    std::ofstream f(csv);
    if (!f) throw io_error("gradcheck: cannot write " + csv);
    f << "case,max_rel_err,tolerance,coords,passed\n";
    for (const auto& r : suite.reports) {
        std::printf("%-24s max rel err %.3e (tol %.0e, %lld coords) %s\n", r.name.c_str(),
                    r.max_rel_err, r.tolerance, static_cast<long long>(r.coords_checked),
                    r.passed() ? "ok" : "FAIL");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9e", r.max_rel_err);
        f << r.name << "," << buf << "," << r.tolerance << "," << r.coords_checked << ","
          << (r.passed() ? 1 : 0) << "\n";
    }
    for (const auto& op : suite.uncovered)
        std::printf("uncovered differentiable op: %s\n", op.c_str());
    hn::write_run_json(out + "/run.json", "gradcheck", cfg, seed, {csv});
    if (!suite.passed()) throw numeric_error("gradcheck: suite failed");
    std::cout << "gradcheck: all " << suite.reports.size() << " cases passed, "
              << suite.covered.size() << " ops covered\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-able UNet: phantom segmentation training and evaluation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, checkpoint, variant = "joint";
    std::string scheme = "prompt", group = "B", split_name = "test";
    unsigned long long seed = 0;
    int subjects = 20, slices = 6, image_size = 96, budget = 0, coords = 300;
    int subject = 0, slice_index = 0, row = -1, col = -1, crop_row = -1, crop_col = -1;
    std::vector<std::string> schemes = {"prompt", "fixed", "full"};
    std::vector<int> budgets = {2, 4, 0};

    auto add_common = [&](CLI::App* cmd, bool with_data) {
        cmd->add_option("--config", config_path, "JSON config file (default: toy preset)");
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out", out_dir, "output directory")->required();
        if (with_data) cmd->add_option("--data", data_dir, "dataset directory")->required();
    };

    auto* gen = app.add_subcommand("generate-data", "write a synthetic phantom dataset");
    add_common(gen, false);
    gen->add_option("--subjects", subjects, "number of subjects");
    gen->add_option("--slices", slices, "slices per subject");
    gen->add_option("--image-size", image_size, "square slice size in pixels");

    auto* pre = app.add_subcommand("pretrain", "phase 1 pretraining");
    add_common(pre, true);
    pre->add_option("--variant", variant, "joint | seg | self | random");

    auto* ada = app.add_subcommand("adapt", "phase 2 adaptation from a checkpoint");
    add_common(ada, true);
    ada->add_option("--checkpoint", checkpoint, "phase 1 checkpoint prefix")->required();
    ada->add_option("--scheme", scheme, "adaptation scheme");
    ada->add_option("--budget", budget, "annotated training subjects (0 = all)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(ev, true);
    ev->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
    ev->add_option("--scheme", scheme, "scheme whose forward options to use");
    ev->add_option("--group", group, "class group task (A or B)");
    ev->add_option("--split", split_name, "train | val | test");

    auto* abl = app.add_subcommand("ablate", "scheme x budget adaptation grid");
    add_common(abl, true);
    abl->add_option("--checkpoint", checkpoint, "phase 1 checkpoint prefix")->required();
    abl->add_option("--schemes", schemes, "comma-separated scheme list")->delimiter(',');
    abl->add_option("--budgets", budgets, "comma-separated budgets, 0 = all")->delimiter(',');

    auto* sim = app.add_subcommand("simmap", "export a cosine-similarity heatmap");
    add_common(sim, true);
    sim->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
    sim->add_option("--subject", subject, "subject id");
    sim->add_option("--slice", slice_index, "slice index within the subject");
    sim->add_option("--row", row, "query pixel row in the student view (default: center)");
    sim->add_option("--col", col, "query pixel column in the student view (default: center)");
    sim->add_option("--crop-row", crop_row, "student view origin row (default: centered)");
    sim->add_option("--crop-col", crop_col, "student view origin column (default: centered)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gc, false);
    gc->add_option("--coords", coords, "sampled coordinates per case");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Config cfg = load_config(config_path);
        bool seed_set = app.get_subcommands().front()->count("--seed") > 0;
        unsigned long long s = resolve_seed(cfg, seed, seed_set);
        std::string out = ensure_dir(out_dir);
        if (gen->parsed()) return run_generate_data(out, cfg, s, subjects, slices, image_size);
        if (pre->parsed()) return run_pretrain(out, cfg, s, data_dir, variant);
        if (ada->parsed()) return run_adapt(out, seed, seed_set, data_dir, checkpoint, scheme, budget);
        if (ev->parsed()) return run_eval(out, data_dir, checkpoint, scheme, group, split_name);
        if (abl->parsed()) return run_ablate(out, seed, seed_set, data_dir, checkpoint, schemes, budgets);
        if (sim->parsed())
            return run_simmap(out, data_dir, checkpoint, subject, slice_index, row, col, crop_row,
                              crop_col);
        if (gc->parsed()) return run_gradcheck(out, cfg, s, coords);
        throw validation_error("no subcommand selected");
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
