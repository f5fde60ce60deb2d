#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "punet/rng.hpp"
#include "punet/tensor.hpp"

namespace punet::data {

// ---- phantom specification --------------------------------------------------

struct ClassSpec {
    std::string name;
    std::string family;  // ellipse | blob | ring
    std::string group;   // A: pretraining tasks, B: held-out adaptation tasks
    double intensity_lo = 0.5, intensity_hi = 0.7;
    double radius_lo = 8.0, radius_hi = 14.0;
};

struct PhantomSpec {
    int image_size = 96;
    int subjects = 20;
    int slices_per_subject = 6;
    double noise_sigma = 0.04;
    double background_level = 0.12;
    std::vector<ClassSpec> classes;

    // Four structures per slice. The ring shares its intensity band with the
    // bright ellipse on purpose: telling them apart requires shape context,
    // not a per-pixel intensity threshold.
    static PhantomSpec defaults() {
        PhantomSpec s;
        s.classes = {
            {"ellipse_bright", "ellipse", "A", 0.78, 0.92, 9.0, 14.0},
            {"blob_mid", "blob", "A", 0.48, 0.62, 7.0, 11.0},
            {"ring", "ring", "B", 0.78, 0.92, 9.0, 14.0},
            {"blob_dim", "blob", "B", 0.30, 0.42, 7.0, 11.0},
        };
        return s;
    }
};

inline nlohmann::json to_json(const PhantomSpec& s) {
    nlohmann::json j;
    j["image_size"] = s.image_size;
    j["subjects"] = s.subjects;
    j["slices_per_subject"] = s.slices_per_subject;
    j["noise_sigma"] = s.noise_sigma;
    j["background_level"] = s.background_level;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : s.classes)
        j["classes"].push_back({{"name", c.name},
                                {"family", c.family},
                                {"group", c.group},
                                {"intensity", {c.intensity_lo, c.intensity_hi}},
                                {"radius", {c.radius_lo, c.radius_hi}}});
    return j;
}

inline PhantomSpec phantom_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.subjects = j.value("subjects", s.subjects);
    s.slices_per_subject = j.value("slices_per_subject", s.slices_per_subject);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.background_level = j.value("background_level", s.background_level);
    if (j.contains("classes")) {
        for (const auto& cj : j.at("classes")) {
            ClassSpec c;
            c.name = cj.at("name").get<std::string>();
            c.family = cj.at("family").get<std::string>();
            c.group = cj.at("group").get<std::string>();
            c.intensity_lo = cj.at("intensity").at(0).get<double>();
            c.intensity_hi = cj.at("intensity").at(1).get<double>();
            c.radius_lo = cj.at("radius").at(0).get<double>();
            c.radius_hi = cj.at("radius").at(1).get<double>();
            s.classes.push_back(c);
        }
    } else {
        s.classes = PhantomSpec::defaults().classes;
    }
    if (s.image_size < 16) throw validation_error("phantom: image_size too small");
    if (s.subjects < 1 || s.slices_per_subject < 1)
        throw validation_error("phantom: need at least one subject and slice");
    for (const auto& c : s.classes) {
        if (c.family != "ellipse" && c.family != "blob" && c.family != "ring")
            throw validation_error("phantom: unknown family " + c.family);
        if (c.group != "A" && c.group != "B")
            throw validation_error("phantom: group must be A or B for class " + c.name);
    }
    return s;
}

// ---- rendering ---------------------------------------------------------------

struct Slice {
    int subject = 0;
    int index = 0;
    Tensor image;  // (H, W) in roughly [0, 1.2]
    Tensor mask;   // (H, W) class ids, 0 = background
};

namespace detail {

struct Shape {
    double cy = 0, cx = 0;        // center
    double a = 1, b = 1;          // ellipse semi-axes
    double angle = 0;             // rotation
    double ring_inner = 0;        // ring: inner fraction of the outer radius
    std::array<double, 3> blob_amp{};   // radial harmonics (k = 2..4)
    std::array<double, 3> blob_phase{};
    bool is_ring = false;
    bool is_blob = false;
    double intensity = 0.5;

    // normalized squared elliptical radius, 1.0 on the boundary
    double rho2(double y, double x) const {
        double dy = y - cy, dx = x - cx;
        double u = dx * std::cos(angle) + dy * std::sin(angle);
        double v = -dx * std::sin(angle) + dy * std::cos(angle);
        return (u * u) / (a * a) + (v * v) / (b * b);
    }

    bool contains(double y, double x) const {
        double r2 = rho2(y, x);
        if (is_ring) return r2 <= 1.0 && r2 >= ring_inner * ring_inner;
        if (is_blob) {
            double dy = y - cy, dx = x - cx;
            double phi = std::atan2(dy, dx);
            double mod = 1.0;
            for (int k = 0; k < 3; ++k) mod += blob_amp[k] * std::cos((k + 2) * phi + blob_phase[k]);
            mod = std::max(mod, 0.35);
            return r2 <= mod * mod;
        }
        return r2 <= 1.0;
    }

    // outermost extent; blobs bulge up to 1 + sum of harmonic amplitudes
    double reach() const { return std::max(a, b) * (is_blob ? 1.45 : 1.05); }
};

}  // namespace detail

inline Slice render_slice(const PhantomSpec& spec, int subject, int index, Rng subject_style,
                          Rng slice_rng) {
    int n = spec.image_size;
    Slice s;
    s.subject = subject;
    s.index = index;
    s.image = Tensor({n, n});
    s.mask = Tensor({n, n});

    // smooth per-slice background texture
    struct Wave {
        double fr, fc, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
        waves.push_back({slice_rng.uniform(0.5, 2.5), slice_rng.uniform(0.5, 2.5),
                         slice_rng.uniform(0.0, 2.0 * M_PI), slice_rng.uniform(0.01, 0.035)});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double t = spec.background_level;
            for (const auto& w : waves)
                t += w.amp * std::sin(2.0 * M_PI * (w.fr * i + w.fc * j) / n + w.phase);
            s.image.at2(i, j) = t;
        }

    // per-subject style: each subject keeps its own band position
    std::vector<double> subj_radius, subj_intensity;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        const auto& cs = spec.classes[c];
        subj_radius.push_back(subject_style.uniform(cs.radius_lo, cs.radius_hi));
        subj_intensity.push_back(subject_style.uniform(cs.intensity_lo, cs.intensity_hi));
    }

    std::vector<detail::Shape> placed;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        const auto& cs = spec.classes[c];
        detail::Shape sh;
        double r = std::min(std::max(subj_radius[c] * slice_rng.uniform(0.9, 1.1), cs.radius_lo),
                            cs.radius_hi);
        sh.a = r;
        sh.b = r * slice_rng.uniform(0.65, 0.95);
        sh.angle = slice_rng.uniform(0.0, M_PI);
        sh.intensity = std::min(
            std::max(subj_intensity[c] * slice_rng.uniform(0.96, 1.04), cs.intensity_lo),
            cs.intensity_hi);
        if (cs.family == "ring") {
            sh.is_ring = true;
            sh.ring_inner = slice_rng.uniform(0.55, 0.7);
        } else if (cs.family == "blob") {
            sh.is_blob = true;
            for (int k = 0; k < 3; ++k) {
                sh.blob_amp[static_cast<std::size_t>(k)] = slice_rng.uniform(0.03, 0.14);
                sh.blob_phase[static_cast<std::size_t>(k)] = slice_rng.uniform(0.0, 2.0 * M_PI);
            }
        }

        double margin = sh.reach() + 2.0;
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            sh.cy = slice_rng.uniform(margin, n - margin);
            sh.cx = slice_rng.uniform(margin, n - margin);
            ok = true;
            for (const auto& other : placed)
                if (std::hypot(sh.cy - other.cy, sh.cx - other.cx) < sh.reach() + other.reach())
                    ok = false;
        }
        placed.push_back(sh);

        int lo_y = std::max(0, static_cast<int>(sh.cy - margin));
        int hi_y = std::min(n - 1, static_cast<int>(sh.cy + margin));
        int lo_x = std::max(0, static_cast<int>(sh.cx - margin));
        int hi_x = std::min(n - 1, static_cast<int>(sh.cx + margin));
        for (int i = lo_y; i <= hi_y; ++i)
            for (int j = lo_x; j <= hi_x; ++j)
                if (s.mask.at2(i, j) == 0.0 && sh.contains(i, j)) {
                    s.mask.at2(i, j) = static_cast<double>(c + 1);
                    s.image.at2(i, j) = sh.intensity;
                }
    }

    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = s.image.at2(i, j) + slice_rng.normal(0.0, spec.noise_sigma);
            s.image.at2(i, j) = std::min(std::max(v, 0.0), 2.0);
        }
    return s;
}

// ---- dataset + container ------------------------------------------------------

enum class Split { train = 0, val = 1, test = 2 };

struct Dataset {
    PhantomSpec spec;
    unsigned long long seed = 0;
    std::vector<Slice> slices;
    std::vector<Split> subject_split;  // indexed by subject

    std::vector<const Slice*> split(Split which) const {
        std::vector<const Slice*> out;
        for (const auto& s : slices)
            if (subject_split[static_cast<std::size_t>(s.subject)] == which) out.push_back(&s);
        return out;
    }

    std::vector<int> class_ids(const std::string& group) const {
        std::vector<int> out;
        for (std::size_t c = 0; c < spec.classes.size(); ++c)
            if (spec.classes[c].group == group) out.push_back(static_cast<int>(c) + 1);
        return out;
    }
};

// 70/10/20 split by subject, deterministic in the seed.
inline std::vector<Split> make_split(int subjects, Rng rng) {
    std::vector<int> order(static_cast<std::size_t>(subjects));
    for (int i = 0; i < subjects; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    int n_train = static_cast<int>(std::lround(subjects * 0.7));
    int n_val = static_cast<int>(std::lround(subjects * 0.1));
    n_train = std::max(1, std::min(n_train, subjects - 2));
    n_val = std::max(1, std::min(n_val, subjects - n_train - 1));
    std::vector<Split> split(static_cast<std::size_t>(subjects), Split::test);
    for (int i = 0; i < subjects; ++i) {
        if (i < n_train)
            split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Split::train;
        else if (i < n_train + n_val)
            split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Split::val;
    }
    return split;
}

inline Dataset generate_dataset(const PhantomSpec& spec, unsigned long long seed) {
    Dataset ds;
    ds.spec = spec;
    ds.seed = seed;
    Rng root(seed);
    ds.subject_split = make_split(spec.subjects, root.stream("split"));
    for (int subj = 0; subj < spec.subjects; ++subj) {
        Rng style = root.stream("subject", static_cast<std::uint64_t>(subj));
        for (int sl = 0; sl < spec.slices_per_subject; ++sl)
            ds.slices.push_back(render_slice(spec, subj, sl, style.stream("style"),
                                             style.stream("slice", static_cast<std::uint64_t>(sl))));
    }
    return ds;
}

namespace detail {
inline std::vector<unsigned char> encode_slice(const Slice& s) {
    std::vector<unsigned char> bytes;
    bytes.reserve(static_cast<std::size_t>(s.image.numel()) * 5);
    for (double v : s.image.data) append_f32le(bytes, static_cast<float>(v));
    for (double v : s.mask.data) bytes.push_back(static_cast<unsigned char>(v));
    return bytes;
}
}  // namespace detail

// Layout: <dir>/meta.json plus one binary blob per slice holding the image
// as float32 little-endian row-major followed by the mask as uint8. Every
// blob's checksum lives in meta.json; loads verify them.
inline void write_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["schema_version"] = 1;
    meta["seed"] = ds.seed;
    meta["spec"] = to_json(ds.spec);
    meta["subjects"] = nlohmann::json::array();
    for (int subj = 0; subj < ds.spec.subjects; ++subj) {
        const char* names[3] = {"train", "val", "test"};
        nlohmann::json sj;
        sj["id"] = subj;
        sj["split"] = names[static_cast<int>(ds.subject_split[static_cast<std::size_t>(subj)])];
        sj["slices"] = nlohmann::json::array();
        meta["subjects"].push_back(sj);
    }
    for (const auto& s : ds.slices) {
        char name[64];
        std::snprintf(name, sizeof name, "s%03d_%02d.bin", s.subject, s.index);
        auto bytes = detail::encode_slice(s);
        std::ofstream f(fs::path(dir) / name, std::ios::binary);
        if (!f) throw io_error("dataset: cannot write " + std::string(name));
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        meta["subjects"][static_cast<std::size_t>(s.subject)]["slices"].push_back(
            {{"file", name}, {"index", s.index}, {"checksum", fnv1a64_hex(bytes.data(), bytes.size())}});
    }
    std::ofstream mf(fs::path(dir) / "meta.json");
    mf << meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw io_error("dataset: missing meta.json under " + dir);
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("dataset: bad meta.json: ") + e.what());
    }
    if (meta.value("schema_version", 0) != 1) throw io_error("dataset: unsupported schema_version");

    Dataset ds;
    ds.spec = phantom_from_json(meta.at("spec"));
    ds.seed = meta.value("seed", 0ull);
    int n = ds.spec.image_size;
    ds.subject_split.resize(static_cast<std::size_t>(ds.spec.subjects), Split::test);
    for (const auto& sj : meta.at("subjects")) {
        int subj = sj.at("id").get<int>();
        std::string split = sj.at("split").get<std::string>();
        Split sp = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
        ds.subject_split[static_cast<std::size_t>(subj)] = sp;
        for (const auto& slj : sj.at("slices")) {
            std::string file = slj.at("file").get<std::string>();
            std::ifstream f(fs::path(dir) / file, std::ios::binary);
            if (!f) throw io_error("dataset: missing slice file " + file);
            std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                             std::istreambuf_iterator<char>());
            if (fnv1a64_hex(bytes.data(), bytes.size()) != slj.at("checksum").get<std::string>())
                throw io_error("dataset: checksum mismatch for " + file);
            std::size_t want = static_cast<std::size_t>(n) * n * 5;
            if (bytes.size() != want) throw io_error("dataset: truncated slice file " + file);
            Slice s;
            s.subject = subj;
            s.index = slj.at("index").get<int>();
            s.image = Tensor({n, n});
            s.mask = Tensor({n, n});
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * n; ++i) {
                s.image.data[static_cast<std::size_t>(i)] =
                    static_cast<double>(read_f32le(bytes.data() + i * 4));
                s.mask.data[static_cast<std::size_t>(i)] =
                    static_cast<double>(bytes[static_cast<std::size_t>(n) * n * 4 + i]);
            }
            ds.slices.push_back(std::move(s));
        }
    }
    return ds;
}

// ---- augmentation --------------------------------------------------------------

// A reproducible view of a slice: p_slice = A * p_view + t, then intensity
// gamma/scale/shift, then (strong only) block dropout and block shuffle on
// the image. The grid always reports the pre-corruption source coordinates.
struct ViewRecord {
    int fov = 0;
    double a11 = 1, a12 = 0, a21 = 0, a22 = 1, tr = 0, tc = 0;
    double gamma_exp = 1.0;
    double intensity_scale = 1.0;
    double intensity_shift = 0.0;
    int block = 0;  // corruption block edge; 0 = none
    std::vector<int> dropped_blocks;
    std::vector<std::pair<int, int>> shuffled_pairs;
    double masked_fraction = 0.0;
};

struct View {
    Tensor image;  // (fov, fov)
    Tensor mask;   // (fov, fov)
    Tensor grid;   // (fov, fov, 2) slice coordinates per view pixel
    ViewRecord rec;
};

struct CropRange {
    double r_lo = 0, r_hi = 0, c_lo = 0, c_hi = 0;  // inclusive origin range
};

inline ViewRecord sample_view(Rng& rng, int fov, const CropRange& range, bool strong) {
    ViewRecord r;
    r.fov = fov;
    double orow = rng.uniform(range.r_lo, range.r_hi);
    double ocol = rng.uniform(range.c_lo, range.c_hi);

    double angle = rng.uniform(-0.26, 0.26);  // about 15 degrees
    double sy = rng.uniform(0.9, 1.1), sx = rng.uniform(0.9, 1.1);
    double shear = rng.uniform(-0.1, 0.1);
    double cv = (fov - 1) / 2.0;
    // A = R(angle) * Shear * diag(sy, sx) about the view center
    double m11 = std::cos(angle), m12 = -std::sin(angle);
    double m21 = std::sin(angle), m22 = std::cos(angle);
    double s11 = sy, s12 = sy * shear, s21 = 0.0, s22 = sx;
    r.a11 = m11 * s11 + m12 * s21;
    r.a12 = m11 * s12 + m12 * s22;
    r.a21 = m21 * s11 + m22 * s21;
    r.a22 = m21 * s12 + m22 * s22;
    double ccr = orow + cv, ccc = ocol + cv;
    r.tr = ccr - (r.a11 * cv + r.a12 * cv);
    r.tc = ccc - (r.a21 * cv + r.a22 * cv);

    r.gamma_exp = rng.uniform(0.8, 1.25);
    r.intensity_scale = rng.uniform(0.9, 1.1);
    r.intensity_shift = rng.uniform(-0.05, 0.05);

    if (strong) {
        r.block = std::max(4, fov / 8);
        int nb = fov / r.block;
        int n_blocks = nb * nb;
        r.masked_fraction = rng.uniform(0.1, 0.4);
        int n_mask = std::max(1, static_cast<int>(std::lround(r.masked_fraction * n_blocks)));
        std::vector<int> ids(static_cast<std::size_t>(n_blocks));
        for (int i = 0; i < n_blocks; ++i) ids[static_cast<std::size_t>(i)] = i;
        rng.shuffle(ids);
        ids.resize(static_cast<std::size_t>(n_mask));
        // half dropped, half content-shuffled in pairs
        std::size_t half = ids.size() / 2;
        r.dropped_blocks.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(half));
        for (std::size_t i = half; i + 1 < ids.size(); i += 2)
            r.shuffled_pairs.emplace_back(ids[i], ids[i + 1]);
        if ((ids.size() - half) % 2 == 1) r.dropped_blocks.push_back(ids.back());
    }
    return r;
}

inline View apply_view(const Slice& slice, const ViewRecord& rec) {
    int n = slice.image.shape[0];
    int fov = rec.fov;
    View v;
    v.rec = rec;
    v.image = Tensor({fov, fov});
    v.mask = Tensor({fov, fov});
    v.grid = Tensor({fov, fov, 2});

    auto clampd = [&](double x) { return std::min(std::max(x, 0.0), static_cast<double>(n - 1)); };
    for (int i = 0; i < fov; ++i)
        for (int j = 0; j < fov; ++j) {
            double sr = rec.a11 * i + rec.a12 * j + rec.tr;
            double sc = rec.a21 * i + rec.a22 * j + rec.tc;
            v.grid.data[(static_cast<std::int64_t>(i) * fov + j) * 2] = sr;
            v.grid.data[(static_cast<std::int64_t>(i) * fov + j) * 2 + 1] = sc;

            double cr = clampd(sr), cc = clampd(sc);
            int r0 = static_cast<int>(std::floor(cr)), c0 = static_cast<int>(std::floor(cc));
            int r1 = std::min(r0 + 1, n - 1), c1 = std::min(c0 + 1, n - 1);
            double fr = cr - r0, fc = cc - c0;
            double val = (1 - fr) * ((1 - fc) * slice.image.at2(r0, c0) + fc * slice.image.at2(r0, c1)) +
                         fr * ((1 - fc) * slice.image.at2(r1, c0) + fc * slice.image.at2(r1, c1));
            double g = std::pow(std::max(val, 0.0), rec.gamma_exp);
            v.image.at2(i, j) = g * rec.intensity_scale + rec.intensity_shift;

            int rn = static_cast<int>(std::lround(cr)), cn = static_cast<int>(std::lround(cc));
            v.mask.at2(i, j) = slice.mask.at2(rn, cn);
        }

    if (rec.block > 0) {
        int nb = fov / rec.block;
        auto block_origin = [&](int id) {
            return std::pair<int, int>{(id / nb) * rec.block, (id % nb) * rec.block};
        };
        for (int id : rec.dropped_blocks) {
            auto [by, bx] = block_origin(id);
            for (int i = 0; i < rec.block; ++i)
                for (int j = 0; j < rec.block; ++j) v.image.at2(by + i, bx + j) = 0.0;
        }
        for (auto [ida, idb] : rec.shuffled_pairs) {
            auto [ay, ax] = block_origin(ida);
            auto [by, bx] = block_origin(idb);
            for (int i = 0; i < rec.block; ++i)
                for (int j = 0; j < rec.block; ++j)
                    std::swap(v.image.at2(ay + i, ax + j), v.image.at2(by + i, bx + j));
        }
    }
    return v;
}

inline View augment_weak(const Slice& slice, int fov, Rng& rng) {
    int n = slice.image.shape[0];
    if (fov > n) throw validation_error("augment: fov exceeds slice size");
    CropRange range{0.0, static_cast<double>(n - fov), 0.0, static_cast<double>(n - fov)};
    ViewRecord rec = sample_view(rng, fov, range, false);
    return apply_view(slice, rec);
}

inline View augment_strong(const Slice& slice, int fov, Rng& rng, const CropRange& range) {
    ViewRecord rec = sample_view(rng, fov, range, true);
    return apply_view(slice, rec);
}

}  // namespace punet::data
