#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <optional>

#include "punet/tensor.hpp"

namespace punet::met {

// Masks are (H,W) or (D,H,W) tensors; nonzero marks foreground. 3D volumes
// are stacks of slices with unit inter-slice spacing, `spacing` scales the
// in-plane axes.

namespace detail {

struct Vol {
    const Tensor* t;
    int D, H, W;
};

inline Vol as_volume(const Tensor& m, const char* who) {
    if (m.ndim() == 2) return {&m, 1, m.shape[0], m.shape[1]};
    if (m.ndim() == 3) return {&m, m.shape[0], m.shape[1], m.shape[2]};
    throw validation_error(std::string(who) + ": mask must be (H,W) or (D,H,W)");
}

inline bool fg(const Vol& v, int z, int y, int x) {
    if (z < 0 || z >= v.D || y < 0 || y >= v.H || x < 0 || x >= v.W) return false;
    std::size_t i = (static_cast<std::size_t>(z) * v.H + y) * v.W + x;
    return v.t->data[i] != 0.0;
}

// Border voxels: foreground with any background (or out-of-grid) voxel in
// the full neighborhood (8 neighbors per slice, 26 in 3D).
inline std::vector<std::array<int, 3>> border_voxels(const Vol& v) {
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < v.D; ++z)
        for (int y = 0; y < v.H; ++y)
            for (int x = 0; x < v.W; ++x) {
                if (!fg(v, z, y, x)) continue;
                bool border = false;
                for (int dz = -1; dz <= 1 && !border; ++dz)
                    for (int dy = -1; dy <= 1 && !border; ++dy)
                        for (int dx = -1; dx <= 1 && !border; ++dx) {
                            if (dz == 0 && dy == 0 && dx == 0) continue;
                            if (!fg(v, z + dz, y + dy, x + dx)) border = true;
                        }
                if (border) out.push_back({z, y, x});
            }
    return out;
}

constexpr double kInf = 1e30;

// Felzenszwalb lower-envelope transform of one line of squared distances,
// with samples at positions step*i. Unreached samples (still at kInf) never
// enter the envelope; mixing them into the intersection arithmetic would
// cancel away the finite parts.
inline void sq_edt_line(std::vector<double>& f, double step) {
    int n = static_cast<int>(f.size());
    if (n == 0) return;
    static thread_local std::vector<int> v;
    static thread_local std::vector<double> z, d;
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    d.assign(static_cast<std::size_t>(n), 0.0);
    double s2 = step * step;
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[static_cast<std::size_t>(q)] >= kInf) continue;
        double s = 0.0;
        while (k >= 0) {
            int p = v[static_cast<std::size_t>(k)];
            s = ((f[static_cast<std::size_t>(q)] + s2 * q * q) -
                 (f[static_cast<std::size_t>(p)] + s2 * p * p)) /
                (2.0 * s2 * (q - p));
            if (s > z[static_cast<std::size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : s;
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    if (k < 0) return;  // the whole line is unreached
    k = 0;
    for (int q = 0; q < n; ++q) {
        // boundaries live in index units: the intersection formula divides
        // out one factor of step
        while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
        int p = v[static_cast<std::size_t>(k)];
        d[static_cast<std::size_t>(q)] = s2 * (q - p) * (q - p) + f[static_cast<std::size_t>(p)];
    }
    std::copy(d.begin(), d.end(), f.begin());
}

// Exact squared Euclidean distance to the given seed voxels, anisotropic
// steps (unit z, `spacing` in plane).
inline std::vector<double> sq_edt(const std::vector<std::array<int, 3>>& seeds, int D, int H, int W,
                                  double spacing) {
    std::vector<double> dist(static_cast<std::size_t>(D) * H * W, kInf);
    for (const auto& s : seeds)
        dist[(static_cast<std::size_t>(s[0]) * H + s[1]) * W + s[2]] = 0.0;
    std::vector<double> line;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y) {
            line.assign(dist.begin() + (static_cast<std::size_t>(z) * H + y) * W,
                        dist.begin() + (static_cast<std::size_t>(z) * H + y + 1) * W);
            sq_edt_line(line, spacing);
            std::copy(line.begin(), line.end(),
                      dist.begin() + (static_cast<std::size_t>(z) * H + y) * W);
        }
    line.resize(static_cast<std::size_t>(H));
    for (int z = 0; z < D; ++z)
        for (int x = 0; x < W; ++x) {
            for (int y = 0; y < H; ++y)
                line[static_cast<std::size_t>(y)] =
                    dist[(static_cast<std::size_t>(z) * H + y) * W + x];
            sq_edt_line(line, spacing);
            for (int y = 0; y < H; ++y)
                dist[(static_cast<std::size_t>(z) * H + y) * W + x] =
                    line[static_cast<std::size_t>(y)];
        }
    if (D > 1) {
        line.resize(static_cast<std::size_t>(D));
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                for (int z = 0; z < D; ++z)
                    line[static_cast<std::size_t>(z)] =
                        dist[(static_cast<std::size_t>(z) * H + y) * W + x];
                sq_edt_line(line, 1.0);
                for (int z = 0; z < D; ++z)
                    dist[(static_cast<std::size_t>(z) * H + y) * W + x] =
                        line[static_cast<std::size_t>(z)];
            }
    }
    return dist;
}

inline double directed_sum(const std::vector<std::array<int, 3>>& from,
                           const std::vector<double>& sq_to, int H, int W) {
    double sum = 0.0;
    for (const auto& s : from)
        sum += std::sqrt(sq_to[(static_cast<std::size_t>(s[0]) * H + s[1]) * W + s[2]]);
    return sum;
}

}  // namespace detail

// Dice similarity in [0,1]; two empty masks count as a perfect match.
inline double dsc(const Tensor& pred, const Tensor& gt) {
    if (pred.shape != gt.shape)
        throw validation_error("dsc: shape mismatch " + shape_str(pred.shape) + " vs " +
                               shape_str(gt.shape));
    double both = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        bool a = pred.data[i] != 0.0, b = gt.data[i] != 0.0;
        na += a;
        nb += b;
        both += a && b;
    }
    if (na + nb == 0.0) return 1.0;
    return 2.0 * both / (na + nb);
}

// Average symmetric surface distance between mask borders; undefined (and
// excluded from aggregates) when either mask is empty.
inline std::optional<double> assd(const Tensor& pred, const Tensor& gt, double spacing = 1.0) {
    auto a = detail::as_volume(pred, "assd");
    auto b = detail::as_volume(gt, "assd");
    if (pred.shape != gt.shape)
        throw validation_error("assd: shape mismatch " + shape_str(pred.shape) + " vs " +
                               shape_str(gt.shape));
    if (spacing <= 0.0) throw validation_error("assd: spacing must be positive");
    auto sa = detail::border_voxels(a);
    auto sb = detail::border_voxels(b);
    if (sa.empty() || sb.empty()) return std::nullopt;
    auto da = detail::sq_edt(sa, a.D, a.H, a.W, spacing);
    auto db = detail::sq_edt(sb, b.D, b.H, b.W, spacing);
    double sum = detail::directed_sum(sa, db, a.H, a.W) + detail::directed_sum(sb, da, a.H, a.W);
    return sum / static_cast<double>(sa.size() + sb.size());
}

inline Tensor binarize(const Tensor& labels, int cls) {
    Tensor out(labels.shape);
    for (std::size_t i = 0; i < labels.data.size(); ++i)
        out.data[i] = labels.data[i] == static_cast<double>(cls) ? 1.0 : 0.0;
    return out;
}

inline Tensor stack_slices(const std::vector<Tensor>& slices) {
    if (slices.empty()) throw validation_error("stack_slices: no slices");
    int H = slices.front().shape[0], W = slices.front().shape[1];
    Tensor out({static_cast<int>(slices.size()), H, W});
    for (std::size_t d = 0; d < slices.size(); ++d) {
        if (slices[d].ndim() != 2 || slices[d].shape[0] != H || slices[d].shape[1] != W)
            throw validation_error("stack_slices: slices disagree on shape");
        std::copy(slices[d].data.begin(), slices[d].data.end(),
                  out.data.begin() + static_cast<std::int64_t>(d) * H * W);
    }
    return out;
}

// ---- aggregation -------------------------------------------------------------------

struct ScoreRow {
    std::string subject;
    std::string class_name;
    double dsc_pct = 0.0;          // Dice in percent
    bool assd_valid = false;
    double assd = 0.0;             // pixels; meaningful only when assd_valid
};

struct Summary {
    int n = 0;
    double mean = 0.0, stddev = 0.0, median = 0.0;
};

inline Summary summarize(std::vector<double> xs) {
    Summary s;
    s.n = static_cast<int>(xs.size());
    if (xs.empty()) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / s.n;
    if (s.n > 1) {
        double acc = 0.0;
        for (double x : xs) acc += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(acc / (s.n - 1));
    }
    std::sort(xs.begin(), xs.end());
    s.median = s.n % 2 == 1 ? xs[static_cast<std::size_t>(s.n / 2)]
                            : 0.5 * (xs[static_cast<std::size_t>(s.n / 2 - 1)] +
                                     xs[static_cast<std::size_t>(s.n / 2)]);
    return s;
}

// One row per subject x foreground class. Overall numbers follow the
// subject-first rule: average a subject's classes, then summarize subjects.
struct EvalReport {
    std::string scheme;
    std::string config;
    std::vector<ScoreRow> rows;

    int assd_excluded() const {
        int n = 0;
        for (const auto& r : rows) n += r.assd_valid ? 0 : 1;
        return n;
    }

    std::vector<std::string> subjects() const {
        std::vector<std::string> out;
        for (const auto& r : rows)
            if (std::find(out.begin(), out.end(), r.subject) == out.end()) out.push_back(r.subject);
        return out;
    }

    Summary dsc_by_class(const std::string& cls) const {
        std::vector<double> xs;
        for (const auto& r : rows)
            if (r.class_name == cls) xs.push_back(r.dsc_pct);
        return summarize(std::move(xs));
    }

    Summary assd_by_class(const std::string& cls) const {
        std::vector<double> xs;
        for (const auto& r : rows)
            if (r.class_name == cls && r.assd_valid) xs.push_back(r.assd);
        return summarize(std::move(xs));
    }

    std::vector<double> dsc_per_subject() const {
        std::vector<double> out;
        for (const auto& s : subjects()) {
            double sum = 0.0;
            int n = 0;
            for (const auto& r : rows)
                if (r.subject == s) {
                    sum += r.dsc_pct;
                    ++n;
                }
            if (n > 0) out.push_back(sum / n);
        }
        return out;
    }

    std::vector<double> assd_per_subject() const {
        std::vector<double> out;
        for (const auto& s : subjects()) {
            double sum = 0.0;
            int n = 0;
            for (const auto& r : rows)
                if (r.subject == s && r.assd_valid) {
                    sum += r.assd;
                    ++n;
                }
            if (n > 0) out.push_back(sum / n);
        }
        return out;
    }

    Summary dsc_overall() const { return summarize(dsc_per_subject()); }
    Summary assd_overall() const { return summarize(assd_per_subject()); }
};

// Header: subject,class,dsc_pct,assd,assd_valid. Invalid surface distances
// leave the assd field empty.
inline void write_csv(const std::string& path, const EvalReport& report) {
    std::ofstream f(path);
    if (!f) throw io_error("metrics: cannot write " + path);
    f << "subject,class,dsc_pct,assd,assd_valid\n";
    char buf[64];
    for (const auto& r : report.rows) {
        f << r.subject << ',' << r.class_name << ',';
        std::snprintf(buf, sizeof buf, "%.6f", r.dsc_pct);
        f << buf << ',';
        if (r.assd_valid) {
            std::snprintf(buf, sizeof buf, "%.6f", r.assd);
            f << buf;
        }
        f << ',' << (r.assd_valid ? 1 : 0) << '\n';
    }
    if (!f) throw io_error("metrics: failed writing " + path);
}

// ---- paired significance test ------------------------------------------------------

namespace detail {

// Continued fraction for the regularized incomplete beta (Lentz's method).
inline double betacf(double a, double b, double x) {
    const double tiny = 1e-300, eps = 1e-14;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

inline double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                b * std::log(1.0 - x);
    double front = std::exp(ln);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided paired t-test p-value. Degenerate difference series follow the
// documented conventions: all-zero differences give p = 1, a nonzero shift
// with zero variance gives p = 0.
inline double paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw validation_error("paired_t_test: series lengths differ");
    std::size_t n = a.size();
    if (n < 2) throw validation_error("paired_t_test: need at least two pairs");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = a[i] - b[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n - 1);
    if (var == 0.0) return mean == 0.0 ? 1.0 : 0.0;
    double t = mean / std::sqrt(var / static_cast<double>(n));
    double df = static_cast<double>(n - 1);
    return detail::betai(0.5 * df, 0.5, df / (df + t * t));
}

}  // namespace punet::met
