#pragma once

#include "punet/config.hpp"
#include "punet/data.hpp"
#include "punet/nn.hpp"
#include "punet/windowing.hpp"

namespace punet::ss {

using ad::Var;

// ---- views -------------------------------------------------------------------

// One teacher view (weak augmentation, widest field) plus two student views
// (strong augmentation) whose crops lie inside the teacher's nominal region.
struct ViewSet {
    data::View teacher;
    std::array<data::View, 2> students;
};

namespace detail {
inline std::pair<double, double> view_center(const data::ViewRecord& r) {
    double cv = (r.fov - 1) / 2.0;
    return {r.a11 * cv + r.a12 * cv + r.tr, r.a21 * cv + r.a22 * cv + r.tc};
}

inline data::CropRange contained_range(const data::ViewRecord& outer, int inner_fov, int slice_n) {
    auto [cr, cc] = view_center(outer);
    double half = outer.fov / 2.0;
    auto clamp_axis = [&](double center) {
        double lo = center - half;
        double hi = center + half - inner_fov;
        lo = std::min(std::max(lo, 0.0), static_cast<double>(slice_n - inner_fov));
        hi = std::min(std::max(hi, 0.0), static_cast<double>(slice_n - inner_fov));
        if (hi < lo) hi = lo;
        return std::pair<double, double>{lo, hi};
    };
    auto [rlo, rhi] = clamp_axis(cr);
    auto [clo, chi] = clamp_axis(cc);
    return {rlo, rhi, clo, chi};
}
}  // namespace detail

inline ViewSet make_views(const data::Slice& slice, const Config& cfg, Rng& rng) {
    int n = slice.image.shape[0];
    if (cfg.fov_teacher > n)
        throw validation_error("make_views: fov_teacher exceeds the slice size");
    ViewSet vs;
    vs.teacher = data::augment_weak(slice, cfg.fov_teacher, rng);
    int fovs[2] = {cfg.fov_student1, cfg.fov_student2};
    for (int s = 0; s < 2; ++s) {
        auto range = detail::contained_range(vs.teacher.rec, fovs[s], n);
        vs.students[static_cast<std::size_t>(s)] =
            data::augment_strong(slice, fovs[s], rng, range);
    }
    return vs;
}

// ---- prototypes ----------------------------------------------------------------

struct Prototypes {
    Tensor centroids;  // (K, C)
    Tensor positions;  // (K, 2) world coordinates
};

namespace detail {

inline Tensor cosine_rows_t(const Tensor& a, const Tensor& b, double guard = 1e-8) {
    int n = a.shape[0], k = b.shape[0], c = a.shape[1];
    if (b.shape[1] != c) throw validation_error("cosine_rows: channel mismatch");
    Tensor out({n, k});
    std::vector<double> nb(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        double s = 0;
        for (int d = 0; d < c; ++d) s += b.at2(j, d) * b.at2(j, d);
        nb[static_cast<std::size_t>(j)] = std::sqrt(s);
    }
    for (int i = 0; i < n; ++i) {
        double na = 0;
        for (int d = 0; d < c; ++d) na += a.at2(i, d) * a.at2(i, d);
        na = std::sqrt(na);
        for (int j = 0; j < k; ++j) {
            double dot = 0;
            for (int d = 0; d < c; ++d) dot += a.at2(i, d) * b.at2(j, d);
            out.at2(i, j) = dot / std::max(na * nb[static_cast<std::size_t>(j)], guard);
        }
    }
    return out;
}

inline Tensor softmax_rows_t(const Tensor& s, double tau) {
    Tensor out = s;
    int n = s.shape[0], k = s.shape[1];
    for (int i = 0; i < n; ++i) {
        double m = -1e300;
        for (int j = 0; j < k; ++j) m = std::max(m, s.at2(i, j) / tau);
        double z = 0;
        for (int j = 0; j < k; ++j) {
            out.at2(i, j) = std::exp(s.at2(i, j) / tau - m);
            z += out.at2(i, j);
        }
        for (int j = 0; j < k; ++j) out.at2(i, j) /= z;
    }
    return out;
}

inline void expect_single_map(const win::FeatureMap& f, const char* who) {
    if (f.values->value.ndim() != 4 || f.values->value.shape[0] != 1)
        throw validation_error(std::string(who) + ": expected a single (1,H,W,C) map");
}

}  // namespace detail

// Gaussian locality weights between cells and prototype positions. The
// variance derives from the full width at half maximum, so a cell exactly
// fwhm/2 away from a prototype gets weight 0.5.
inline Tensor spatial_weights(const Tensor& grid2d, const Tensor& positions, double fwhm) {
    int n = grid2d.shape[0], k = positions.shape[0];
    double sigma2 = fwhm * fwhm / (8.0 * std::log(2.0));
    Tensor w({n, k});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            double dr = grid2d.at2(i, 0) - positions.at2(j, 0);
            double dc = grid2d.at2(i, 1) - positions.at2(j, 1);
            w.at2(i, j) = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma2));
        }
    return w;
}

// Soft assignment of feature rows to centroids: softmax over K of
// cosine similarity divided by the temperature.
inline Tensor assignments_t(const Tensor& feats2d, const Tensor& centroids, double tau) {
    return detail::softmax_rows_t(detail::cosine_rows_t(feats2d, centroids), tau);
}

inline Var assignments(const Var& feats2d, const Tensor& centroids, double tau) {
    auto sim = nn::cosine_pairs(feats2d, ad::constant(centroids));
    return ad::softmax_lastdim(ad::scale(sim, 1.0 / tau));
}

// One prototype per reduction x reduction block of the teacher map, seeded
// from the block-center cell.
inline Prototypes seed_prototypes(const win::FeatureMap& f, int reduction) {
    detail::expect_single_map(f, "seed_prototypes");
    int h = f.values->value.shape[1], w = f.values->value.shape[2], c = f.values->value.shape[3];
    if (reduction < 1 || h % reduction != 0 || w % reduction != 0)
        throw geometry_error("seed_prototypes: map " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by reduction " + std::to_string(reduction));
    int kh = h / reduction, kw = w / reduction;
    Prototypes p;
    p.centroids = Tensor({kh * kw, c});
    p.positions = Tensor({kh * kw, 2});
    const Tensor& vals = f.values->value;
    for (int a = 0; a < kh; ++a)
        for (int b = 0; b < kw; ++b) {
            int i = a * reduction + reduction / 2;
            int j = b * reduction + reduction / 2;
            int row = a * kw + b;
            for (int d = 0; d < c; ++d)
                p.centroids.at2(row, d) = vals.data[(static_cast<std::size_t>(i) * w + j) * c +
                                                    static_cast<std::size_t>(d)];
            p.positions.at2(row, 0) = f.grid.data[(static_cast<std::size_t>(i) * w + j) * 2];
            p.positions.at2(row, 1) = f.grid.data[(static_cast<std::size_t>(i) * w + j) * 2 + 1];
        }
    return p;
}

// Spatially weighted soft k-means on cosine similarity. Every iteration
// recomputes locality weights from the current prototype positions, then
// moves each centroid (and its position) to the weighted mean of its soft
// members. Clusters with vanishing total weight keep their previous state.
inline Prototypes cluster_prototypes(const Tensor& feats2d, const Tensor& grid2d, Prototypes p,
                                     double fwhm, double tau, int iters) {
    int n = feats2d.shape[0], c = feats2d.shape[1], k = p.centroids.shape[0];
    for (int it = 0; it < iters; ++it) {
        Tensor w = spatial_weights(grid2d, p.positions, fwhm);
        Tensor a = assignments_t(feats2d, p.centroids, tau);
        Tensor cent({k, c}), pos({k, 2});
        std::vector<double> denom(static_cast<std::size_t>(k), 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) {
                double phi = a.at2(i, j) * w.at2(i, j);
                denom[static_cast<std::size_t>(j)] += phi;
                for (int d = 0; d < c; ++d) cent.at2(j, d) += phi * feats2d.at2(i, d);
                pos.at2(j, 0) += phi * grid2d.at2(i, 0);
                pos.at2(j, 1) += phi * grid2d.at2(i, 1);
            }
        for (int j = 0; j < k; ++j) {
            if (denom[static_cast<std::size_t>(j)] <= 1e-12) continue;  // keep previous state
            for (int d = 0; d < c; ++d) p.centroids.at2(j, d) = cent.at2(j, d) / denom[static_cast<std::size_t>(j)];
            p.positions.at2(j, 0) = pos.at2(j, 0) / denom[static_cast<std::size_t>(j)];
            p.positions.at2(j, 1) = pos.at2(j, 1) / denom[static_cast<std::size_t>(j)];
        }
    }
    return p;
}

// ---- correspondence + loss ------------------------------------------------------

// Index of the nearest reference row (world coordinates) for every query row.
inline std::vector<std::int64_t> nearest_cells(const Tensor& query, const Tensor& ref) {
    std::vector<std::int64_t> out(static_cast<std::size_t>(query.shape[0]));
    for (int i = 0; i < query.shape[0]; ++i) {
        double best = 1e300;
        std::int64_t arg = 0;
        for (int j = 0; j < ref.shape[0]; ++j) {
            double dr = query.at2(i, 0) - ref.at2(j, 0);
            double dc = query.at2(i, 1) - ref.at2(j, 1);
            double d2 = dr * dr + dc * dc;
            if (d2 < best) {
                best = d2;
                arg = j;
            }
        }
        out[static_cast<std::size_t>(i)] = arg;
    }
    return out;
}

struct StudentTerm {
    std::vector<std::int64_t> cell_index;  // sampled cells in the student map
    std::vector<std::int64_t> teacher_nn;  // matched teacher cells
    Var ce;                                // mean soft cross entropy
};

struct CpaParts {
    Var loss;
    Prototypes protos;
    Tensor teacher_assign;  // (N_teacher, K)
    std::vector<StudentTerm> per_student;
};

// Dense self-supervised loss. Prototypes are clustered on the teacher map,
// teacher assignments (sharp temperature) become soft targets, and each
// student map is subsampled 2x with integer jitter, matched to the nearest
// teacher cell by world position, and pulled toward the teacher's
// distribution with a soft cross entropy (broad temperature). Gradients flow
// only through the student features.
inline CpaParts cpa_loss(const win::FeatureMap& teacher,
                         const std::vector<win::FeatureMap>& students, const Config& cfg,
                         Rng& rng) {
    detail::expect_single_map(teacher, "cpa_loss");
    int th = teacher.values->value.shape[1], tw = teacher.values->value.shape[2];
    int c = teacher.values->value.shape[3];

    Tensor tfeat = teacher.values->value.reshaped({th * tw, c});
    Tensor tgrid = teacher.grid.reshaped({th * tw, 2});

    CpaParts parts;
    parts.protos = cluster_prototypes(tfeat, tgrid, seed_prototypes(teacher, cfg.proto_reduction),
                                      cfg.fwhm, cfg.tau_teacher, cfg.cluster_iters);
    parts.teacher_assign = assignments_t(tfeat, parts.protos.centroids, cfg.tau_teacher);
    int k = parts.protos.centroids.shape[0];

    Var total;
    for (const auto& st : students) {
        detail::expect_single_map(st, "cpa_loss");
        int sh = st.values->value.shape[1], sw = st.values->value.shape[2];
        if (st.values->value.shape[3] != c)
            throw validation_error("cpa_loss: student channel count differs from teacher");

        StudentTerm term;
        int jr = static_cast<int>(rng.randint(2)), jc = static_cast<int>(rng.randint(2));
        Tensor sgrid({(sh / 2) * (sw / 2), 2});
        for (int a = 0; a < sh / 2; ++a)
            for (int b = 0; b < sw / 2; ++b) {
                int i = std::min(2 * a + jr, sh - 1), j = std::min(2 * b + jc, sw - 1);
                std::int64_t cell = static_cast<std::int64_t>(i) * sw + j;
                term.cell_index.push_back(cell);
                std::int64_t row = static_cast<std::int64_t>(a) * (sw / 2) + b;
                sgrid.data[static_cast<std::size_t>(row) * 2] = st.grid.data[static_cast<std::size_t>(cell) * 2];
                sgrid.data[static_cast<std::size_t>(row) * 2 + 1] = st.grid.data[static_cast<std::size_t>(cell) * 2 + 1];
            }
        term.teacher_nn = nearest_cells(sgrid, tgrid);

        Tensor targets({static_cast<int>(term.cell_index.size()), k});
        for (std::size_t r = 0; r < term.teacher_nn.size(); ++r)
            for (int j = 0; j < k; ++j)
                targets.at2(static_cast<int>(r), j) =
                    parts.teacher_assign.at2(static_cast<int>(term.teacher_nn[r]), j);

        auto svals = ad::reshape(st.values, {sh * sw, c});
        auto sub = ad::gather_rows(svals, term.cell_index,
                                   {static_cast<int>(term.cell_index.size()), c});
        auto p = assignments(sub, parts.protos.centroids, cfg.tau_student);
        auto logp = ad::vlog(ad::add_scalar(p, 1e-12));
        term.ce = ad::mean_all(ad::sum_last(ad::mul(ad::constant(targets), ad::scale(logp, -1.0))));
        total = total ? ad::add(total, term.ce) : term.ce;
        parts.per_student.push_back(std::move(term));
    }
    if (!total) throw validation_error("cpa_loss: need at least one student view");
    parts.loss = ad::scale(total, 1.0 / static_cast<double>(students.size()));
    return parts;
}

// ---- EMA teacher -----------------------------------------------------------------

// teacher <- m * teacher + (1-m) * student for every teacher parameter;
// buffers (running statistics) are copied outright. The teacher registry may
// be a subset of the student's (a prompt-free twin), but every teacher entry
// must exist on the student side.
inline void ema_update(nn::ParamRegistry& teacher, const nn::ParamRegistry& student, double m) {
    for (auto& [name, tv] : teacher.params) {
        Var sv = student.find(name);
        if (!sv) throw validation_error("ema_update: student is missing param " + name);
        if (!same_shape(tv->value, sv->value))
            throw validation_error("ema_update: shape mismatch for " + name);
        for (std::size_t i = 0; i < tv->value.data.size(); ++i)
            tv->value.data[i] = m * tv->value.data[i] + (1.0 - m) * sv->value.data[i];
    }
    for (auto& [name, tb] : teacher.buffers) {
        const std::shared_ptr<Tensor>* sb = nullptr;
        for (const auto& [n, b] : student.buffers)
            if (n == name) sb = &b;
        if (!sb) throw validation_error("ema_update: student is missing buffer " + name);
        *tb = **sb;
    }
}

}  // namespace punet::ss
