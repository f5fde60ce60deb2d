#include <catch2/catch_amalgamated.hpp>

#include "punet/selfsup.hpp"

using namespace punet;
using ad::Var;

namespace {

win::FeatureMap map_from(const Tensor& values, const Tensor& grid) {
    win::FeatureMap f;
    f.values = ad::constant(values);
    f.grid = grid;
    return f;
}

// independent hard k-means step on cosine similarity (uniform weights)
void lloyd_step(const Tensor& feats, const Tensor& grid, Tensor& cent, Tensor& pos) {
    int n = feats.shape[0], c = feats.shape[1], k = cent.shape[0];
    std::vector<int> assign(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double best = -2;
        for (int j = 0; j < k; ++j) {
            double dot = 0, na = 0, nb = 0;
            for (int d = 0; d < c; ++d) {
                dot += feats.at2(i, d) * cent.at2(j, d);
                na += feats.at2(i, d) * feats.at2(i, d);
                nb += cent.at2(j, d) * cent.at2(j, d);
            }
            double cs = dot / std::max(std::sqrt(na * nb), 1e-8);
            if (cs > best) {
                best = cs;
                assign[static_cast<std::size_t>(i)] = j;
            }
        }
    }
    for (int j = 0; j < k; ++j) {
        int cnt = 0;
        std::vector<double> fsum(static_cast<std::size_t>(c), 0.0);
        double pr = 0, pc = 0;
        for (int i = 0; i < n; ++i)
            if (assign[static_cast<std::size_t>(i)] == j) {
                ++cnt;
                for (int d = 0; d < c; ++d) fsum[static_cast<std::size_t>(d)] += feats.at2(i, d);
                pr += grid.at2(i, 0);
                pc += grid.at2(i, 1);
            }
        if (cnt == 0) continue;
        for (int d = 0; d < c; ++d) cent.at2(j, d) = fsum[static_cast<std::size_t>(d)] / cnt;
        pos.at2(j, 0) = pr / cnt;
        pos.at2(j, 1) = pc / cnt;
    }
}

}  // namespace

TEST_CASE("locality weights hit 0.5 at half the fwhm", "[selfsup]") {
    Tensor grid = Tensor::from({3, 2}, {0, 0, 0, 16, 0, 32});
    Tensor pos = Tensor::from({1, 2}, {0, 0});
    Tensor w = ss::spatial_weights(grid, pos, 32.0);
    CHECK(w.at2(0, 0) == Catch::Approx(1.0).margin(1e-15));
    CHECK(w.at2(1, 0) == Catch::Approx(0.5).margin(1e-12));    // distance fwhm/2
    CHECK(w.at2(2, 0) == Catch::Approx(0.0625).margin(1e-12)); // distance fwhm
}

TEST_CASE("prototype seeding samples the block-center lattice", "[selfsup]") {
    Rng rng(4);
    Tensor vals = Tensor::randn({1, 8, 12, 3}, rng);
    Tensor grid = win::make_grid(1, 8, 12, 2.0, 7.0, 3.0);
    auto f = map_from(vals, grid);
    auto p = ss::seed_prototypes(f, 4);
    REQUIRE(p.centroids.shape == Shape{6, 3});
    REQUIRE(p.positions.shape == Shape{6, 2});
    // prototype (a,b) comes from cell (4a+2, 4b+2)
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 3; ++b) {
            int row = a * 3 + b, i = 4 * a + 2, j = 4 * b + 2;
            for (int d = 0; d < 3; ++d)
                CHECK(p.centroids.at2(row, d) ==
                      vals.data[(static_cast<std::size_t>(i) * 12 + j) * 3 + static_cast<std::size_t>(d)]);
            CHECK(p.positions.at2(row, 0) == grid.data[(static_cast<std::size_t>(i) * 12 + j) * 2]);
            CHECK(p.positions.at2(row, 1) == grid.data[(static_cast<std::size_t>(i) * 12 + j) * 2 + 1]);
        }
    CHECK_THROWS_AS(ss::seed_prototypes(f, 5), geometry_error);
}

TEST_CASE("assignments are a Gibbs distribution, sharper at lower temperature", "[selfsup]") {
    Rng rng(9);
    Tensor feats = Tensor::randn({10, 5}, rng);
    Tensor cent = Tensor::randn({4, 5}, rng);
    Tensor sharp = ss::assignments_t(feats, cent, 0.033);
    Tensor broad = ss::assignments_t(feats, cent, 0.066);
    for (int i = 0; i < 10; ++i) {
        double ssum = 0, bsum = 0, smax = 0, bmax = 0;
        for (int j = 0; j < 4; ++j) {
            ssum += sharp.at2(i, j);
            bsum += broad.at2(i, j);
            smax = std::max(smax, sharp.at2(i, j));
            bmax = std::max(bmax, broad.at2(i, j));
        }
        CHECK(ssum == Catch::Approx(1.0).margin(1e-12));
        CHECK(bsum == Catch::Approx(1.0).margin(1e-12));
        CHECK(smax > bmax);
    }

    // autodiff path agrees with the tensor path
    auto v = ss::assignments(ad::constant(feats), cent, 0.066);
    CHECK(max_abs_diff(v->value, broad) < 1e-12);
}

TEST_CASE("hard-assignment limit of one cluster step matches a Lloyd step", "[selfsup]") {
    // four well-separated direction clusters so the soft assignment saturates
    Rng rng(21);
    int per = 6, c = 6;
    Tensor feats({4 * per, c}), grid({4 * per, 2});
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < per; ++i) {
            int row = k * per + i;
            feats.at2(row, k) = 1.0;
            for (int d = 0; d < c; ++d) feats.at2(row, d) += rng.uniform(-0.05, 0.05);
            grid.at2(row, 0) = rng.uniform(0, 50);
            grid.at2(row, 1) = rng.uniform(0, 50);
        }
    ss::Prototypes p;
    p.centroids = Tensor({4, c});
    for (int k = 0; k < 4; ++k) p.centroids.at2(k, k) = 1.0;
    p.positions = Tensor({4, 2});

    Tensor cent_oracle = p.centroids, pos_oracle = p.positions;
    lloyd_step(feats, grid, cent_oracle, pos_oracle);

    auto got = ss::cluster_prototypes(feats, grid, p, 1e9, 1e-4, 1);
    CHECK(max_abs_diff(got.centroids, cent_oracle) < 1e-6);
    CHECK(max_abs_diff(got.positions, pos_oracle) < 1e-6);
}

TEST_CASE("clusters with no effective mass keep their previous state", "[selfsup]") {
    Tensor feats = Tensor::from({2, 2}, {1, 0, 1, 0});
    Tensor grid = Tensor::from({2, 2}, {0, 0, 1, 0});
    ss::Prototypes p;
    p.centroids = Tensor::from({2, 2}, {1, 0, -1, 0});
    p.positions = Tensor::from({2, 2}, {0, 0, 500, 500});  // second prototype far away
    auto got = ss::cluster_prototypes(feats, grid, p, 4.0, 0.01, 3);
    // all mass is near the first prototype; the far one must not move
    CHECK(got.centroids.at2(1, 0) == -1.0);
    CHECK(got.positions.at2(1, 0) == 500.0);
    CHECK(got.positions.at2(1, 1) == 500.0);
    // prototype positions stay inside of the convex hull of contributing cells
    CHECK(got.positions.at2(0, 0) >= 0.0);
    CHECK(got.positions.at2(0, 0) <= 1.0);
}

TEST_CASE("nearest-cell correspondence matches the inverse-affine oracle", "[selfsup]") {
    Tensor tgrid = win::make_grid(1, 8, 8, 2.0, 5.0, 9.0).reshaped({64, 2});
    Rng rng(31);
    Tensor query({40, 2});
    for (int i = 0; i < 40; ++i) {
        query.at2(i, 0) = rng.uniform(4.0, 22.0);
        query.at2(i, 1) = rng.uniform(8.0, 26.0);
    }
    auto got = ss::nearest_cells(query, tgrid);
    for (int i = 0; i < 40; ++i) {
        // centers are origin + 2k + 0.5; invert and clamp
        auto snap = [](double q, double origin) {
            return std::min(std::max(static_cast<int>(std::lround((q - origin - 0.5) / 2.0)), 0), 7);
        };
        std::int64_t want = static_cast<std::int64_t>(snap(query.at2(i, 0), 5.0)) * 8 +
                            snap(query.at2(i, 1), 9.0);
        CHECK(got[static_cast<std::size_t>(i)] == want);
    }
}

TEST_CASE("uniform student beliefs against any target cost exactly ln 2", "[selfsup]") {
    // teacher: left half e1, right half e2; prototypes freeze onto e1/e2;
    // student cells sit exactly between them, so p = (1/2, 1/2) and the soft
    // cross entropy equals ln 2 no matter how sharp the targets are.
    Config cfg = Config::toy();
    cfg.proto_reduction = 2;
    cfg.cluster_iters = 1;
    cfg.fwhm = 1e-3;
    Tensor tvals({1, 2, 4, 2});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) {
            std::size_t at = (static_cast<std::size_t>(i) * 4 + j) * 2;
            tvals.data[at + (j < 2 ? 0 : 1)] = 1.0;
        }
    auto teacher = map_from(tvals, win::make_grid(1, 2, 4, 1.0));

    double r = 1.0 / std::sqrt(2.0);
    Tensor svals = Tensor::full({1, 2, 2, 2}, r);
    auto student = map_from(svals, win::make_grid(1, 2, 2, 1.0));

    Rng rng(2);
    auto parts = ss::cpa_loss(teacher, {student}, cfg, rng);
    REQUIRE(parts.protos.centroids.shape == Shape{2, 2});
    CHECK(parts.protos.centroids.at2(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(parts.protos.centroids.at2(1, 1) == Catch::Approx(1.0).margin(1e-12));
    CHECK(parts.loss->value.data[0] == Catch::Approx(std::log(2.0)).margin(1e-9));
}

TEST_CASE("loss gradients reach students but never the teacher", "[selfsup]") {
    Config cfg = Config::toy();
    cfg.proto_reduction = 4;
    cfg.cluster_iters = 2;
    cfg.fwhm = 16.0;
    Rng rng(12);
    Var tvar = ad::param(Tensor::randn({1, 8, 8, 6}, rng));
    win::FeatureMap teacher{tvar, win::make_grid(1, 8, 8, 2.0)};
    Var s1 = ad::param(Tensor::randn({1, 8, 8, 6}, rng));
    Var s2 = ad::param(Tensor::randn({1, 4, 4, 6}, rng));
    win::FeatureMap st1{s1, win::make_grid(1, 8, 8, 2.0)};
    win::FeatureMap st2{s2, win::make_grid(1, 4, 4, 4.0)};

    Rng jit(7);
    auto parts = ss::cpa_loss(teacher, {st1, st2}, cfg, jit);
    REQUIRE(parts.per_student.size() == 2);
    CHECK(parts.per_student[0].cell_index.size() == 16);
    CHECK(parts.per_student[1].cell_index.size() == 4);
    REQUIRE(std::isfinite(parts.loss->value.data[0]));
    ad::backward(parts.loss);

    CHECK(tvar->grad.numel() == 0);  // teacher features are used value-only
    REQUIRE(s1->grad.numel() == s1->value.numel());
    REQUIRE(s2->grad.numel() == s2->value.numel());
    CHECK(s1->grad.abs_max() > 0.0);
    CHECK(s2->grad.abs_max() > 0.0);
}

TEST_CASE("students descend toward teacher assignments under gradient steps", "[selfsup]") {
    Config cfg = Config::toy();
    cfg.proto_reduction = 4;
    cfg.cluster_iters = 1;
    cfg.fwhm = 64.0;
    Rng rng(5);
    Tensor tvals = Tensor::randn({1, 8, 8, 4}, rng);
    win::FeatureMap teacher{ad::constant(tvals), win::make_grid(1, 8, 8, 1.0)};
    Var svar = ad::param(Tensor::randn({1, 8, 8, 4}, rng));

    double first = 0, last = 0;
    for (int step = 0; step < 50; ++step) {
        win::FeatureMap student{svar, win::make_grid(1, 8, 8, 1.0)};
        Rng jit(3);  // frozen jitter keeps the objective stationary
        auto parts = ss::cpa_loss(teacher, {student}, cfg, jit);
        if (step == 0) first = parts.loss->value.data[0];
        last = parts.loss->value.data[0];
        svar->grad = Tensor();
        ad::backward(parts.loss);
        for (std::size_t i = 0; i < svar->value.data.size(); ++i)
            svar->value.data[i] -= 0.5 * svar->grad.data[i];
    }
    CHECK(last < first - 0.05);
}

TEST_CASE("view sets nest students inside the teacher region", "[selfsup]") {
    Config cfg = Config::toy();
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 31);

    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        auto vs = ss::make_views(ds.slices[0], cfg, rng);
        CHECK(vs.teacher.rec.fov == 64);
        CHECK(vs.teacher.rec.block == 0);
        CHECK(vs.students[0].rec.fov == 64);
        CHECK(vs.students[1].rec.fov == 32);
        for (const auto& st : vs.students) CHECK(st.rec.block > 0);

        auto [cr, cc] = ss::detail::view_center(vs.teacher.rec);
        for (const auto& st : vs.students) {
            int fov = st.rec.fov;
            int inside = 0;
            for (int i = 0; i < fov; ++i)
                for (int j = 0; j < fov; ++j) {
                    double gr = st.grid.data[(static_cast<std::int64_t>(i) * fov + j) * 2];
                    double gc = st.grid.data[(static_cast<std::int64_t>(i) * fov + j) * 2 + 1];
                    bool in = std::fabs(gr - cr) <= 32.0 && std::fabs(gc - cc) <= 32.0;
                    inside += in ? 1 : 0;
                    CHECK(std::fabs(gr - cr) <= 52.0);
                    CHECK(std::fabs(gc - cc) <= 52.0);
                }
            CHECK(inside > static_cast<int>(0.65 * fov * fov));
        }
    }

    Rng a(77), b(77);
    auto va = ss::make_views(ds.slices[0], cfg, a);
    auto vb = ss::make_views(ds.slices[0], cfg, b);
    CHECK(max_abs_diff(va.students[0].image, vb.students[0].image) == 0.0);
}

TEST_CASE("ema update blends parameters and copies buffers", "[selfsup]") {
    nn::ParamRegistry teacher, student;
    teacher.add("w", ad::param(Tensor::from({2}, {1.0, 2.0})));
    student.add("w", ad::param(Tensor::from({2}, {3.0, 4.0})));
    student.add("head.extra", ad::param(Tensor::from({1}, {9.0})));  // prompt side only
    auto tb = std::make_shared<Tensor>(Tensor::from({1}, {0.5}));
    auto sb = std::make_shared<Tensor>(Tensor::from({1}, {0.9}));
    teacher.add_buffer("bn.running_mean", tb);
    student.add_buffer("bn.running_mean", sb);

    ss::ema_update(teacher, student, 0.9);
    CHECK(teacher.at("w")->value.data[0] == Catch::Approx(1.2).margin(1e-12));
    CHECK(teacher.at("w")->value.data[1] == Catch::Approx(2.2).margin(1e-12));
    CHECK(tb->data[0] == 0.9);

    nn::ParamRegistry broken;
    broken.add("nope", ad::param(Tensor::from({1}, {0.0})));
    CHECK_THROWS_AS(ss::ema_update(broken, student, 0.9), validation_error);
}
