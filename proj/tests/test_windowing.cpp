#include <catch2/catch_amalgamated.hpp>

#include "punet/windowing.hpp"

using namespace punet;

namespace {
ad::Var ramp_map(int B, int H, int W, int C) {
    Tensor t({B, H, W, C});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<double>(i);
    return ad::param(t);
}
}  // namespace

TEST_CASE("partition lays out windows batch-major with exact contents", "[windowing]") {
    auto x = ramp_map(1, 4, 4, 1);
    auto wc = win::partition(x, 2);
    REQUIRE(wc.windows->value.shape == Shape{4, 4, 1});
    // second window covers cols 2..3 of rows 0..1
    CHECK(wc.windows->value[4] == 2.0);
    CHECK(wc.windows->value[5] == 3.0);
    CHECK(wc.windows->value[6] == 6.0);
    CHECK(wc.windows->value[7] == 7.0);
    // third window covers rows 2..3 cols 0..1
    CHECK(wc.windows->value[8] == 8.0);
    CHECK(wc.provenance.size() == 16);
}

TEST_CASE("reverse undoes partition exactly", "[windowing]") {
    Rng rng(31);
    auto x = ad::param(Tensor::randn({2, 6, 4, 3}, rng));
    auto wc = win::partition(x, 2);
    auto back = win::reverse_windows(wc);
    REQUIRE(back->value.shape == x->value.shape);
    CHECK(max_abs_diff(back->value, x->value) == 0.0);

    // gradients route through the bijection exactly
    auto loss = ad::sum_all(ad::mul(back, back));
    ad::backward(loss);
    for (std::int64_t i = 0; i < x->value.numel(); ++i)
        CHECK(x->grad[i] == 2.0 * x->value[i]);
}

TEST_CASE("partition rejects non-divisible maps", "[windowing]") {
    auto x = ramp_map(1, 6, 6, 1);
    CHECK_THROWS_AS(win::partition(x, 4), geometry_error);
}

TEST_CASE("corrupt provenance is rejected", "[windowing]") {
    auto x = ramp_map(1, 4, 4, 1);
    auto wc = win::partition(x, 2);
    wc.provenance[3] = wc.provenance[2];  // duplicate: no longer a bijection
    CHECK_THROWS_AS(win::reverse_windows(wc), geometry_error);

    auto wc2 = win::partition(x, 2);
    wc2.provenance.pop_back();
    CHECK_THROWS_AS(win::reverse_windows(wc2), geometry_error);
}

TEST_CASE("cyclic shift moves values and grid together and round-trips", "[windowing]") {
    Rng rng(32);
    win::FeatureMap fm{ad::param(Tensor::randn({1, 4, 6, 2}, rng)), win::make_grid(1, 4, 6, 1.0)};
    auto shifted = win::cyclic_shift(fm, 1, 2);

    // value at (0,0) lands at (1,2)
    auto at = [&](const Tensor& t, int i, int j, int c) {
        return t.data[((static_cast<std::int64_t>(i)) * 6 + j) * t.shape[3] + c];
    };
    CHECK(at(shifted.values->value, 1, 2, 0) == at(fm.values->value, 0, 0, 0));
    CHECK(at(shifted.grid, 1, 2, 0) == at(fm.grid, 0, 0, 0));
    CHECK(at(shifted.grid, 1, 2, 1) == at(fm.grid, 0, 0, 1));

    auto back = win::cyclic_shift(shifted, -1, -2);
    CHECK(max_abs_diff(back.values->value, fm.values->value) == 0.0);
    CHECK(max_abs_diff(back.grid, fm.grid) == 0.0);

    // full-period shift is the identity
    auto full = win::cyclic_shift(fm, 4, 6);
    CHECK(max_abs_diff(full.values->value, fm.values->value) == 0.0);
}

TEST_CASE("grids carry stride and origin", "[windowing]") {
    Tensor g = win::make_grid(1, 4, 4, 1.0);
    CHECK(g.data[0] == 0.0);
    CHECK(g.data[1] == 0.0);

    Tensor g2 = win::make_grid(1, 4, 4, 2.0, 10.0, 20.0);
    CHECK(g2.data[0] == 10.5);   // 10 + 2*0.5 - 0.5
    CHECK(g2.data[1] == 20.5);
    CHECK(g2.data[2 * (4 + 1)] == 12.5);  // next row center

    // resampling a stride-1 grid to stride 2 matches a directly built stride-2 grid
    Tensor fine = win::make_grid(2, 8, 8, 1.0, 3.0, 4.0);
    Tensor coarse = win::grid_at_stride(fine, 2);
    Tensor want = win::make_grid(2, 4, 4, 2.0, 3.0, 4.0);
    CHECK(max_abs_diff(coarse, want) < 1e-12);
}
