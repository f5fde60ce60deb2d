#include <catch2/catch_amalgamated.hpp>

#include <limits>

#include "punet/optim.hpp"

using namespace punet;
using ad::Var;

namespace {

opt::Entry entry(Var v, double mult = 1.0, bool decay = true) { return {std::move(v), mult, decay}; }

}  // namespace

TEST_CASE("adamw first step matches the closed form", "[optim]") {
    Var p = ad::param(Tensor::from({2}, {1.0, -2.0}));
    p->grad = Tensor::from({2}, {0.5, -1.0});
    double lr = 0.1, wd = 0.1, eps = 1e-8;
    opt::AdamW opt({entry(p)}, lr, wd);
    opt.step();
    for (std::size_t j = 0; j < 2; ++j) {
        double v0 = j == 0 ? 1.0 : -2.0;
        double g = j == 0 ? 0.5 : -1.0;
        // bias correction makes the first-step moments exactly g and g^2
        double v1 = v0 - lr * g / (std::abs(g) + eps);
        double want = v1 - lr * wd * v1;
        CHECK(p->value.data[j] == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("weight decay is decoupled and gated per entry", "[optim]") {
    Var decayed = ad::param(Tensor::from({1}, {1.0}));
    Var plain = ad::param(Tensor::from({1}, {1.0}));
    decayed->grad = Tensor::from({1}, {0.0});
    plain->grad = Tensor::from({1}, {0.0});
    opt::AdamW opt({entry(decayed, 1.0, true), entry(plain, 1.0, false)}, 0.1, 0.5);
    opt.step();
    // zero gradient: the adam update vanishes (0 / (0 + eps)), leaving decay only
    CHECK(decayed->value.data[0] == Catch::Approx(1.0 - 0.1 * 0.5).margin(1e-12));
    CHECK(plain->value.data[0] == 1.0);
}

TEST_CASE("entries without gradients are skipped, non-finite ones rejected", "[optim]") {
    Var idle = ad::param(Tensor::from({1}, {3.0}));
    opt::AdamW opt({entry(idle)}, 0.1, 0.1);
    opt.step();
    CHECK(idle->value.data[0] == 3.0);

    Var bad = ad::param(Tensor::from({1}, {1.0}));
    bad->grad = Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()});
    opt::AdamW broken({entry(bad)}, 0.1, 0.0);
    CHECK_THROWS_AS(broken.step(), numeric_error);

    opt::SGD sgd({entry(bad)}, 0.1);
    CHECK_THROWS_AS(sgd.step(), numeric_error);
}

TEST_CASE("per-entry learning-rate multipliers scale the update", "[optim]") {
    Var slow = ad::param(Tensor::from({1}, {1.0}));
    Var fast = ad::param(Tensor::from({1}, {1.0}));
    slow->grad = Tensor::from({1}, {0.5});
    fast->grad = Tensor::from({1}, {0.5});
    opt::AdamW opt({entry(slow, 1.0, false), entry(fast, 10.0, false)}, 0.01, 0.0);
    opt.step();
    double d_slow = 1.0 - slow->value.data[0];
    double d_fast = 1.0 - fast->value.data[0];
    CHECK(d_fast / d_slow == Catch::Approx(10.0).margin(1e-9));
}

TEST_CASE("zero_grad clears gradients so stale ones cannot leak", "[optim]") {
    Var p = ad::param(Tensor::from({1}, {1.0}));
    p->grad = Tensor::from({1}, {2.0});
    opt::SGD sgd({entry(p)}, 0.25);
    sgd.step();
    CHECK(p->value.data[0] == Catch::Approx(0.5).margin(1e-12));
    sgd.zero_grad();
    CHECK(p->grad.numel() == 0);
    sgd.step();
    CHECK(p->value.data[0] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("entry building honours masks, decay rules and prompt multipliers", "[optim]") {
    nn::ParamRegistry reg;
    reg.add("enc0.conv.w", ad::param(Tensor::zeros({3, 3})));
    reg.add("enc0.conv.b", ad::param(Tensor::zeros({3})));
    reg.add("prompt.organ.bank00", ad::param(Tensor::zeros({4, 4})));
    reg.add("prompt.organ.p_seg", ad::param(Tensor::zeros({4, 4})));

    auto entries = opt::entries_for(reg, {true, true, true, true}, 10.0);
    REQUIRE(entries.size() == 4);
    CHECK(entries[0].decay);
    CHECK(entries[0].lr_mult == 1.0);
    CHECK_FALSE(entries[1].decay);  // one-dimensional
    CHECK_FALSE(entries[2].decay);  // prompt namespace
    CHECK(entries[2].lr_mult == 10.0);
    CHECK(entries[3].lr_mult == 10.0);

    auto masked = opt::entries_for(reg, {true, false, true, false}, 1.0);
    CHECK(masked.size() == 2);
    CHECK_THROWS_AS(opt::entries_for(reg, {true, true}, 1.0), validation_error);
}

TEST_CASE("one-cycle schedule warms up to the peak then decays", "[optim]") {
    double peak = 1.0;
    int total = 11;
    CHECK(opt::one_cycle_lr(peak, 0, total) == Catch::Approx(peak / 10.0).margin(1e-12));
    CHECK(opt::one_cycle_lr(peak, 3, total) == Catch::Approx(peak).margin(1e-12));
    CHECK(opt::one_cycle_lr(peak, total - 1, total) == Catch::Approx(peak / 100.0).margin(1e-12));
    for (int s = 1; s <= 3; ++s)
        CHECK(opt::one_cycle_lr(peak, s, total) > opt::one_cycle_lr(peak, s - 1, total));
    for (int s = 4; s < total; ++s)
        CHECK(opt::one_cycle_lr(peak, s, total) < opt::one_cycle_lr(peak, s - 1, total));
    CHECK(opt::one_cycle_lr(peak, 0, 1) == Catch::Approx(peak / 100.0).margin(1e-12));
    CHECK_THROWS_AS(opt::one_cycle_lr(peak, 0, 0), validation_error);
}
