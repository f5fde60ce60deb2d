#pragma once

#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "punet/attention.hpp"
#include "punet/gradcheck.hpp"
#include "punet/pswin.hpp"
#include "punet/punet.hpp"
#include "punet/seghead.hpp"
#include "punet/selfsup.hpp"
#include "punet/supervise.hpp"

namespace punet::hn {

namespace gsd {

inline Tensor uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

inline ad::Var probe(const ad::Var& x, const Tensor& r) {
    return ad::sum_all(ad::mul(x, ad::constant(r)));
}

}  // namespace gsd

// Every case rebuilds its graph from the current leaf values on call, so the
// finite-difference driver can perturb leaves in place. Constants (probe
// coefficients, labels, layer geometry) are frozen at construction.
inline std::vector<gradcheck::FnSpec> gradcheck_suite(Rng rng) {
    std::vector<gradcheck::FnSpec> specs;

    {  // linear shape plumbing: central differences are exact up to roundoff
        ad::Var a = ad::param(Tensor::randn({4, 3}, rng, 0.8));
        ad::Var b = ad::param(Tensor::randn({3, 5}, rng, 0.8));
        ad::Var w = ad::param(Tensor::randn({2, 5}, rng, 0.8));
        ad::Var v = ad::param(Tensor::randn({5}, rng, 0.8));
        Tensor r1 = Tensor::randn({2, 4}, rng, 1.0);
        Tensor r2 = Tensor::randn({4, 6}, rng, 1.0);
        Tensor r3 = Tensor::randn({2, 4, 5}, rng, 1.0);
        Tensor r4 = Tensor::randn({4}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "linear_maps";
        fn.tolerance = 1e-9;
        fn.inputs = {a, b, w, v};
        fn.forward = [=]() {
            auto m1 = ad::matmul(a, b);
            auto m2 = ad::add_rowvec(m1, v);
            auto m3 = ad::matmul_nt(m2, w);
            auto t = ad::transpose2d(m3);
            auto cr = ad::concat_rows({ad::slice_rows(m2, 1, 2), ad::slice_rows(m2, 0, 2)});
            auto cl = ad::concat_last({a, ad::slice_last(m2, 1, 3)});
            auto g = ad::gather_rows(m2, {2, 0, 3});
            auto cd = ad::concat_dim1(ad::reshape(m1, {2, 2, 5}), ad::reshape(cr, {2, 2, 5}));
            auto loss = ad::add(gsd::probe(t, r1), gsd::probe(cl, r2));
            loss = ad::add(loss, gsd::probe(cd, r3));
            loss = ad::add(loss, gsd::probe(ad::sum_last(m3), r4));
            loss = ad::add(loss, ad::scale(ad::sum_all(g), 0.5));
            return ad::add(loss, ad::mean_all(ad::sub(m1, cr)));
        };
        specs.push_back(std::move(fn));
    }

    {  // smooth pointwise chain, inputs kept away from kinks
        ad::Var p = ad::param(gsd::uniform_tensor({3, 4}, rng, 0.4, 1.3));
        ad::Var q = ad::param(gsd::uniform_tensor({3, 4}, rng, 0.2, 0.8));
        ad::Var s = ad::param(gsd::uniform_tensor({3}, rng, 0.5, 1.5));
        gradcheck::FnSpec fn;
        fn.name = "pointwise_chain";
        fn.tolerance = 1e-6;
        fn.inputs = {p, q, s};
        fn.forward = [=]() {
            auto c1 = ad::mul(p, q);
            auto c2 = ad::leaky_relu(ad::sub(c1, ad::scale(q, 0.6)), 0.07);
            auto c3 = ad::add_scalar(c2, 1.6);
            auto c4 = ad::vlog(c3);
            auto c5 = ad::vexp(ad::scale(c4, 0.4));
            auto c6 = ad::pow_const(c5, 1.7);
            auto c7 = ad::maximum_scalar(c6, 0.9);
            auto c8 = ad::mul_colscalar(c7, s);
            return ad::add(ad::mean_all(c8), ad::scale(ad::sum_all(c5), 0.05));
        };
        specs.push_back(std::move(fn));
    }

    {  // softmax rows plus row/column gathers
        ad::Var a = ad::param(Tensor::randn({5, 6}, rng, 1.0));
        Tensor r1 = Tensor::randn({3, 3}, rng, 1.0);
        Tensor r2 = Tensor::randn({5, 6}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "softmax_gather";
        fn.tolerance = 1e-6;
        fn.inputs = {a};
        fn.forward = [=]() {
            auto sm = ad::softmax_lastdim(ad::scale(a, 1.3));
            auto g = ad::gather_rows(sm, {4, 1, 3});
            auto rg = ad::row_gather_cols(g, {{0, 2, 5}, {1, 3, 0}, {2, 4, 1}});
            return ad::add(gsd::probe(rg, r1), gsd::probe(sm, r2));
        };
        specs.push_back(std::move(fn));
    }

    {  // head split/merge and batched products with grouped bias
        ad::Var q = ad::param(Tensor::randn({6, 4}, rng, 0.7));
        ad::Var k = ad::param(Tensor::randn({6, 4}, rng, 0.7));
        ad::Var v = ad::param(Tensor::randn({6, 4}, rng, 0.7));
        ad::Var bias = ad::param(Tensor::randn({2, 6, 6}, rng, 0.3));
        Tensor r = Tensor::randn({6, 4}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "attention_ops";
        fn.tolerance = 1e-5;
        fn.inputs = {q, k, v, bias};
        fn.forward = [=]() {
            auto qh = ad::reshape(ad::split_heads(q, 2), {2, 6, 2});
            auto kh = ad::reshape(ad::split_heads(k, 2), {2, 6, 2});
            auto vh = ad::reshape(ad::split_heads(v, 2), {2, 6, 2});
            auto att = ad::scale(ad::bmm_nt(qh, kh), 1.0 / std::sqrt(2.0));
            auto biased = ad::add_bias_grouped(att, bias);
            auto w = ad::reshape(ad::softmax_lastdim(ad::reshape(biased, {12, 6})), {2, 6, 6});
            auto mh = ad::merge_heads(ad::reshape(ad::bmm(w, vh), {12, 2}), 2);
            return gsd::probe(mh, r);
        };
        specs.push_back(std::move(fn));
    }

    {  // convolutions, spatial reductions and bilinear upsampling
        ad::Var x = ad::param(Tensor::randn({1, 6, 6, 2}, rng, 0.8));
        ad::Var w1 = ad::param(Tensor::randn({3, 3, 2, 3}, rng, 0.4));
        ad::Var b1 = ad::param(Tensor::randn({3}, rng, 0.2));
        ad::Var w2 = ad::param(Tensor::randn({3, 3, 3, 4}, rng, 0.4));
        ad::Var b2 = ad::param(Tensor::randn({4}, rng, 0.2));
        Tensor r = Tensor::randn({1, 6, 6, 4}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "conv_spatial";
        fn.tolerance = 1e-5;
        fn.inputs = {x, w1, b1, w2, b2};
        fn.forward = [=]() {
            auto c1 = ad::conv2d(x, w1, b1, 1, 1);
            auto d = ad::sub(c1, ad::broadcast_channel(ad::reduce_mean_bhw(c1), 1, 6, 6));
            auto c2 = ad::conv2d(d, w2, b2, 2, 1);
            auto m2 = ad::reduce_mean_spatial(c2);
            auto e = ad::sub(c2, ad::broadcast_spatial(m2, 3, 3));
            auto u = ad::upsample_bilinear2x(e);
            return ad::add(gsd::probe(u, r), ad::scale(ad::sum_all(m2), 0.1));
        };
        specs.push_back(std::move(fn));
    }

    {  // one prompt-mixing attention layer with prompts and bias table
        auto layer = std::make_shared<att::PMALayer>(att::PMALayer::make(4, 2, 2, 4, rng));
        ad::Var x = ad::param(Tensor::randn({1, 2, 2, 4}, rng, 0.8));
        ad::Var tokens = ad::param(Tensor::randn({2, 4}, rng, 0.8));
        ad::Var embed = ad::param(Tensor::randn({2, 4}, rng, 0.8));
        nn::ParamRegistry reg;
        layer->register_into(reg, "pma");
        gradcheck::FnSpec fn;
        fn.name = "pma_toy";
        fn.tolerance = 1e-4;
        fn.inputs = reg.param_vars();
        fn.inputs.push_back(x);
        fn.inputs.push_back(tokens);
        fn.inputs.push_back(embed);
        auto run = [layer, x, tokens, embed]() {
            auto wc = win::partition(x, 2);
            return att::pma_forward(*layer, wc, {att::PromptTokens{tokens, embed}}, true);
        };
        Tensor r = Tensor::randn(run()->value.shape, rng, 1.0);
        fn.forward = [=]() { return gsd::probe(run(), r); };
        specs.push_back(std::move(fn));
    }

    {  // a full residual attention block on a feature map
        Rng brng = rng.stream("pswin");
        auto block = std::make_shared<blk::PSWinBlock>(blk::PSWinBlock::make(4, 2, 2, 4, brng));
        ad::Var values = ad::param(Tensor::randn({1, 4, 4, 4}, rng, 0.6));
        ad::Var ta = ad::param(Tensor::randn({2, 4}, rng, 0.6));
        ad::Var ea = ad::param(Tensor::randn({2, 4}, rng, 0.6));
        ad::Var tb = ad::param(Tensor::randn({2, 4}, rng, 0.6));
        ad::Var eb = ad::param(Tensor::randn({2, 4}, rng, 0.6));
        Tensor grid = win::make_grid(1, 4, 4, 1.0);
        Tensor r = Tensor::randn({1, 4, 4, 4}, rng, 1.0);
        nn::ParamRegistry reg;
        block->register_into(reg, "blk");
        gradcheck::FnSpec fn;
        fn.name = "pswin_toy";
        fn.tolerance = 1e-4;
        fn.inputs = reg.param_vars();
        fn.inputs.insert(fn.inputs.end(), {values, ta, ea, tb, eb});
        fn.forward = [=]() {
            win::FeatureMap fm{values, grid};
            blk::BlockPrompts bp{att::PromptTokens{ta, ea}, att::PromptTokens{tb, eb}};
            return gsd::probe(blk::pswin_forward(*block, fm, {bp}, true).values, r);
        };
        specs.push_back(std::move(fn));
    }

    {  // token aggregation, mean variant (linear)
        ad::Var sim = ad::param(Tensor::randn({3, 2, 4}, rng, 1.0));
        Tensor r = Tensor::randn({3, 2}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "aggregate_mean";
        fn.tolerance = 1e-9;
        fn.inputs = {sim};
        fn.forward = [=]() {
            return gsd::probe(head::aggregate_scores(sim, head::AggVariant::mean, 0.1, 2), r);
        };
        specs.push_back(std::move(fn));
    }

    {  // token aggregation, top-k variant; values spaced to keep the
        // selection stable under finite-difference steps
        Tensor simv({3, 2, 4});
        for (std::size_t i = 0; i < simv.data.size(); ++i)
            simv.data[i] = -1.0 + 0.09 * static_cast<double>((i * 7) % 23);
        ad::Var sim = ad::param(std::move(simv));
        Tensor r = Tensor::randn({3, 2}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "aggregate_topk";
        fn.tolerance = 1e-7;
        fn.inputs = {sim};
        fn.forward = [=]() {
            return gsd::probe(head::aggregate_scores(sim, head::AggVariant::topk, 0.1, 2), r);
        };
        specs.push_back(std::move(fn));
    }

    {  // focal loss over a small score map
        ad::Var scores = ad::param(Tensor::randn({1, 4, 4, 3}, rng, 1.0));
        Tensor labels({1, 4, 4});
        for (std::size_t i = 0; i < labels.data.size(); ++i)
            labels.data[i] = static_cast<double>(i % 3);
        std::vector<double> alpha = {1.0, 1.3, 0.7};
        gradcheck::FnSpec fn;
        fn.name = "focal_toy";
        fn.tolerance = 1e-5;
        fn.inputs = {scores};
        fn.forward = [=]() { return sup::focal_loss(scores, labels, alpha, 2.0); };
        specs.push_back(std::move(fn));
    }

    {  // contrastive prototype assignment against a fixed teacher map
        Config cfg = Config::toy();
        cfg.proto_reduction = 2;  // 2x2 prototypes on the 4x4 teacher map
        cfg.tau_teacher = 0.25;
        cfg.tau_student = 0.5;
        ad::Var s1 = ad::param(Tensor::randn({1, 4, 4, 3}, rng, 0.5));
        ad::Var s2 = ad::param(Tensor::randn({1, 2, 2, 3}, rng, 0.5));
        ad::Var tv = ad::constant(Tensor::randn({1, 4, 4, 3}, rng, 0.5));
        Tensor tgrid = win::make_grid(1, 4, 4, 1.0);
        Tensor g1 = win::make_grid(1, 4, 4, 1.0);
        Tensor g2 = win::make_grid(1, 2, 2, 2.0);
        Rng cparng = rng.stream("cpa");
        gradcheck::FnSpec fn;
        fn.name = "cpa_toy";
        fn.tolerance = 1e-4;
        fn.inputs = {s1, s2};
        fn.forward = [=]() {
            win::FeatureMap teacher{tv, tgrid};
            std::vector<win::FeatureMap> students = {{s1, g1}, {s2, g2}};
            Rng r = cparng;
            return ss::cpa_loss(teacher, students, cfg, r).loss;
        };
        specs.push_back(std::move(fn));
    }

    {  // the whole network end to end at a micro geometry
        Config cfg;
        cfg.levels = 2;
        cfg.channels = {4, 8};
        cfg.window = 2;
        cfg.heads = 2;
        cfg.bias_channels = 4;
        cfg.tokens_per_class = 2;
        cfg.topk_k = 2;
        cfg.fov_teacher = 16;
        cfg.fov_student1 = 16;
        cfg.fov_student2 = 8;
        cfg.agg_variant = "mean";
        auto model = std::make_shared<net::PUNet>(cfg, rng.stream("micro"));
        auto store = std::make_shared<head::PromptStore>(model->head_geometry());
        store->create_task("t", {"bg", "fg"}, cfg.tokens_per_class, rng.stream("micro.prompt"));
        Tensor images = gsd::uniform_tensor({1, 16, 16}, rng, 0.0, 1.0);
        Tensor grid = win::make_grid(1, 16, 16, 1.0);
        Tensor r = Tensor::randn({1, 16, 16, 2}, rng, 1.0);
        gradcheck::FnSpec fn;
        fn.name = "punet_micro";
        fn.tolerance = 1e-4;
        fn.inputs = net::combined_registry(*model, *store).param_vars();
        fn.forward = [=]() {
            head::Selection sel;
            sel.set = &store->task("t");
            sel.classes = {0, 1};
            net::ForwardOptions opt{true, true, true};
            return gsd::probe(model->segment(images, grid, {sel}, opt).scores, r);
        };
        specs.push_back(std::move(fn));
    }

    return specs;
}

// The softmax aggregation treats its weights as constants in backward, so a
// finite-difference probe would disagree by design. The gradient of each
// similarity must instead equal its (recomputed) weight times the probe
// coefficient.
inline gradcheck::Report aggregate_contract_check(Rng rng) {
    const int R = 4, M = 3, T = 5;
    const double tau = 0.07;
    ad::Var sim = ad::param(Tensor::randn({R, M, T}, rng, 1.0));
    Tensor coeff = Tensor::randn({R, M}, rng, 1.0);

    auto out = head::aggregate_scores(sim, head::AggVariant::softmax, tau, 1);
    ad::backward(ad::sum_all(ad::mul(out, ad::constant(coeff))));

    gradcheck::Report rep;
    rep.name = "aggregate_softmax_fixed_weights";
    rep.tolerance = 1e-6;
    for (int rr = 0; rr < R; ++rr)
        for (int m = 0; m < M; ++m) {
            const double* row = sim->value.data.data() + (static_cast<std::int64_t>(rr) * M + m) * T;
            double mx = row[0];
            for (int t = 1; t < T; ++t) mx = std::max(mx, row[t]);
            double z = 0.0;
            std::vector<double> w(T);
            for (int t = 0; t < T; ++t) z += (w[static_cast<std::size_t>(t)] = std::exp((row[t] - mx) / tau));
            for (int t = 0; t < T; ++t) {
                double want = coeff[static_cast<std::int64_t>(rr) * M + m] *
                              w[static_cast<std::size_t>(t)] / z;
                double got = sim->grad[(static_cast<std::int64_t>(rr) * M + m) * T + t];
                double rel = std::fabs(got - want) / std::max({1.0, std::fabs(got), std::fabs(want)});
                if (rel > rep.max_rel_err) {
                    rep.max_rel_err = rel;
                    rep.worst_coord = "sim[" + std::to_string(rr) + "," + std::to_string(m) + "," +
                                      std::to_string(t) + "] analytic=" + std::to_string(got) +
                                      " expected=" + std::to_string(want);
                }
                ++rep.coords_checked;
            }
        }
    return rep;
}

struct SuiteReport {
    std::vector<gradcheck::Report> reports;  // contract check last
    std::set<std::string> covered;
    std::vector<std::string> uncovered;  // constructed differentiably, hit by no case
    bool all_cases_passed = false;

    bool passed() const { return all_cases_passed && uncovered.empty(); }
};

inline void collect_ops(const ad::Var& root, std::set<std::string>& out) {
    std::vector<const ad::Node*> stack{root.get()};
    std::set<const ad::Node*> seen{root.get()};
    while (!stack.empty()) {
        const ad::Node* n = stack.back();
        stack.pop_back();
        if (std::string_view(n->op) != "leaf") out.insert(n->op);
        for (const auto& p : n->parents)
            if (p && seen.insert(p.get()).second) stack.push_back(p.get());
    }
}

// Runs every case, walks each case graph for the operations it covers, and
// compares against every operation constructed on a live tape while the suite
// ran. An operation that reaches the tape without a covering case fails the
// suite even if nothing else does.
inline SuiteReport run_gradcheck_suite(Rng rng, int max_coords = 300) {
    ad::OpTrackingGuard track;
    ad::ops_constructed().clear();

    SuiteReport sr;
    sr.all_cases_passed = true;
    auto specs = gradcheck_suite(rng.stream("cases"));
    for (auto& fn : specs) {
        auto rep = gradcheck::check(fn, rng.stream("check." + fn.name), max_coords);
        sr.all_cases_passed = sr.all_cases_passed && rep.passed();
        collect_ops(fn.forward(), sr.covered);
        sr.reports.push_back(std::move(rep));
    }
    auto contract = aggregate_contract_check(rng.stream("contract"));
    sr.all_cases_passed = sr.all_cases_passed && contract.passed();
    sr.reports.push_back(std::move(contract));

    for (const auto& op : ad::ops_constructed())
        if (!sr.covered.count(op)) sr.uncovered.push_back(op);
    return sr;
}

}  // namespace punet::hn
