#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "relmatch/losses.hpp"
#include "relmatch/model.hpp"

#include "oracles.hpp"

using namespace relmatch;

namespace {

Vec random_distribution(Rng& rng, int n) {
    Vec logits(static_cast<std::size_t>(n));
    for (double& v : logits) v = rng.uniform(-2.0, 2.0);
    return softmax(logits);
}

// Central finite differences of an arbitrary scalar functional of the
// parameters.
template <class LossFn>
GradientSet finite_difference(ModelParams params, LossFn&& loss_fn, double eps) {
    GradientSet fd = GradientSet::zeros(params.shape);
    auto* fd_arrays = static_cast<ParameterArrays*>(&fd);
    params.for_each_array([&](const char* name, Vec& values) {
        Vec* target = nullptr;
        fd_arrays->for_each_array([&](const char* fd_name, Vec& fd_values) {
            if (std::string(name) == fd_name) target = &fd_values;
        });
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + eps;
            const double up = loss_fn(params);
            values[i] = keep - eps;
            const double down = loss_fn(params);
            values[i] = keep;
            (*target)[i] = (up - down) / (2.0 * eps);
        }
    });
    return fd;
}

}  // namespace

TEST_CASE("softmax is shift invariant and normalized") {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        Vec logits(static_cast<std::size_t>(2 + rng.uniform_index(6)));
        for (double& v : logits) v = rng.uniform(-5.0, 5.0);
        const Vec p = softmax(logits);
        double sum = 0.0;
        for (double v : p) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        Vec shifted = logits;
        for (double& v : shifted) v += 13.25;
        const Vec q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-9);
    }
}

TEST_CASE("category_forward with zero weights is uniform") {
    ModelShape shape{.d_in = 3, .hidden = 4, .d_feat = 4, .categories = 5, .relations = 3};
    ModelParams params;
    params.allocate(shape);
    const Vec p = category_forward(params, {0.5, -1.0, 2.0});
    for (double v : p) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("category_forward normalizes random models") {
    Rng rng(5);
    ModelShape shape{.d_in = 4, .hidden = 6, .d_feat = 5, .categories = 7, .relations = 3};
    for (int t = 0; t < 10; ++t) {
        const ModelParams params = ModelParams::initialized(shape, rng);
        Vec x(4);
        for (double& v : x) v = rng.gaussian();
        const Vec p = category_forward(params, x);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK_THROWS_AS(category_forward(ModelParams::initialized(shape, rng), {1.0}), ValidationError);
}

TEST_CASE("category logits (2,0) give the textbook softmax value") {
    // Build a model that produces exactly those logits: zeroed extractor
    // leaves hidden = 0, b2 pushes feat to 1, and the head scales it.
    ModelShape shape{.d_in = 1, .hidden = 1, .d_feat = 1, .categories = 2, .relations = 2};
    ModelParams params;
    params.allocate(shape);
    params.b2[0] = 1.0;
    params.wc[0] = 2.0;  // category 0 logit = 2
    params.wc[1] = 0.0;  // category 1 logit = 0
    const Vec p = category_forward(params, {0.0});
    const double e2 = std::exp(2.0);
    CHECK(p[0] == doctest::Approx(e2 / (e2 + 1.0)).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(p[1] == doctest::Approx(0.1192).epsilon(1e-4));
}

TEST_CASE("relation_forward: zero transfer tensor gives uniform relations") {
    Rng rng(7);
    const int c = 4, r = 5;
    Vec wt(static_cast<std::size_t>(c * c * r), 0.0);
    const Vec p1 = random_distribution(rng, c);
    const Vec p2 = random_distribution(rng, c);
    const Vec rel = relation_forward(p1, p2, wt, c, r);
    for (double v : rel) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("relation_forward: one-hot inputs select a single tensor fiber") {
    Rng rng(9);
    const int c = 5, r = 4;
    Vec wt(static_cast<std::size_t>(c * c * r));
    for (double& v : wt) v = rng.uniform(-1.0, 1.0);
    const int a = 2, b = 4;
    Vec pa(static_cast<std::size_t>(c), 0.0), pb(static_cast<std::size_t>(c), 0.0);
    pa[a] = 1.0;
    pb[b] = 1.0;
    const Vec rel = relation_forward(pa, pb, wt, c, r);
    Vec fiber(static_cast<std::size_t>(r));
    for (int n = 0; n < r; ++n) {
        fiber[static_cast<std::size_t>(n)] =
            wt[(static_cast<std::size_t>(a) * c + b) * r + static_cast<std::size_t>(n)];
    }
    const Vec expected = softmax(fiber);
    for (int n = 0; n < r; ++n) {
        CHECK(rel[static_cast<std::size_t>(n)] ==
              doctest::Approx(expected[static_cast<std::size_t>(n)]).epsilon(1e-12));
    }
}

TEST_CASE("relation head matches the triple-loop oracle for all small sizes") {
    Rng rng(11);
    for (int c = 2; c <= 6; ++c) {
        for (int r = 2; r <= 6; ++r) {
            Vec wt(static_cast<std::size_t>(c * c * r));
            for (double& v : wt) v = rng.uniform(-2.0, 2.0);
            const Vec p1 = random_distribution(rng, c);
            const Vec p2 = random_distribution(rng, c);
            const Vec fast = relation_logits(p1, p2, wt, c, r);
            const Vec slow = oracles::relation_logits_bruteforce(p1, p2, wt, c, r);
            for (int n = 0; n < r; ++n) {
                CHECK(std::abs(fast[static_cast<std::size_t>(n)] -
                               slow[static_cast<std::size_t>(n)]) < 1e-10);
            }
        }
    }
}

TEST_CASE("RelationBatchCache agrees with the direct contraction and its own backward") {
    Rng rng(13);
    const int c = 5, r = 3;
    ModelShape shape{.d_in = 2, .hidden = 2, .d_feat = 2, .categories = c, .relations = r};
    Vec wt(static_cast<std::size_t>(c * c * r));
    for (double& v : wt) v = rng.uniform(-1.5, 1.5);

    std::vector<Vec> ps;
    for (int i = 0; i < 6; ++i) ps.push_back(random_distribution(rng, c));
    std::vector<const Vec*> ptrs;
    for (const Vec& p : ps) ptrs.push_back(&p);
    RelationBatchCache cache(wt, shape, ptrs);

    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 6; ++j) {
            const Vec fast = cache.logits(i, j);
            const Vec slow = oracles::relation_logits_bruteforce(ps[static_cast<std::size_t>(i)],
                                                                 ps[static_cast<std::size_t>(j)], wt, c, r);
            for (int n = 0; n < r; ++n) {
                CHECK(std::abs(fast[static_cast<std::size_t>(n)] -
                               slow[static_cast<std::size_t>(n)]) < 1e-12);
            }
        }
    }

    // Backward: numeric probe of logits against the accumulated VJPs.
    Vec dlogits(static_cast<std::size_t>(r));
    for (double& v : dlogits) v = rng.uniform(-1.0, 1.0);
    std::vector<Vec> dp(6, Vec(static_cast<std::size_t>(c), 0.0));
    Vec dwt(wt.size(), 0.0);
    cache.pair_backward(1, 4, dlogits, &dp[1], &dp[4], &dwt);

    const double eps = 1e-6;
    const auto scalar = [&](const Vec& left, const Vec& right, const Vec& tensor) {
        const Vec logits = oracles::relation_logits_bruteforce(left, right, tensor, c, r);
        double acc = 0.0;
        for (int n = 0; n < r; ++n) acc += dlogits[static_cast<std::size_t>(n)] * logits[static_cast<std::size_t>(n)];
        return acc;
    };
    for (int a = 0; a < c; ++a) {
        Vec up = ps[1], down = ps[1];
        up[static_cast<std::size_t>(a)] += eps;
        down[static_cast<std::size_t>(a)] -= eps;
        const double fd = (scalar(up, ps[4], wt) - scalar(down, ps[4], wt)) / (2 * eps);
        CHECK(dp[1][static_cast<std::size_t>(a)] == doctest::Approx(fd).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < wt.size(); i += 7) {
        Vec up = wt, down = wt;
        up[i] += eps;
        down[i] -= eps;
        const double fd = (scalar(ps[1], ps[4], up) - scalar(ps[1], ps[4], down)) / (2 * eps);
        CHECK(dwt[i] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("category backward matches finite differences on a cross-entropy loss") {
    Rng rng(17);
    ModelShape shape{.d_in = 3, .hidden = 4, .d_feat = 3, .categories = 4, .relations = 2};
    ModelParams params = ModelParams::initialized(shape, rng);
    for (double& v : params.wt) v = rng.uniform(-0.5, 0.5);
    Vec x(3);
    for (double& v : x) v = rng.gaussian();
    const int y = 2;

    const auto loss_fn = [&](const ModelParams& p) {
        return category_cross_entropy(category_forward(p, x), y);
    };

    GradientSet grads = GradientSet::zeros(shape);
    const SampleForward fwd = category_forward_cached(params, x);
    Vec dlogits = fwd.p;
    dlogits[y] -= 1.0;
    accumulate_category_backward(params, fwd, &dlogits, nullptr, grads);

    const GradientSet fd = finite_difference(params, loss_fn, 1e-5);
    const auto compare = [&](const Vec& analytic, const Vec& numeric) {
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            CHECK(std::abs(analytic[i] - numeric[i]) <
                  1e-6 * std::max(1.0, std::abs(numeric[i])));
        }
    };
    compare(grads.w1, fd.w1);
    compare(grads.b1, fd.b1);
    compare(grads.w2, fd.w2);
    compare(grads.b2, fd.b2);
    compare(grads.wc, fd.wc);
    compare(grads.bc, fd.bc);
}

TEST_CASE("a constant loss produces zero gradients") {
    Rng rng(19);
    ModelShape shape{.d_in = 2, .hidden = 3, .d_feat = 2, .categories = 3, .relations = 2};
    ModelParams params = ModelParams::initialized(shape, rng);
    const SampleForward fwd = category_forward_cached(params, {0.3, -0.7});
    // d(sum of p)/dp = ones; the softmax VJP annihilates constant shifts.
    Vec dp(3, 1.0);
    GradientSet grads = GradientSet::zeros(shape);
    accumulate_category_backward(params, fwd, nullptr, &dp, grads);
    grads.for_each_array([&](const char*, const Vec& v) {
        for (double g : v) CHECK(std::abs(g) < 1e-12);
    });
}

TEST_CASE("gradients are linear in the loss weight") {
    Rng rng(23);
    ModelShape shape{.d_in = 2, .hidden = 3, .d_feat = 2, .categories = 3, .relations = 2};
    ModelParams params = ModelParams::initialized(shape, rng);
    const SampleForward fwd = category_forward_cached(params, {1.0, 0.5});
    Vec dlogits = fwd.p;
    dlogits[1] -= 1.0;

    GradientSet g1 = GradientSet::zeros(shape);
    accumulate_category_backward(params, fwd, &dlogits, nullptr, g1);
    for (double& v : dlogits) v *= 2.0;
    GradientSet g2 = GradientSet::zeros(shape);
    accumulate_category_backward(params, fwd, &dlogits, nullptr, g2);

    const auto flat = [](const GradientSet& g) {
        Vec out;
        g.for_each_array([&](const char*, const Vec& v) { out.insert(out.end(), v.begin(), v.end()); });
        return out;
    };
    const Vec f1 = flat(g1), f2 = flat(g2);
    for (std::size_t i = 0; i < f1.size(); ++i) CHECK(f2[i] == 2.0 * f1[i]);
}

TEST_CASE("sgd with zero momentum and decay is a plain gradient step") {
    ModelShape shape{.d_in = 1, .hidden = 1, .d_feat = 1, .categories = 2, .relations = 2};
    ModelParams params;
    params.allocate(shape);
    params.w1[0] = 1.0;
    GradientSet grads = GradientSet::zeros(shape);
    grads.w1[0] = 0.5;
    GradientSet velocity = GradientSet::zeros(shape);
    sgd_momentum_step(params, grads, velocity, 0.1, 0.0, 0.0);
    CHECK(params.w1[0] == doctest::Approx(1.0 - 0.1 * 0.5));

    // Zero gradients leave everything in place.
    ModelParams before = params;
    GradientSet zero = GradientSet::zeros(shape);
    sgd_momentum_step(params, zero, velocity, 0.1, 0.0, 0.0);
    CHECK(params.w1[0] == before.w1[0]);
}

TEST_CASE("sgd momentum recurrence: deltas -0.1 then -0.19") {
    ModelShape shape{.d_in = 1, .hidden = 1, .d_feat = 1, .categories = 2, .relations = 2};
    ModelParams params;
    params.allocate(shape);
    GradientSet grads = GradientSet::zeros(shape);
    grads.w1[0] = 1.0;
    GradientSet velocity = GradientSet::zeros(shape);

    sgd_momentum_step(params, grads, velocity, 0.1, 0.9, 0.0);
    CHECK(params.w1[0] == doctest::Approx(-0.1).epsilon(1e-12));
    sgd_momentum_step(params, grads, velocity, 0.1, 0.9, 0.0);
    CHECK(params.w1[0] == doctest::Approx(-0.1 - 0.19).epsilon(1e-12));

    CHECK_THROWS_AS(sgd_momentum_step(params, grads, velocity, -0.1, 0.9, 0.0), ValidationError);
    CHECK_THROWS_AS(sgd_momentum_step(params, grads, velocity, 0.1, 1.0, 0.0), ValidationError);
}

TEST_CASE("cosine schedule endpoints and monotonicity") {
    CHECK(cosine_lr(0, 100, 0.01) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(cosine_lr(100, 100, 0.01) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_lr(50, 100, 0.01) == doctest::Approx(0.005).epsilon(1e-12));
    for (long s = 0; s < 1000; ++s) {
        CHECK(cosine_lr(s + 1, 1000, 0.01) <= cosine_lr(s, 1000, 0.01));
    }
    CHECK_THROWS_AS(cosine_lr(-1, 100, 0.01), ValidationError);
    CHECK_THROWS_AS(cosine_lr(101, 100, 0.01), ValidationError);
    CHECK_THROWS_AS(cosine_lr(0, 0, 0.01), ValidationError);
}

TEST_CASE("initialization zeroes the transfer tensor") {
    Rng rng(29);
    ModelShape shape{.d_in = 3, .hidden = 4, .d_feat = 4, .categories = 5, .relations = 3};
    const ModelParams params = ModelParams::initialized(shape, rng);
    for (double v : params.wt) CHECK(v == 0.0);
    bool any_nonzero = false;
    for (double v : params.w1) any_nonzero = any_nonzero || v != 0.0;
    CHECK(any_nonzero);
    params.check_finite("test");
}
