#include "doctest.h"

#include <random>

#include "oracles.hpp"
#include "usersod/metrics.hpp"

using namespace usersod;

namespace {

struct Pair {
    SaliencyMap pred;
    BinaryMask gt;
};

// Mixes soft, hard and degenerate predictions and gts.
Pair random_pair(std::mt19937_64& rng, int size = 8) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Pair p{SaliencyMap(size, size), BinaryMask(size, size)};
    const double fg_rate = u(rng);
    const int kind = static_cast<int>(rng() % 4);
    for (size_t i = 0; i < p.gt.data.size(); ++i) {
        p.gt.data[i] = u(rng) < fg_rate ? 1 : 0;
        double v = u(rng);
        if (kind == 1) v = v < 0.5 ? 0.0 : 1.0;
        if (kind == 2) v = p.gt.data[i] ? 0.6 + 0.4 * v : 0.4 * v;
        p.pred.data[i] = v;
    }
    return p;
}

} // namespace

TEST_CASE("metrics match brute-force references on random pairs") {
    std::mt19937_64 rng(20240601);
    int f_checked = 0;
    for (int i = 0; i < 200; ++i) {
        auto [pred, gt] = random_pair(rng);
        const auto P = oracle::grid(pred), G = oracle::grid(gt);
        CHECK(metrics::mae(pred, gt) == doctest::Approx(oracle::mae(P, G)).epsilon(1e-9));
        CHECK(metrics::s_measure(pred, gt) == doctest::Approx(oracle::s_measure(P, G)).epsilon(1e-9));
        CHECK(metrics::e_measure(pred, gt) == doctest::Approx(oracle::e_measure(P, G)).epsilon(1e-9));
        if (gt.area() > 0) {
            CHECK(metrics::f_measure(pred, gt) == doctest::Approx(oracle::f_measure(P, G)).epsilon(1e-9));
            ++f_checked;
        }
    }
    CHECK(f_checked > 150);
}

TEST_CASE("perfect prediction scores (0, 1, 1, 1)") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 50; ++i) {
        auto [pred, gt] = random_pair(rng, 16);
        if (gt.area() == 0) gt.data[0] = 1;
        const auto p = SaliencyMap::from_mask(gt);
        CHECK(metrics::mae(p, gt) == 0.0);
        CHECK(metrics::f_measure(p, gt) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(metrics::s_measure(p, gt) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(metrics::e_measure(p, gt) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("flipping a pixel away from gt never lowers mae") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        auto [pred, gt] = random_pair(rng);
        const double before = metrics::mae(pred, gt);
        const size_t k = rng() % pred.data.size();
        // Move the pixel to a value at least as far from its gt.
        const double dist = std::fabs(pred.data[k] - gt.data[k]);
        const double farther = dist + u(rng) * (1.0 - dist);
        pred.data[k] = gt.data[k] ? 1.0 - farther : farther;
        CHECK(metrics::mae(pred, gt) >= before - 1e-15);
    }
}

TEST_CASE("all-zero ground truth") {
    SaliencyMap pred(8, 8, 0.2);
    BinaryMask gt(8, 8);
    CHECK_THROWS_WITH_AS(metrics::f_measure(pred, gt), "undefined recall", std::invalid_argument);
    CHECK(metrics::s_measure(pred, gt) == doctest::Approx(0.8));
    const auto m = metrics::evaluate_pair(pred, gt);
    CHECK_FALSE(m.f_defined);

    metrics::MetricsAccumulator acc;
    acc.add(m);
    BinaryMask one(8, 8);
    one.at(3, 3) = 1;
    acc.add(metrics::evaluate_pair(SaliencyMap::from_mask(one), one));
    const auto r = acc.report();
    CHECK(r.count == 2);
    CHECK(r.skipped_undefined_f == 1);
    CHECK(r.f_measure == doctest::Approx(1.0));
}

TEST_CASE("all-zero prediction binarizes to empty") {
    SaliencyMap pred(8, 8, 0.0);
    CHECK(metrics::binarize_adaptive(pred).area() == 0);
    BinaryMask gt(8, 8);
    gt.at(0, 0) = 1;
    CHECK(metrics::f_measure(pred, gt) == 0.0);
}

TEST_CASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(metrics::mae(SaliencyMap(4, 4), BinaryMask(4, 5)), std::invalid_argument);
}
