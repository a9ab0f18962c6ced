#include "doctest.h"

#include <cmath>
#include <functional>
#include <random>

#include "usersod/nn/autograd.hpp"

using namespace usersod::nn;

namespace {

Tensor<double> randn(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = n(rng);
    return t;
}

// Loss sum(w * y^2) so every output element gets a distinct upstream gradient.
double weighted_square(const Var<double>& y, const Tensor<double>& w) {
    double s = 0;
    for (size_t i = 0; i < w.data.size(); ++i) s += w.data[i] * y->value.data[i] * y->value.data[i];
    return s;
}

double worst_fd_error(const std::function<Var<double>()>& f, const std::vector<Var<double>>& inputs,
                      const Tensor<double>& w) {
    for (const auto& v : inputs) v->grad = Tensor<double>(v->value.shape);
    auto y = f();
    y->grad = Tensor<double>(y->value.shape);
    for (size_t i = 0; i < w.data.size(); ++i) y->grad.data[i] = 2 * w.data[i] * y->value.data[i];
    y->backward_fn(*y);
    double worst = 0;
    for (const auto& v : inputs)
        for (size_t i = 0; i < v->value.numel(); ++i) {
            const double old = v->value.data[i], h = 1e-6;
            v->value.data[i] = old + h;
            const double up = weighted_square(f(), w);
            v->value.data[i] = old - h;
            const double down = weighted_square(f(), w);
            v->value.data[i] = old;
            worst = std::max(worst, std::fabs((up - down) / (2 * h) - v->grad.data[i]));
        }
    return worst;
}

} // namespace

TEST_CASE("normalization layers: unit statistics and finite-difference gradients") {
    std::mt19937_64 rng(1);
    const int C = 6, H = 3, W = 4;
    auto x = leaf(randn(rng, {C, H, W}, 3.0), true);
    auto ones = leaf(Tensor<double>({C}, std::vector<double>(C, 1.0)), true);
    auto zeros = leaf(Tensor<double>({C}), true);
    const size_t P = H * W;

    SUBCASE("position norm standardizes every position over channels") {
        auto y = ops::position_norm(x, ones, zeros);
        for (size_t p = 0; p < P; ++p) {
            double m = 0, v = 0;
            for (int c = 0; c < C; ++c) m += y->value.data[c * P + p];
            m /= C;
            for (int c = 0; c < C; ++c) v += std::pow(y->value.data[c * P + p] - m, 2);
            CHECK(m == doctest::Approx(0.0).scale(1.0));
            CHECK(v / C == doctest::Approx(1.0).epsilon(1e-4));
        }
    }
    SUBCASE("one-group norm standardizes the whole map and keeps per-channel offsets") {
        auto y = ops::group_norm(x, ones, zeros, 1);
        double m = 0;
        for (double v : y->value.data) m += v;
        CHECK(m / static_cast<double>(y->value.numel()) == doctest::Approx(0.0).scale(1.0));
        // A constant added to one channel survives as a shift of that channel's mean.
        auto shifted = x->value;
        for (size_t i = 0; i < P; ++i) shifted.data[i] += 5.0;
        auto ys = ops::group_norm(constant(shifted), ones, zeros, 1);
        double d0 = 0, d1 = 0;
        for (size_t i = 0; i < P; ++i) {
            d0 += ys->value.data[i];
            d1 += y->value.data[i];
        }
        CHECK(d0 > d1);
    }
    SUBCASE("gradients") {
        auto g = leaf(randn(rng, {C}), true), b = leaf(randn(rng, {C}), true);
        auto w = randn(rng, {C, H, W});
        CHECK(worst_fd_error([&] { return ops::position_norm(x, g, b); }, {x, g, b}, w) < 1e-6);
        CHECK(worst_fd_error([&] { return ops::group_norm(x, g, b, 1); }, {x, g, b}, w) < 1e-6);
        CHECK(worst_fd_error([&] { return ops::group_norm(x, g, b, 3); }, {x, g, b}, w) < 1e-6);
    }
}

TEST_CASE("softmax is exact on a hand case and order independent") {
    std::vector<double> row{0.0, std::log(3.0)};
    softmax_inplace(std::span<double>(row));
    CHECK(row[0] == doctest::Approx(0.25));
    CHECK(row[1] == doctest::Approx(0.75));
    // Same values at different addresses give bitwise-equal results.
    std::vector<float> a(37), b(38);
    for (int i = 0; i < 37; ++i) a[i] = b[i + 1] = std::sin(static_cast<float>(i));
    softmax_inplace(std::span<float>(a));
    softmax_inplace(std::span<float>(b).subspan(1));
    for (int i = 0; i < 37; ++i) CHECK(a[i] == b[i + 1]);
}

TEST_CASE("relu passes NaN through") {
    Tensor<double> t({1, 1, 3}, std::vector<double>{-1.0, std::nan(""), 2.0});
    auto y = ops::relu(constant(t));
    CHECK(y->value.data[0] == 0.0);
    CHECK(std::isnan(y->value.data[1]));
    CHECK(y->value.data[2] == 2.0);
}
