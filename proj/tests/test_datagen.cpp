#include "doctest.h"
#include "support.hpp"

#include "efi/datagen.hpp"
#include "efi/errors.hpp"

#include <cmath>
#include <numeric>

using namespace efi;

namespace {

double choose(int n, int k) {
    double c = 1.0;
    for (int j = 1; j <= k; ++j) c = c * static_cast<double>(n - k + j) / static_cast<double>(j);
    return c;
}

// Binomial tail: P(Bin(a+b-1, x) >= a).
double binomial_tail(double x, int a, int b) {
    const int n = a + b - 1;
    double s = 0.0;
    for (int j = a; j <= n; ++j) s += choose(n, j) * std::pow(x, j) * std::pow(1.0 - x, n - j);
    return s;
}

}  // namespace

TEST_CASE("beta_cdf fixtures") {
    CHECK(beta_cdf(0.0, 2, 4) == 0.0);
    CHECK(beta_cdf(1.0, 2, 4) == 1.0);
    CHECK(beta_cdf(0.5, 2, 4) == doctest::Approx(0.8125).epsilon(1e-15));
    CHECK_THROWS_AS(beta_cdf(1.5, 2, 4), InvalidArgument);
    CHECK_THROWS_AS(beta_cdf(-0.1, 2, 4), InvalidArgument);
}

TEST_CASE("property: beta_cdf matches the binomial-sum oracle") {
    Rng rng(2024);
    std::uniform_int_distribution<int> ab(1, 9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 20; ++k) {
        const int a = ab(rng), b = ab(rng);
        const double x = u(rng);
        CHECK(std::abs(beta_cdf(x, a, b) - binomial_tail(x, a, b)) < 1e-12);
    }
    for (int a = 1; a < 6; ++a)
        for (int b = 1; b < 6; ++b) {
            double prev = 0.0;
            for (int i = 0; i <= 50; ++i) {
                const double v = beta_cdf(i / 50.0, a, b);
                CHECK(v >= prev - 1e-15);
                prev = v;
            }
        }
}

TEST_CASE("s_curve fixtures") {
    CHECK(s_curve(0.5) == 1.0);
    CHECK(s_curve(0.0) == doctest::Approx(2.0 / (1.0 + std::exp(6.0))).epsilon(1e-14));
    CHECK(s_curve(0.0) == doctest::Approx(0.0049452).epsilon(1e-4));
    CHECK(s_curve(50.0) == doctest::Approx(2.0));
    CHECK(s_curve(0.3) < s_curve(0.31));
    // the logistic is symmetric about 0.5, so its mean over [0, 1] is 1
    CHECK(s_curve_mean() == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("linear design") {
    const std::vector<double> zero(4, 0.0);
    CHECK(design_propensity(Design::linear_ate, zero) == doctest::Approx(0.7310586).epsilon(1e-7));
    const auto data = generate({Design::linear_ate, 500, 3});
    CHECK(data.d == 4);
    const auto& tr = *data.truth;
    const std::vector<double> beta{-1.0, 1.0, -1.0, 1.0};
    for (std::size_t i = 0; i < data.n; ++i) {
        double fit = 1.0 * data.t[i] + 1.0 + tr.z[i];
        for (std::size_t j = 0; j < 4; ++j) fit += beta[j] * data.row(i)[j];
        CHECK(std::abs(data.y[i] - fit) < 1e-12);
        CHECK(tr.tau[i] == 1.0);
    }
}

TEST_CASE("linear design: treated fraction tracks the propensity") {
    const auto data = generate({Design::linear_ate, 100000, 11});
    const double treated = std::accumulate(data.t.begin(), data.t.end(), 0.0) / 1e5;
    const auto& e = data.truth->propensity;
    const double mean_e = std::accumulate(e.begin(), e.end(), 0.0) / 1e5;
    CHECK(std::abs(treated - mean_e) < 0.01);
}

TEST_CASE("example1 design") {
    CHECK(design_propensity(Design::example1, std::vector<double>{0.5, 0.9}) == doctest::Approx(0.453125).epsilon(1e-14));
    const auto data = generate({Design::example1, 2000, 5});
    CHECK(data.d == 2);
    const auto& tr = *data.truth;
    for (std::size_t i = 0; i < data.n; ++i) {
        CHECK(tr.propensity[i] >= 0.25);
        CHECK(tr.propensity[i] <= 0.5);
        const auto x = data.row(i);
        CHECK(std::abs(tr.c[i] - (1.0 + x[0] + x[1])) < 1e-12);
        CHECK(std::abs(data.y[i] - (tr.c[i] + tr.tau[i] * data.t[i] + tr.z[i])) < 1e-12);
        CHECK((data.t[i] == 1 ? tr.y1[i] : tr.y0[i]) == data.y[i]);
    }
}

TEST_CASE("example1: the effect modifier is centered") {
    Rng rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double s = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        const std::vector<double> x{u(rng), u(rng)};
        s += design_effect(Design::example1, x) - 1.0;
    }
    CHECK(std::abs(s / n) < 0.005);
}

TEST_CASE("example2 design") {
    CHECK(design_control_mean(Design::example2, std::vector<double>{1.0, 0.0, 0.3, 0.3, 0.3}) == doctest::Approx(2.0));
    CHECK(design_control_mean(Design::example2, std::vector<double>{0.5, 1.0, 0.3, 0.3, 0.3}) ==
          doctest::Approx(1.0 / 6.0).epsilon(1e-14));
    const std::vector<double> a{0.2, 0.7, 0.1, 0.2, 0.3}, b{0.2, 0.7, 0.9, 0.8, 0.05};
    CHECK(design_control_mean(Design::example2, a) == design_control_mean(Design::example2, b));
    CHECK(design_effect(Design::example2, a) == design_effect(Design::example2, b));
    CHECK(design_propensity(Design::example2, a) == design_propensity(Design::example2, b));
    CHECK(generate({Design::example2, 10, 1}).d == 5);
    CHECK(generate({Design::example2, 10, 1, 7}).d == 7);
}

TEST_CASE("generation is deterministic per seed") {
    const auto a = generate({Design::example1, 50, 8});
    const auto b = generate({Design::example1, 50, 8});
    const auto c = generate({Design::example1, 50, 9});
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    CHECK(a.t == b.t);
    CHECK(a.y != c.y);
}

TEST_CASE("generation errors") {
    CHECK_THROWS_AS(generate({Design::example1, 0, 1}), InvalidArgument);
    CHECK_THROWS_AS(generate({Design::example1, 10, 1, 3}), InvalidArgument);
    CHECK_THROWS_AS(parse_design("nope"), Error);
}
