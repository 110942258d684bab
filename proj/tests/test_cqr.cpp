#include "doctest.h"
#include "support.hpp"

#include "efi/cqr.hpp"
#include "efi/datagen.hpp"
#include "efi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

using namespace efi;

namespace {

// Quantile model with constant outputs (lo, hi) everywhere.
QuantileModel constant_model(double lo, double hi, std::size_t d = 1) {
    nn::MlpSpec spec;
    spec.widths = {d + 1, 1, 2};
    spec.activation = nn::Activation::relu;
    std::vector<double> flat(nn::parameter_count(spec), 0.0);
    flat[flat.size() - 2] = lo;
    flat[flat.size() - 1] = hi;
    QuantileModel m;
    m.net.net = nn::make_params(spec, flat);
    m.net.in_mean.assign(d + 1, 0.0);
    m.net.in_scale.assign(d + 1, 1.0);
    m.covariate_dim = d;
    return m;
}

Dataset rows_1d(std::vector<double> x, std::vector<int> t, std::vector<double> y) {
    Dataset d;
    d.n = x.size();
    d.d = 1;
    d.x = std::move(x);
    d.t = std::move(t);
    d.y = std::move(y);
    return d;
}

}  // namespace

TEST_CASE("pinball loss") {
    CHECK(pinball_loss(2.0, 0.9) == doctest::Approx(1.8));
    CHECK(pinball_loss(-2.0, 0.9) == doctest::Approx(0.2));
    CHECK(pinball_loss(0.0, 0.3) == 0.0);
}

TEST_CASE("quantile net: constant outcome") {
    const std::size_t n = 200;
    std::vector<double> x(n), y(n, 3.0);
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i) / n;
    PinballConfig cfg;
    cfg.epochs = 800;
    const auto qn = fit_quantile_net(x, 1, y, y, 0.05, 0.95, cfg);
    for (double v : {0.1, 0.5, 0.9}) {
        const auto [lo, hi] = qn.predict(std::vector<double>{v});
        CHECK(lo == doctest::Approx(3.0).epsilon(0.02));
        CHECK(hi == doctest::Approx(3.0).epsilon(0.02));
    }
}

TEST_CASE("quantile net: Gaussian outcome without covariates") {
    const std::size_t n = 4000;
    const auto y = testing::normal_vector(n, 12);
    const std::vector<double> x(n, 0.0);
    PinballConfig cfg;
    cfg.epochs = 1500;
    const auto qn = fit_quantile_net(x, 1, y, y, 0.05, 0.95, cfg);
    const auto [lo, hi] = qn.predict(std::vector<double>{0.0});
    CHECK(lo == doctest::Approx(-1.645).epsilon(0.15 / 1.645));
    CHECK(hi == doctest::Approx(1.645).epsilon(0.15 / 1.645));
    CHECK(lo <= hi);
}

TEST_CASE("quantile net errors") {
    const std::vector<double> x{0.0, 1.0}, y{1.0, 2.0}, bad{1.0};
    CHECK_THROWS_AS(fit_quantile_net(x, 1, bad, y, 0.05, 0.95, {}), DimensionError);
    CHECK_THROWS_AS(fit_quantile_net(x, 1, y, y, 0.0, 0.95, {}), InvalidArgument);
    CHECK_THROWS_AS(fit_quantile_net(x, 3, y, y, 0.05, 0.95, {}), DimensionError);
}

TEST_CASE("conformity scores") {
    const auto m = constant_model(-1.0, 1.0);
    const auto valid = rows_1d({0.0, 0.1, 0.2, 0.3, 0.4}, {0, 0, 0, 0, 1}, {0.0, 1.0, 3.0, -2.0, 0.0});
    const auto s = conformal_scores(m, valid, 0);
    REQUIRE(s.size() == 4);
    CHECK(s[0] == doctest::Approx(-1.0));
    CHECK(s[1] == doctest::Approx(0.0));
    CHECK(s[2] == doctest::Approx(2.0));
    CHECK(s[3] == doctest::Approx(1.0));
    const auto none = rows_1d({0.0}, {1}, {0.0});
    CHECK_THROWS_AS(conformal_scores(m, none, 0), DataError);
}

TEST_CASE("calibration order statistic") {
    CHECK(calibrate(std::vector<double>(20, 0.0), 0.05).s_hat == 0.0);
    std::vector<double> s(99);
    std::iota(s.begin(), s.end(), 1.0);
    std::reverse(s.begin(), s.end());
    CHECK(calibrate(s, 0.05).s_hat == 95.0);
    CHECK(std::isinf(calibrate(std::vector<double>{1, 2, 3, 4, 5}, 0.05).s_hat));
    double prev = -std::numeric_limits<double>::infinity();
    for (double a : {0.5, 0.3, 0.2, 0.1, 0.05, 0.02}) {
        const double v = calibrate(s, a).s_hat;
        CHECK(v >= prev);
        prev = v;
    }
    CHECK_THROWS_AS(calibrate(std::vector<double>{}, 0.05), InvalidArgument);
    CHECK_THROWS_AS(calibrate(s, 1.0), InvalidArgument);
}

TEST_CASE("equal weights reduce weighted calibration to the plain rule") {
    for (std::size_t n : {5, 19, 40, 99}) {
        const auto s = testing::normal_vector(n, n);
        const std::vector<double> w(n, 2.0);
        for (double a : {0.05, 0.1, 0.3}) {
            const double plain = calibrate(s, a).s_hat;
            const double weighted = calibrate_weighted(s, w, 2.0, a).s_hat;
            CHECK(plain == weighted);
        }
    }
    // a heavy test weight pushes the quantile to +inf
    CHECK(std::isinf(calibrate_weighted(std::vector<double>{1, 2, 3}, std::vector<double>{1, 1, 1}, 100.0, 0.1).s_hat));
}

TEST_CASE("property: split-conformal coverage with a fixed band") {
    // 19 calibration points plus one test point per replication
    Rng rng(31);
    std::normal_distribution<double> normal(0.0, 1.5);
    const int reps = 20000;
    int covered = 0;
    for (int r = 0; r < reps; ++r) {
        std::vector<double> scores(19);
        for (auto& s : scores) {
            const double y = normal(rng);
            s = std::max(-1.0 - y, y - 1.0);
        }
        const double sh = calibrate(scores, 0.1).s_hat;
        const double y = normal(rng);
        covered += (y >= -1.0 - sh && y <= 1.0 + sh) ? 1 : 0;
    }
    const double cov = static_cast<double>(covered) / reps;
    CHECK(cov >= 0.9 - 3.0 * std::sqrt(0.09 / reps));
    CHECK(cov <= 0.95 + 3.0 * std::sqrt(0.05 * 0.95 / reps));
}

TEST_CASE("counterfactual band expansion") {
    ArmModel arms;
    arms.model = constant_model(-1.0, 1.0);
    CHECK_THROWS_AS(cqr_counterfactual(arms, std::vector<double>{0.0}, 0), InvalidArgument);
    arms.calibrated = true;
    arms.correction[0] = {0.0, 0.05};
    arms.correction[1] = {2.0, 0.05};
    const auto b0 = cqr_counterfactual(arms, std::vector<double>{0.0}, 0);
    CHECK(b0.first == doctest::Approx(-1.0));
    CHECK(b0.second == doctest::Approx(1.0));
    const auto b1 = cqr_counterfactual(arms, std::vector<double>{0.0}, 1);
    CHECK(b1.first == doctest::Approx(-3.0));
    CHECK(b1.second == doctest::Approx(3.0));
    CHECK_THROWS_AS(cqr_counterfactual(arms, std::vector<double>{0.0}, 2), InvalidArgument);
}

TEST_CASE("noise-free outcomes: naive ITE interval covers with small width") {
    const std::size_t n = 600;
    Rng rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> x(n), y(n);
    std::vector<int> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = u(rng);
        t[i] = u(rng) < 0.5 ? 1 : 0;
        y[i] = x[i] + 1.0 * t[i];
    }
    const auto train = rows_1d(x, t, y);
    auto test = rows_1d({0.2, 0.5, 0.8}, {0, 1, 0}, {0.2, 1.5, 0.8});
    CqrConfig cfg;
    cfg.pinball.epochs = 1500;
    const auto ivs = cqr_ite(train, test, 0.1, CqrMode::naive, cfg);
    for (const auto& iv : ivs) {
        CHECK(iv.contains(1.0));
        CHECK(iv.length() < 1.0);
    }
}

TEST_CASE("cqr modes and errors") {
    CHECK(parse_cqr_mode("naive") == CqrMode::naive);
    CHECK(parse_cqr_mode("exact") == CqrMode::exact);
    CHECK(parse_cqr_mode("inexact") == CqrMode::inexact);
    CHECK(to_string(CqrMode::inexact) == "inexact");
    CHECK_THROWS_AS(parse_cqr_mode("bogus"), InvalidArgument);

    auto train = generate({Design::example1, 120, 3});
    auto test = generate({Design::example1, 10, 4});
    CqrConfig cfg;
    cfg.pinball.epochs = 50;
    cfg.weighted = true;
    auto no_truth = train;
    no_truth.truth.reset();
    CHECK_THROWS_AS(cqr_observed(no_truth, test, 0.05, cfg), DataError);
    CHECK_NOTHROW(cqr_observed(train, test, 0.05, cfg));
    CHECK_THROWS_AS(cqr_ite(train, test, 0.0, CqrMode::naive, cfg), InvalidArgument);
}

TEST_CASE("cqr output is deterministic and ordered") {
    const auto train = generate({Design::example1, 200, 5});
    const auto test = generate({Design::example1, 30, 6});
    CqrConfig cfg;
    cfg.pinball.epochs = 200;
    for (auto mode : {CqrMode::naive, CqrMode::exact, CqrMode::inexact}) {
        const auto a = cqr_ite(train, test, 0.05, mode, cfg);
        const auto b = cqr_ite(train, test, 0.05, mode, cfg);
        REQUIRE(a.size() == test.n);
        for (std::size_t k = 0; k < a.size(); ++k) {
            CHECK(a[k].lower == b[k].lower);
            CHECK(a[k].upper == b[k].upper);
            CHECK(a[k].lower <= a[k].upper);
        }
    }
}
