#include "efi/datagen.hpp"

#include "efi/errors.hpp"
#include "efi/rng.hpp"

#include <array>
#include <cmath>
#include <random>
#include <string>

namespace efi {

namespace {

constexpr std::array<double, 4> kLinearBeta{-1.0, 1.0, -1.0, 1.0};
constexpr std::array<double, 4> kLinearXi{-1.0, 1.0, -1.0, 1.0};
constexpr double kLinearTau = 1.0;
constexpr double kLinearMu = 1.0;
constexpr double kLinearNu = 1.0;

double log_choose(int n, int k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

std::size_t default_dim(Design d) {
    switch (d) {
        case Design::linear_ate: return 4;
        case Design::example1: return 2;
        case Design::example2: return 5;
    }
    return 0;
}

}  // namespace

Design parse_design(std::string_view name) {
    if (name == "linear_ate") return Design::linear_ate;
    if (name == "example1") return Design::example1;
    if (name == "example2") return Design::example2;
    throw InvalidArgument("unknown design '" + std::string(name) + "'");
}

std::string_view to_string(Design d) {
    switch (d) {
        case Design::linear_ate: return "linear_ate";
        case Design::example1: return "example1";
        case Design::example2: return "example2";
    }
    return "?";
}

double beta_cdf(double x, int a, int b) {
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("beta_cdf: x must lie in [0, 1]");
    if (a <= 0 || b <= 0) throw InvalidArgument("beta_cdf: shape parameters must be positive");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    // I_x(a, b) = P(Binomial(a + b - 1, x) >= a)
    const int m = a + b - 1;
    const double lx = std::log(x);
    const double l1x = std::log1p(-x);
    double sum = 0.0;
    for (int j = a; j <= m; ++j) sum += std::exp(log_choose(m, j) + j * lx + (m - j) * l1x);
    return std::min(1.0, sum);
}

double s_curve(double a) { return 2.0 / (1.0 + std::exp(-12.0 * (a - 0.5))); }

double s_curve_mean() {
    static const double mean = [] {
        constexpr int panels = 10000;  // even
        const double h = 1.0 / panels;
        double acc = s_curve(0.0) + s_curve(1.0);
        for (int k = 1; k < panels; ++k) acc += (k % 2 ? 4.0 : 2.0) * s_curve(k * h);
        return acc * h / 3.0;
    }();
    return mean;
}

double design_control_mean(Design d, std::span<const double> x) {
    switch (d) {
        case Design::linear_ate: {
            double c = kLinearMu;
            for (std::size_t j = 0; j < kLinearBeta.size(); ++j) c += kLinearBeta[j] * x[j];
            return c;
        }
        case Design::example1: return 1.0 + x[0] + x[1];
        case Design::example2: return 2.0 * x[0] / (1.0 + 5.0 * x[1] * x[1]);
    }
    return 0.0;
}

double design_effect(Design d, std::span<const double> x) {
    if (d == Design::linear_ate) return kLinearTau;
    const double m = s_curve_mean();
    return 1.0 + s_curve(x[0]) * s_curve(x[1]) - m * m;
}

double design_propensity(Design d, std::span<const double> x) {
    if (d == Design::linear_ate) {
        double lin = kLinearNu;
        for (std::size_t j = 0; j < kLinearXi.size(); ++j) lin += kLinearXi[j] * x[j];
        return 1.0 / (1.0 + std::exp(-lin));
    }
    return 0.25 * (1.0 + beta_cdf(x[0], 2, 4));
}

Dataset generate(const GenSpec& spec) {
    if (spec.n == 0) throw InvalidArgument("sample size must be at least 1");
    std::size_t d = default_dim(spec.design);
    if (spec.d != 0) {
        if (spec.design != Design::example2 && spec.d != d)
            throw InvalidArgument("design '" + std::string(to_string(spec.design)) +
                                  "' has a fixed covariate dimension of " + std::to_string(d));
        if (spec.d < 2) throw InvalidArgument("example2 needs at least two covariates");
        d = spec.d;
    }

    Dataset data;
    data.n = spec.n;
    data.d = d;
    data.x.resize(spec.n * d);
    data.t.resize(spec.n);
    data.y.resize(spec.n);
    Truth tr;
    for (auto* v : {&tr.z, &tr.tau, &tr.c, &tr.y1, &tr.y0, &tr.propensity}) v->resize(spec.n);

    // independent streams: covariates, assignment, observed error, counterfactual error
    Rng x_rng(derive_seed(spec.seed, 1));
    Rng t_rng(derive_seed(spec.seed, 2));
    Rng z_rng(derive_seed(spec.seed, 3));
    Rng zc_rng(derive_seed(spec.seed, 4));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    for (std::size_t i = 0; i < spec.n; ++i) {
        double* row = data.x.data() + i * d;
        for (std::size_t j = 0; j < d; ++j)
            row[j] = spec.design == Design::linear_ate ? normal(x_rng) : unif(x_rng);
        const std::span<const double> xr(row, d);
        const double e = design_propensity(spec.design, xr);
        const int t = unif(t_rng) < e ? 1 : 0;
        const double z = normal(z_rng);
        const double z_other = normal(zc_rng);
        const double c = design_control_mean(spec.design, xr);
        const double tau = design_effect(spec.design, xr);

        data.t[i] = t;
        data.y[i] = c + tau * t + kDesignSigma * z;
        tr.z[i] = z;
        tr.c[i] = c;
        tr.tau[i] = tau;
        tr.propensity[i] = e;
        const double y_other = c + tau * (1 - t) + kDesignSigma * z_other;
        tr.y1[i] = t == 1 ? data.y[i] : y_other;
        tr.y0[i] = t == 0 ? data.y[i] : y_other;
    }
    data.truth = std::move(tr);
    return data;
}

Dataset gen_linear_ate(const GenSpec& spec) {
    if (spec.design != Design::linear_ate) throw InvalidArgument("gen_linear_ate: wrong design");
    return generate(spec);
}

Dataset gen_example1(const GenSpec& spec) {
    if (spec.design != Design::example1) throw InvalidArgument("gen_example1: wrong design");
    return generate(spec);
}

Dataset gen_example2(const GenSpec& spec) {
    if (spec.design != Design::example2) throw InvalidArgument("gen_example2: wrong design");
    return generate(spec);
}

}  // namespace efi
