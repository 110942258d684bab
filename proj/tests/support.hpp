#pragma once

#include "efi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace testing {

/// Central difference of f along coordinate j of x.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                           std::size_t j, double h = 1e-5) {
    const double x0 = x[j];
    x[j] = x0 + h;
    const double up = f(x);
    x[j] = x0 - h;
    const double down = f(x);
    return (up - down) / (2.0 * h);
}

/// |a - b| / max(|a|, |b|), falling back to the absolute error near zero.
inline double rel_err(double a, double b, double floor = 1e-7) {
    const double diff = std::abs(a - b);
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale < floor ? diff / floor * floor : diff / scale;
}

inline bool close_grad(double analytic, double numeric, double tol = 1e-4, double abs_floor = 1e-7) {
    const double diff = std::abs(analytic - numeric);
    if (diff <= abs_floor) return true;
    return diff <= tol * std::max(std::abs(analytic), std::abs(numeric));
}

inline std::vector<double> normal_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    efi::Rng rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<double> v(n);
    for (auto& e : v) e = normal(rng);
    return v;
}

/// Kolmogorov-Smirnov statistic of a sample against N(0, 1).
inline double ks_normal(std::vector<double> s) {
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    double d = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double f = 0.5 * std::erfc(-s[i] / std::sqrt(2.0));
        d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
    }
    return d;
}

/// Asymptotic KS critical value at level 0.01.
inline double ks_critical_01(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

}  // namespace testing
