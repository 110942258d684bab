#pragma once

#include "efi/dataset.hpp"

#include <cstdint>
#include <span>
#include <string_view>

namespace efi {

enum class Design { linear_ate, example1, example2 };

Design parse_design(std::string_view name);
std::string_view to_string(Design d);

struct GenSpec {
    Design design = Design::linear_ate;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::size_t d = 0;  // 0: design default; only example2 accepts an override (>= 2)
};

/// Regularized incomplete beta I_x(a, b) for positive integer a, b.
double beta_cdf(double x, int a, int b);

/// s(a) = 2 / (1 + exp(-12 (a - 0.5)))
double s_curve(double a);

/// E[s(U)] for U ~ Unif(0, 1), by composite Simpson quadrature.
double s_curve_mean();

/// Ground-truth functions of a design, evaluated on one covariate row.
double design_control_mean(Design d, std::span<const double> x);    // c(x)
double design_effect(Design d, std::span<const double> x);          // tau(x)
double design_propensity(Design d, std::span<const double> x);      // P(T = 1 | x)

inline constexpr double kDesignSigma = 1.0;

Dataset gen_linear_ate(const GenSpec& spec);
Dataset gen_example1(const GenSpec& spec);
Dataset gen_example2(const GenSpec& spec);

/// Dispatches on spec.design.
Dataset generate(const GenSpec& spec);

}  // namespace efi
