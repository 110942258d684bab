#pragma once

#include <span>
#include <vector>

namespace efi {

/// Two-component Gaussian mixture applied independently to every weight:
/// rho * N(0, sigma1^2) + (1 - rho) * N(0, sigma0^2), with sigma0 < sigma1.
struct MixturePrior {
    double rho = 1e-2;
    double sigma1 = 1.0;
    double sigma0 = 1e-2;
};

void validate(const MixturePrior& prior);

double log_prior(std::span<const double> w, const MixturePrior& prior);

std::vector<double> log_prior_grad(std::span<const double> w, const MixturePrior& prior);

/// Adds the prior gradient into `out` (same length as w).
void add_log_prior_grad(std::span<const double> w, const MixturePrior& prior, std::span<double> out);

}  // namespace efi
