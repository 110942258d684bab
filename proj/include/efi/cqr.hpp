#pragma once

// Conformalized quantile regression baseline for counterfactual and ITE intervals.

#include "efi/dataset.hpp"
#include "efi/inference.hpp"
#include "efi/kernels.hpp"
#include "efi/nn.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace efi {

struct PinballConfig {
    std::vector<std::size_t> hidden{10, 10};
    nn::Activation activation = nn::Activation::relu;
    std::size_t epochs = 1500;
    double learning_rate = 0.01;  // Adam
    std::uint64_t seed = 0;
};

/// Two-output quantile network on standardized inputs and targets.
struct QuantileNet {
    nn::MlpParams net;
    double q_lo = 0.025;
    double q_hi = 0.975;
    std::vector<double> in_mean, in_scale;
    double out_mean = 0.0, out_scale = 1.0;

    /// Sorted (lower, upper) prediction for one raw input row.
    std::pair<double, double> predict(std::span<const double> input) const;
};

/// Fits output 0 to the q_lo quantile of target_lo and output 1 to the q_hi
/// quantile of target_hi. inputs is row-major, one row per observation.
QuantileNet fit_quantile_net(std::span<const double> inputs, std::size_t width, std::span<const double> target_lo,
                             std::span<const double> target_hi, double q_lo, double q_hi, const PinballConfig& config);

/// Outcome quantile model on [x, t] at levels (alpha/2, 1 - alpha/2).
struct QuantileModel {
    QuantileNet net;
    double alpha = 0.05;
    std::size_t covariate_dim = 0;

    std::pair<double, double> predict(std::span<const double> x, int t) const;
};

QuantileModel pinball_fit(const Dataset& train, double alpha, const PinballConfig& config);

double pinball_loss(double residual, double q);

struct ConformalCorrection {
    double s_hat = 0.0;
    double alpha = 0.05;
};

/// s_i = max(q_lo(t, x_i) - y_i, y_i - q_hi(t, x_i)) over the arm-t rows of valid.
std::vector<double> conformal_scores(const QuantileModel& model, const Dataset& valid, int arm);

/// The ceil((n+1)(1-alpha))-th smallest score, +inf when that rank exceeds n.
ConformalCorrection calibrate(std::span<const double> scores, double alpha);

/// Weighted variant: the test point keeps weight test_weight at +inf.
ConformalCorrection calibrate_weighted(std::span<const double> scores, std::span<const double> weights,
                                       double test_weight, double alpha);

struct ArmModel {
    QuantileModel model;
    ConformalCorrection correction[2];
    bool calibrated = false;
};

/// [q_lo(t,x) - s(t), q_hi(t,x) + s(t)] for the potential outcome Y(t).
std::pair<double, double> cqr_counterfactual(const ArmModel& arms, std::span<const double> x, int arm);

enum class CqrMode { naive, exact, inexact };

std::string to_string(CqrMode m);
CqrMode parse_cqr_mode(const std::string& name);

struct CqrConfig {
    PinballConfig pinball{};
    double valid_fraction = 0.5;  // share of each fold used for calibration
    bool weighted = false;        // oracle propensity weights
    std::uint64_t seed = 0;
};

/// Trains on `train` and calibrates per arm at level 1 - alpha. Weighted
/// calibration needs oracle propensities in the validation rows.
ArmModel fit_arms(const Dataset& train, double alpha, const CqrConfig& config);

/// Observed-arm intervals (Ic for t=0, It for t=1) for every test row.
std::vector<PredictionInterval> cqr_observed(const Dataset& train, const Dataset& test, double alpha,
                                             const CqrConfig& config);

/// Covariate-only ITE intervals (Im) for every test row.
std::vector<PredictionInterval> cqr_ite(const Dataset& train, const Dataset& test, double alpha, CqrMode mode,
                                        const CqrConfig& config);

}  // namespace efi
