#pragma once

// Partition of the data-model parameter vector theta = (theta_c, theta_tau, log sigma).
//
//   linear_ate        theta = (tau', mu', beta_1..beta_d, log sigma), treatment coded +-1:
//                     y = tau' t' + mu' + x'beta + sigma z
//   dnn_tau_linear_c  theta = (mu, beta_1..beta_d, eta0, tau-net weights, log sigma):
//                     y = mu + x'beta + (eta0 + tau_net(x)) t + sigma z
//   dnn_both          theta = (c-net weights, tau-net weights, log sigma):
//                     y = c_net(x) + tau_net(x) t + sigma z
//
// Network weight blocks are stored multiplied by `rescale`; the effective
// weight is the stored value divided by it. Linear coefficients and log sigma
// are never rescaled.

#include "efi/kernels.hpp"
#include "efi/nn.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace efi {

enum class ModelKind { linear_ate, dnn_tau_linear_c, dnn_both };

ModelKind parse_model_kind(std::string_view name);
std::string_view to_string(ModelKind k);

struct ThetaLayout {
    ModelKind kind = ModelKind::linear_ate;
    std::size_t covariate_dim = 0;
    nn::MlpSpec c_net;    // dnn_both only
    nn::MlpSpec tau_net;  // dnn_tau_linear_c and dnn_both
    double rescale = 25.0;

    static ThetaLayout linear_ate(std::size_t d);
    static ThetaLayout dnn_tau_linear_c(std::size_t d, std::vector<std::size_t> tau_hidden,
                                        nn::Activation act = nn::Activation::tanh,
                                        double rescale = 25.0);
    static ThetaLayout dnn_both(std::size_t d, std::vector<std::size_t> c_hidden,
                                std::vector<std::size_t> tau_hidden,
                                nn::Activation act = nn::Activation::tanh, double rescale = 25.0);

    std::size_t c_size() const;
    std::size_t tau_size() const;
    std::size_t c_offset() const;
    std::size_t tau_offset() const;
    std::size_t sigma_slot() const { return c_size() + tau_size(); }
    std::size_t dim() const { return c_size() + tau_size() + 1; }
};

void validate(const ThetaLayout& layout);

/// Effective data-model parameters (network blocks already divided by rescale).
struct UnpackedTheta {
    std::vector<double> c_params;
    std::vector<double> tau_params;
    double sigma = 1.0;
};

UnpackedTheta unpack_theta(std::span<const double> theta, const ThetaLayout& layout);
std::vector<double> pack_theta(const UnpackedTheta& parts, const ThetaLayout& layout);

/// Starting theta: network blocks get a Glorot draw at effective scale,
/// linear coefficients and the scalar effect start at 0, sigma at 1.
std::vector<double> initial_theta(const ThetaLayout& layout, std::uint64_t seed);

/// Single-observation prediction; t is the 0/1 treatment indicator.
double model_predict(std::span<const double> theta, const ThetaLayout& layout,
                     std::span<const double> x, int t, double z);

/// c(x) and tau(x) implied by theta (the linear_ate layout maps tau = 2 tau', c = mu' - tau' + x'beta).
double control_mean(std::span<const double> theta, const ThetaLayout& layout, std::span<const double> x);
double treatment_effect(std::span<const double> theta, const ThetaLayout& layout, std::span<const double> x);

/// Batched c(x_i), tau(x_i) for the columns of X (d x N).
struct BatchMeans {
    Eigen::VectorXd c;
    Eigen::VectorXd tau;
};
BatchMeans batch_means(std::span<const double> theta, const ThetaLayout& layout,
                       const kernels::Matrix& X);

/// Treatment-effect block of theta for linear_ate: tau = 2 tau'.
double ate_from_theta(std::span<const double> theta, const ThetaLayout& layout);

}  // namespace efi
