#pragma once

// Energy of the EFI network and the gradients the sampler needs.
//
// For observation i the inverse network maps the feature row
// [y~_i, t'_i, x~_i, z_i] (standardized outcome and covariates, treatment
// coded +-1, raw latent error) to theta_hat_i. With theta_bar the mean of
// theta_hat_i over the batch,
//
//   U = sum_i (y_i - f(x_i, t_i, z_i; theta_bar))^2 + eta sum_i |theta_hat_i - theta_bar|^2.
//
// One reverse pass gives dU/dz_i and dU/dw. The fit terms reach theta_hat_i
// only through theta_bar, so every observation receives the same aggregate
// A / m with A = sum_j d(fit_j)/d(theta_bar); the consensus terms contribute
// 2 eta (theta_hat_i - theta_bar) (the mean identity removes their theta_bar path).

#include "efi/dataset.hpp"
#include "efi/kernels.hpp"
#include "efi/nn.hpp"
#include "efi/prior.hpp"
#include "efi/theta_layout.hpp"

#include <optional>
#include <span>
#include <vector>

namespace efi {

struct EnergyReport {
    double total = 0.0;
    std::vector<double> fit_terms;        // e_i2
    std::vector<double> consensus_terms;  // e_i1
    std::vector<double> theta_bar;
};

/// Feature row [y, t', x..., z] with t' = 2t - 1.
std::vector<double> inverse_features(double y, int t, std::span<const double> x, double z);

/// Frozen batch statistics, used to split a full-batch gradient across sub-batches.
struct Aggregate {
    std::vector<double> theta_bar;
    std::vector<double> fit_grad;  // A = sum_j d(fit_j)/d(theta_bar)
    std::size_t count = 0;
};

struct GradientPass {
    double energy = 0.0;
    std::vector<double> theta_bar;
    std::vector<double> dU_dz;  // one entry per row of the batch
    std::vector<double> dU_dw;
    Aggregate aggregate;
};

class EfiModel {
public:
    EfiModel(Dataset data, ThetaLayout layout, nn::MlpSpec inverse_spec);
    EfiModel(Dataset data, ThetaLayout layout, nn::MlpSpec inverse_spec, Standardizer standardizer);

    const Dataset& data() const { return data_; }
    const ThetaLayout& layout() const { return layout_; }
    const nn::MlpSpec& inverse_spec() const { return inverse_spec_; }
    const Standardizer& standardizer() const { return standardizer_; }
    std::size_t n() const { return data_.n; }
    std::size_t feature_width() const { return data_.d + 3; }

    /// Standardized feature row of observation i with latent value z.
    std::vector<double> features(std::size_t i, double z) const;

    std::vector<double> theta_hat(const nn::MlpParams& w, std::size_t i, double z) const;
    std::vector<double> theta_bar(const nn::MlpParams& w, std::span<const double> z) const;

    EnergyReport energy(const nn::MlpParams& w, std::span<const double> z, double eta) const;

    /// Forward and reverse pass over `rows` (all observations when empty);
    /// z holds one latent value per observation of the full dataset. When
    /// `frozen` is given its theta_bar and A replace the batch statistics.
    GradientPass gradient_pass(const nn::MlpParams& w, std::span<const double> z, double eta,
                               std::span<const std::size_t> rows = {},
                               const Aggregate* frozen = nullptr) const;

    /// theta_bar, fit residuals y_i - f(...) and U at (w, z) over every observation.
    struct Snapshot {
        std::vector<double> theta_bar;
        std::vector<double> residuals;
        double energy = 0.0;
    };
    Snapshot snapshot(const nn::MlpParams& w, std::span<const double> z, double eta) const;

private:
    struct Forward;
    Forward run_forward(const nn::MlpParams& w, std::span<const double> z,
                        std::span<const std::size_t> rows, const Aggregate* frozen, bool keep_tape) const;
    void check_params(const nn::MlpParams& w, std::span<const double> z) const;

    Dataset data_;
    ThetaLayout layout_;
    nn::MlpSpec inverse_spec_;
    Standardizer standardizer_;
    kernels::Matrix features_;    // (d + 3) x n, z row left at zero
    kernels::Matrix covariates_;  // d x n, original units
};

EnergyReport energy(const EfiModel& model, const nn::MlpParams& w, std::span<const double> z, double eta);

/// grad_z log pi_eps(Z | X, Y, w) = -z - (1/eps) dU/dz.
std::vector<double> grad_log_pred_z(const EfiModel& model, const nn::MlpParams& w,
                                    std::span<const double> z, double eta, double eps);

/// scale * (-(1/eps) dU_batch/dw) + grad log pi(w), with theta_bar over the batch.
std::vector<double> grad_log_post_w(const EfiModel& model, const nn::MlpParams& w,
                                    std::span<const double> z, double eta, double eps,
                                    const MixturePrior& prior, std::span<const std::size_t> batch = {},
                                    double scale = 1.0);

}  // namespace efi
