#pragma once

#include "efi/engine.hpp"
#include "efi/nn.hpp"
#include "efi/prior.hpp"
#include "efi/rng.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace efi {

/// rate_k = scale / (offset + k^alpha)
struct RateConstants {
    double scale = 1.0;   // C
    double offset = 1.0;  // c
};

inline constexpr const char* kDefaultGroup = "default";
inline constexpr const char* kTauHeadGroup = "tau_head";  // output-layer rows producing theta_tau
inline constexpr const char* kCHeadGroup = "c_head";      // output-layer rows producing theta_c

struct ScheduleParams {
    RateConstants upsilon{200000.0, 1e6};
    std::map<std::string, RateConstants> gamma{{kDefaultGroup, {54000.0, 1e6}}};
    double alpha = 1.0 / 7.0;
    double varpi = 0.1;  // momentum; 1 gives SGLD
};

void validate(const ScheduleParams& s);

struct Rates {
    double upsilon = 0.0;
    double gamma = 0.0;
};

/// Learning rate of the latent sampler and step size of `group` at iteration k >= 1.
Rates schedule_at(const ScheduleParams& params, const std::string& group, std::size_t k);

/// Step-size group of every inverse-network weight. Output-layer rows feeding
/// theta_tau / theta_c go to the head groups when the schedule defines them.
std::vector<std::string> weight_groups(const nn::MlpSpec& inverse_spec, const ThetaLayout& layout,
                                       const ScheduleParams& schedule);

struct EfiState {
    nn::MlpParams w;
    std::vector<double> z;
    std::vector<double> v;
    std::size_t iteration = 0;
};

/// V <- (1 - varpi) V + upsilon grad + sqrt(2 varpi upsilon) e,  Z <- Z + V  (temperature 1).
void sghmc_z_step(EfiState& state, std::span<const double> grad, double upsilon, double varpi, Rng& rng);

/// Ascent step w <- w + step * grad with per-weight step sizes; when
/// clip_norm is set the gradient is first rescaled to norm <= clip_norm.
/// Returns the gradient norm before clipping.
double sgd_w_step(nn::MlpParams& w, std::span<double> grad, std::span<const double> step,
                  std::optional<double> clip_norm);
double sgd_w_step(nn::MlpParams& w, std::span<double> grad, double step, std::optional<double> clip_norm);

struct RunConfig {
    double eta = 10.0;
    double eps = 0.1;
    std::size_t burn_in = 20000;    // K
    std::size_t keep = 50000;       // M
    std::size_t thin = 5;           // B
    std::size_t batch_size = 0;     // m; 0 = full batch
    std::size_t init_iters = 0;     // iterations with z drawn fresh from N(0, 1)
    double clip_norm = 5000.0;       // on the unnormalized gradient
    double step_scale = 0.5;         // multiplies every gamma_k
    double inner_step_scale = 1e-3;  // step multiplier for every weight except the output bias
    double latent_step_scale = 1.0;  // multiplies every upsilon_k
    std::size_t clip_iters = 100;
    std::uint64_t seed = 0;
    MixturePrior prior{};
    std::size_t trace_every = 0;    // 0 disables the trace
};

void validate(const RunConfig& c);

struct FiducialChain {
    std::vector<std::vector<double>> draws;  // theta_bar samples
    std::vector<double> sigmas;
    std::vector<double> energies;
    std::vector<double> z_final;
    nn::MlpParams w_final;
    std::vector<double> energy_trace;        // U at every iteration, phases A and B
    std::size_t init_iters = 0;
};

/// Runs the sampler. When `trace` is non-null a CSV row
/// (iteration, phase, energy, gamma, upsilon, grad_norm, sigma) is written every trace_every iterations.
FiducialChain run_efi(const EfiModel& model, const ScheduleParams& schedule, const RunConfig& config,
                      std::ostream* trace = nullptr);

FiducialChain run_efi(const Dataset& data, const ThetaLayout& layout, const nn::MlpSpec& inverse_spec,
                      const ScheduleParams& schedule, const RunConfig& config,
                      std::ostream* trace = nullptr);

}  // namespace efi
