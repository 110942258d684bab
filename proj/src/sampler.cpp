#include "efi/sampler.hpp"

#include "efi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

namespace efi {

void validate(const ScheduleParams& s) {
    auto check = [](const RateConstants& r, const std::string& what) {
        if (!(r.scale > 0.0 && r.offset > 0.0)) throw InvalidArgument(what + " constants must be positive");
    };
    check(s.upsilon, "upsilon");
    if (!s.gamma.count(kDefaultGroup)) throw InvalidArgument("schedule needs a 'default' gamma group");
    for (const auto& [name, r] : s.gamma) check(r, "gamma group '" + name + "'");
    if (!(s.alpha > 0.0 && s.alpha <= 1.0)) throw InvalidArgument("schedule exponent must lie in (0, 1]");
    if (!(s.varpi > 0.0 && s.varpi <= 1.0)) throw InvalidArgument("momentum varpi must lie in (0, 1]");
}

Rates schedule_at(const ScheduleParams& params, const std::string& group, std::size_t k) {
    if (k == 0) throw InvalidArgument("schedule iterations start at 1");
    auto it = params.gamma.find(group);
    if (it == params.gamma.end()) throw InvalidArgument("unknown step-size group '" + group + "'");
    const double ka = std::pow(static_cast<double>(k), params.alpha);
    return {params.upsilon.scale / (params.upsilon.offset + ka), it->second.scale / (it->second.offset + ka)};
}

std::vector<std::string> weight_groups(const nn::MlpSpec& inverse_spec, const ThetaLayout& layout,
                                       const ScheduleParams& schedule) {
    std::vector<std::string> groups(nn::parameter_count(inverse_spec), kDefaultGroup);
    const std::size_t H = inverse_spec.num_layers();
    const std::size_t cols = inverse_spec.widths[H - 1];
    const std::size_t w_off = nn::weight_offset(inverse_spec, H);
    const std::size_t b_off = nn::bias_offset(inverse_spec, H);
    auto tag = [&](std::size_t first_row, std::size_t rows, const char* name) {
        if (!schedule.gamma.count(name)) return;
        for (std::size_t r = first_row; r < first_row + rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) groups[w_off + r * cols + c] = name;
            groups[b_off + r] = name;
        }
    };
    // the scalar eta0 of dnn_tau_linear_c is not rescaled and keeps the default rate
    const std::size_t eta0 = layout.kind == ModelKind::dnn_tau_linear_c ? 1 : 0;
    tag(layout.tau_offset() + eta0, layout.tau_size() - eta0, kTauHeadGroup);
    tag(layout.c_offset(), layout.c_size(), kCHeadGroup);
    return groups;
}

void sghmc_z_step(EfiState& state, std::span<const double> grad, double upsilon, double varpi, Rng& rng) {
    if (grad.size() != state.z.size()) throw DimensionError("latent gradient has the wrong length");
    if (state.v.size() != state.z.size()) state.v.assign(state.z.size(), 0.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double noise = std::sqrt(2.0 * varpi * upsilon);
    for (std::size_t i = 0; i < state.z.size(); ++i) {
        state.v[i] = (1.0 - varpi) * state.v[i] + upsilon * grad[i] + noise * normal(rng);
        state.z[i] += state.v[i];
    }
}

double sgd_w_step(nn::MlpParams& w, std::span<double> grad, std::span<const double> step,
                  std::optional<double> clip_norm) {
    if (grad.size() != w.flat.size() || step.size() != w.flat.size())
        throw DimensionError("weight gradient has the wrong length");
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    double factor = 1.0;
    if (clip_norm && norm > *clip_norm) factor = *clip_norm / norm;
    for (std::size_t k = 0; k < grad.size(); ++k) w.flat[k] += step[k] * factor * grad[k];
    return norm;
}

double sgd_w_step(nn::MlpParams& w, std::span<double> grad, double step, std::optional<double> clip_norm) {
    const std::vector<double> steps(w.flat.size(), step);
    return sgd_w_step(w, grad, steps, clip_norm);
}

void validate(const RunConfig& c) {
    if (!(c.eta > 0.0)) throw InvalidArgument("eta must be positive");
    if (!(c.eps > 0.0)) throw InvalidArgument("epsilon must be positive");
    if (c.thin == 0) throw InvalidArgument("thinning factor must be at least 1");
    if (c.keep < c.thin) throw InvalidArgument("keep must be at least the thinning factor");
    if (!(c.clip_norm > 0.0)) throw InvalidArgument("clip norm must be positive");
    if (!(c.step_scale > 0.0)) throw InvalidArgument("step scale must be positive");
    if (!(c.inner_step_scale >= 0.0)) throw InvalidArgument("inner step scale must be non-negative");
    if (!(c.latent_step_scale > 0.0)) throw InvalidArgument("latent step scale must be positive");
    validate(c.prior);
}

FiducialChain run_efi(const EfiModel& model, const ScheduleParams& schedule, const RunConfig& config,
                      std::ostream* trace) {
    validate(schedule);
    validate(config);
    const std::size_t n = model.n();
    const std::size_t m = config.batch_size == 0 ? n : std::min(config.batch_size, n);
    const bool minibatch = m < n;

    nn::MlpSpec spec = model.inverse_spec();
    spec.seed = derive_seed(config.seed, 14);
    EfiState state{nn::mlp_init(spec), std::vector<double>(n), std::vector<double>(n, 0.0), 0};

    // Output layer starts at zero: every theta_hat_i equals the output bias,
    // which holds the starting theta.
    const std::size_t out_w = nn::weight_offset(spec, spec.num_layers());
    const std::size_t out_b = nn::bias_offset(spec, spec.num_layers());
    std::fill(state.w.flat.begin() + static_cast<std::ptrdiff_t>(out_w),
              state.w.flat.begin() + static_cast<std::ptrdiff_t>(out_b), 0.0);
    const auto theta0 = initial_theta(model.layout(), derive_seed(config.seed, 15));
    std::copy(theta0.begin(), theta0.end(), state.w.flat.begin() + static_cast<std::ptrdiff_t>(out_b));
    Rng init_rng(derive_seed(config.seed, 13));
    Rng z_rng(derive_seed(config.seed, 11));
    Rng batch_rng(derive_seed(config.seed, 12));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : state.z) v = normal(init_rng);

    const auto groups = weight_groups(spec, model.layout(), schedule);
    std::vector<double> steps(groups.size());
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<std::size_t> batch;

    // The parameter step ascends the log posterior per observation:
    // (1/n) [ (n/m) sum_batch grad log pi_eps(y_i | ...) + grad log pi(w) ].
    const double per_obs = 1.0 / static_cast<double>(n);
    const double lik_scale = static_cast<double>(n) / static_cast<double>(m);

    FiducialChain chain;
    chain.init_iters = config.init_iters;
    const std::size_t total_b = config.burn_in + config.keep;
    chain.energy_trace.reserve(config.init_iters + total_b + 1);
    chain.draws.reserve(config.keep / config.thin);

    std::size_t k = 0;
    if (trace && config.trace_every > 0) *trace << "iteration,phase,energy,gamma,upsilon,grad_norm,sigma\n";

    auto draw_batch = [&]() -> std::span<const std::size_t> {
        if (!minibatch) return {};
        batch = all;
        for (std::size_t i = 0; i < m; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(batch[i], batch[pick(batch_rng)]);
        }
        batch.resize(m);
        std::sort(batch.begin(), batch.end());
        return batch;
    };

    auto w_update = [&](const GradientPass& pass, std::size_t iter) {
        std::vector<double> g(pass.dU_dw.size());
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = -lik_scale * pass.dU_dw[j] / config.eps;
        // The output bias carries theta_bar and is left unpenalized.
        add_log_prior_grad(std::span<const double>(state.w.flat).first(out_b), config.prior,
                           std::span<double>(g).first(out_b));
        for (double& v : g) v *= per_obs;
        for (std::size_t j = 0; j < steps.size(); ++j) {
            steps[j] = config.step_scale * schedule_at(schedule, groups[j], iter).gamma;
            if (j < out_b) steps[j] *= config.inner_step_scale;
        }
        // clip_norm bounds the unnormalized gradient n * g.
        const std::optional<double> clip =
            iter <= config.clip_iters ? std::optional<double>(config.clip_norm * per_obs) : std::nullopt;
        const double norm = sgd_w_step(state.w, g, steps, clip);
        if (!std::isfinite(norm))
            throw DivergenceError("non-finite weight gradient at iteration " + std::to_string(iter));
        return norm;
    };

    auto check_energy = [&](double u, std::size_t iter) {
        if (!std::isfinite(u))
            throw DivergenceError("energy became non-finite at iteration " + std::to_string(iter));
    };

    auto write_trace = [&](std::size_t iter, const char* phase, const GradientPass& pass, double norm) {
        if (!trace || config.trace_every == 0 || iter % config.trace_every != 0) return;
        const auto r = schedule_at(schedule, kDefaultGroup, iter);
        *trace << iter << ',' << phase << ',' << pass.energy << ',' << r.gamma << ',' << r.upsilon << ','
               << norm << ',' << std::exp(pass.theta_bar[model.layout().sigma_slot()]) << '\n';
    };

    // Phase A: fit w against latent errors drawn from the reference law.
    for (std::size_t a = 0; a < config.init_iters; ++a) {
        ++k;
        for (double& v : state.z) v = normal(init_rng);
        const auto pass = model.gradient_pass(state.w, state.z, config.eta, draw_batch());
        check_energy(pass.energy, k);
        chain.energy_trace.push_back(pass.energy);
        const double norm = w_update(pass, k);
        write_trace(k, "init", pass, norm);
    }

    // Phase B: alternate latent SGHMC and parameter updates.
    const std::size_t sigma_slot = model.layout().sigma_slot();
    for (std::size_t s = 0;; ++s) {
        const bool full_needed = minibatch;
        GradientPass pass = model.gradient_pass(state.w, state.z, config.eta);
        check_energy(pass.energy, k + 1);
        if (s > config.burn_in && (s - config.burn_in) % config.thin == 0) {
            chain.draws.push_back(pass.theta_bar);
            chain.sigmas.push_back(std::exp(pass.theta_bar[sigma_slot]));
            chain.energies.push_back(pass.energy);
        }
        if (s == total_b) break;
        ++k;
        chain.energy_trace.push_back(pass.energy);

        std::vector<double> gz(n);
        for (std::size_t i = 0; i < n; ++i) gz[i] = -state.z[i] - pass.dU_dz[i] / config.eps;

        double norm = 0.0;
        if (full_needed) {
            const auto bpass = model.gradient_pass(state.w, state.z, config.eta, draw_batch());
            norm = w_update(bpass, k);
        } else {
            norm = w_update(pass, k);
        }
        // Latent step on the per-observation scale; the noise keeps temperature 1.
        const double upsilon = schedule_at(schedule, kDefaultGroup, k).upsilon * per_obs * config.latent_step_scale;
        sghmc_z_step(state, gz, upsilon, schedule.varpi, z_rng);
        state.iteration = k;
        write_trace(k, "sample", pass, norm);
    }

    chain.z_final = state.z;
    chain.w_final = state.w;
    return chain;
}

FiducialChain run_efi(const Dataset& data, const ThetaLayout& layout, const nn::MlpSpec& inverse_spec,
                      const ScheduleParams& schedule, const RunConfig& config, std::ostream* trace) {
    const EfiModel model(data, layout, inverse_spec);
    return run_efi(model, schedule, config, trace);
}

}  // namespace efi
