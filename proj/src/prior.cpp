#include "efi/prior.hpp"

#include "efi/errors.hpp"

#include <cmath>
#include <numbers>

namespace efi {

namespace {

struct Component {
    double log_weight;  // log(mix weight) - log(sigma) - log(sqrt(2 pi))
    double inv_var;
};

struct Components {
    Component slab;
    Component spike;
};

Components components(const MixturePrior& p) {
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    return {{std::log(p.rho) - std::log(p.sigma1) - half_log_2pi, 1.0 / (p.sigma1 * p.sigma1)},
            {std::log1p(-p.rho) - std::log(p.sigma0) - half_log_2pi, 1.0 / (p.sigma0 * p.sigma0)}};
}

}  // namespace

void validate(const MixturePrior& prior) {
    if (!(prior.rho > 0.0 && prior.rho < 1.0))
        throw InvalidArgument("mixture weight rho must lie in (0, 1)");
    if (!(prior.sigma0 > 0.0 && prior.sigma0 < prior.sigma1))
        throw InvalidArgument("mixture prior needs 0 < sigma0 < sigma1");
}

double log_prior(std::span<const double> w, const MixturePrior& prior) {
    const auto c = components(prior);
    double total = 0.0;
    for (double x : w) {
        const double a = c.slab.log_weight - 0.5 * x * x * c.slab.inv_var;
        const double b = c.spike.log_weight - 0.5 * x * x * c.spike.inv_var;
        const double hi = std::max(a, b);
        total += hi + std::log1p(std::exp(std::min(a, b) - hi));
    }
    return total;
}

void add_log_prior_grad(std::span<const double> w, const MixturePrior& prior, std::span<double> out) {
    if (out.size() != w.size()) throw DimensionError("prior gradient output has the wrong length");
    const auto c = components(prior);
    for (std::size_t j = 0; j < w.size(); ++j) {
        const double x = w[j];
        const double a = c.slab.log_weight - 0.5 * x * x * c.slab.inv_var;
        const double b = c.spike.log_weight - 0.5 * x * x * c.spike.inv_var;
        // responsibility of the slab component, evaluated without overflow
        const double r_slab = a >= b ? 1.0 / (1.0 + std::exp(b - a)) : std::exp(a - b) / (1.0 + std::exp(a - b));
        out[j] += -x * (r_slab * c.slab.inv_var + (1.0 - r_slab) * c.spike.inv_var);
    }
}

std::vector<double> log_prior_grad(std::span<const double> w, const MixturePrior& prior) {
    std::vector<double> g(w.size(), 0.0);
    add_log_prior_grad(w, prior, g);
    return g;
}

}  // namespace efi
