#include "efi/theta_layout.hpp"

#include "efi/errors.hpp"
#include "efi/rng.hpp"

#include <algorithm>

#include <cmath>
#include <string>

namespace efi {

ModelKind parse_model_kind(std::string_view name) {
    if (name == "linear_ate") return ModelKind::linear_ate;
    if (name == "dnn_tau_linear_c") return ModelKind::dnn_tau_linear_c;
    if (name == "dnn_both") return ModelKind::dnn_both;
    throw InvalidArgument("unknown model kind '" + std::string(name) + "'");
}

std::string_view to_string(ModelKind k) {
    switch (k) {
        case ModelKind::linear_ate: return "linear_ate";
        case ModelKind::dnn_tau_linear_c: return "dnn_tau_linear_c";
        case ModelKind::dnn_both: return "dnn_both";
    }
    return "?";
}

std::vector<double> initial_theta(const ThetaLayout& layout, std::uint64_t seed) {
    validate(layout);
    UnpackedTheta parts{std::vector<double>(layout.c_size(), 0.0), std::vector<double>(layout.tau_size(), 0.0), 1.0};
    auto glorot = [](nn::MlpSpec spec, std::uint64_t s) {
        spec.seed = s;
        return nn::mlp_init(spec).flat;
    };
    switch (layout.kind) {
        case ModelKind::linear_ate: break;
        case ModelKind::dnn_tau_linear_c: {
            const auto w = glorot(layout.tau_net, derive_seed(seed, 2));
            std::copy(w.begin(), w.end(), parts.tau_params.begin() + 1);
            break;
        }
        case ModelKind::dnn_both:
            parts.c_params = glorot(layout.c_net, derive_seed(seed, 1));
            parts.tau_params = glorot(layout.tau_net, derive_seed(seed, 2));
            break;
    }
    return pack_theta(parts, layout);
}

namespace {

nn::MlpSpec scalar_net(std::size_t d, const std::vector<std::size_t>& hidden, nn::Activation act) {
    nn::MlpSpec s;
    s.widths.push_back(d);
    s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
    s.widths.push_back(1);
    s.activation = act;
    return s;
}

}  // namespace

ThetaLayout ThetaLayout::linear_ate(std::size_t d) {
    ThetaLayout l;
    l.kind = ModelKind::linear_ate;
    l.covariate_dim = d;
    return l;
}

ThetaLayout ThetaLayout::dnn_tau_linear_c(std::size_t d, std::vector<std::size_t> tau_hidden,
                                          nn::Activation act, double rescale) {
    ThetaLayout l;
    l.kind = ModelKind::dnn_tau_linear_c;
    l.covariate_dim = d;
    l.tau_net = scalar_net(d, tau_hidden, act);
    l.rescale = rescale;
    validate(l);
    return l;
}

ThetaLayout ThetaLayout::dnn_both(std::size_t d, std::vector<std::size_t> c_hidden,
                                  std::vector<std::size_t> tau_hidden, nn::Activation act,
                                  double rescale) {
    ThetaLayout l;
    l.kind = ModelKind::dnn_both;
    l.covariate_dim = d;
    l.c_net = scalar_net(d, c_hidden, act);
    l.tau_net = scalar_net(d, tau_hidden, act);
    l.rescale = rescale;
    validate(l);
    return l;
}

std::size_t ThetaLayout::c_size() const {
    switch (kind) {
        case ModelKind::linear_ate:
        case ModelKind::dnn_tau_linear_c: return 1 + covariate_dim;
        case ModelKind::dnn_both: return nn::parameter_count(c_net);
    }
    return 0;
}

std::size_t ThetaLayout::tau_size() const {
    switch (kind) {
        case ModelKind::linear_ate: return 1;
        case ModelKind::dnn_tau_linear_c: return 1 + nn::parameter_count(tau_net);
        case ModelKind::dnn_both: return nn::parameter_count(tau_net);
    }
    return 0;
}

std::size_t ThetaLayout::c_offset() const { return kind == ModelKind::linear_ate ? 1 : 0; }

std::size_t ThetaLayout::tau_offset() const { return kind == ModelKind::linear_ate ? 0 : c_size(); }

void validate(const ThetaLayout& layout) {
    if (layout.covariate_dim == 0) throw InvalidSpec("layout needs at least one covariate");
    if (!(layout.rescale > 0.0)) throw InvalidSpec("layout rescale factor must be positive");
    auto check_net = [&](const nn::MlpSpec& s, const char* name) {
        nn::validate(s);
        if (s.input_width() != layout.covariate_dim || s.output_width() != 1)
            throw InvalidSpec(std::string(name) + " must map the covariates to a scalar");
    };
    if (layout.kind != ModelKind::linear_ate) check_net(layout.tau_net, "tau network");
    if (layout.kind == ModelKind::dnn_both) check_net(layout.c_net, "c network");
}

UnpackedTheta unpack_theta(std::span<const double> theta, const ThetaLayout& layout) {
    if (theta.size() != layout.dim())
        throw DimensionError("theta has length " + std::to_string(theta.size()) + ", layout expects " +
                             std::to_string(layout.dim()));
    UnpackedTheta out;
    auto c = theta.subspan(layout.c_offset(), layout.c_size());
    auto tau = theta.subspan(layout.tau_offset(), layout.tau_size());
    out.c_params.assign(c.begin(), c.end());
    out.tau_params.assign(tau.begin(), tau.end());
    const double inv = 1.0 / layout.rescale;
    switch (layout.kind) {
        case ModelKind::linear_ate: break;
        case ModelKind::dnn_tau_linear_c:
            for (std::size_t k = 1; k < out.tau_params.size(); ++k) out.tau_params[k] *= inv;
            break;
        case ModelKind::dnn_both:
            for (double& v : out.c_params) v *= inv;
            for (double& v : out.tau_params) v *= inv;
            break;
    }
    out.sigma = std::exp(theta[layout.sigma_slot()]);
    return out;
}

std::vector<double> pack_theta(const UnpackedTheta& parts, const ThetaLayout& layout) {
    if (parts.c_params.size() != layout.c_size() || parts.tau_params.size() != layout.tau_size())
        throw DimensionError("unpacked blocks do not match the layout");
    if (!(parts.sigma > 0.0)) throw InvalidArgument("sigma must be positive");
    std::vector<double> theta(layout.dim());
    const double s = layout.rescale;
    for (std::size_t k = 0; k < parts.c_params.size(); ++k) {
        const bool scaled = layout.kind == ModelKind::dnn_both;
        theta[layout.c_offset() + k] = scaled ? parts.c_params[k] * s : parts.c_params[k];
    }
    for (std::size_t k = 0; k < parts.tau_params.size(); ++k) {
        const bool scaled = layout.kind == ModelKind::dnn_both ||
                            (layout.kind == ModelKind::dnn_tau_linear_c && k > 0);
        theta[layout.tau_offset() + k] = scaled ? parts.tau_params[k] * s : parts.tau_params[k];
    }
    theta[layout.sigma_slot()] = std::log(parts.sigma);
    return theta;
}

namespace {

double linear_c(const std::vector<double>& c, std::span<const double> x) {
    double v = c[0];
    for (std::size_t j = 0; j < x.size(); ++j) v += c[1 + j] * x[j];
    return v;
}

double c_of(const UnpackedTheta& p, const ThetaLayout& layout, std::span<const double> x) {
    switch (layout.kind) {
        case ModelKind::linear_ate: return linear_c(p.c_params, x) - p.tau_params[0];
        case ModelKind::dnn_tau_linear_c: return linear_c(p.c_params, x);
        case ModelKind::dnn_both: return nn::mlp_forward(layout.c_net, p.c_params, x)[0];
    }
    return 0.0;
}

double tau_of(const UnpackedTheta& p, const ThetaLayout& layout, std::span<const double> x) {
    switch (layout.kind) {
        case ModelKind::linear_ate: return 2.0 * p.tau_params[0];
        case ModelKind::dnn_tau_linear_c:
            return p.tau_params[0] +
                   nn::mlp_forward(layout.tau_net, std::span<const double>(p.tau_params).subspan(1), x)[0];
        case ModelKind::dnn_both: return nn::mlp_forward(layout.tau_net, p.tau_params, x)[0];
    }
    return 0.0;
}

}  // namespace

double model_predict(std::span<const double> theta, const ThetaLayout& layout,
                     std::span<const double> x, int t, double z) {
    if (x.size() != layout.covariate_dim) throw DimensionError("covariate row has the wrong length");
    const auto p = unpack_theta(theta, layout);
    if (layout.kind == ModelKind::linear_ate) {
        const double tp = t == 1 ? 1.0 : -1.0;
        return p.tau_params[0] * tp + linear_c(p.c_params, x) + p.sigma * z;
    }
    return c_of(p, layout, x) + tau_of(p, layout, x) * t + p.sigma * z;
}

double control_mean(std::span<const double> theta, const ThetaLayout& layout, std::span<const double> x) {
    return c_of(unpack_theta(theta, layout), layout, x);
}

double treatment_effect(std::span<const double> theta, const ThetaLayout& layout,
                        std::span<const double> x) {
    return tau_of(unpack_theta(theta, layout), layout, x);
}

BatchMeans batch_means(std::span<const double> theta, const ThetaLayout& layout,
                       const kernels::Matrix& X) {
    const auto p = unpack_theta(theta, layout);
    const Eigen::Index n = X.cols();
    BatchMeans out{Eigen::VectorXd(n), Eigen::VectorXd(n)};
    auto linear = [&](const std::vector<double>& c) {
        Eigen::Map<const Eigen::VectorXd> beta(c.data() + 1, static_cast<Eigen::Index>(c.size() - 1));
        return Eigen::VectorXd((X.transpose() * beta).array() + c[0]);
    };
    switch (layout.kind) {
        case ModelKind::linear_ate:
            out.c = linear(p.c_params).array() - p.tau_params[0];
            out.tau.setConstant(2.0 * p.tau_params[0]);
            break;
        case ModelKind::dnn_tau_linear_c:
            out.c = linear(p.c_params);
            out.tau = kernels::forward(layout.tau_net,
                                       std::span<const double>(p.tau_params).subspan(1), X)
                          .row(0)
                          .transpose();
            out.tau.array() += p.tau_params[0];
            break;
        case ModelKind::dnn_both:
            out.c = kernels::forward(layout.c_net, p.c_params, X).row(0).transpose();
            out.tau = kernels::forward(layout.tau_net, p.tau_params, X).row(0).transpose();
            break;
    }
    return out;
}

double ate_from_theta(std::span<const double> theta, const ThetaLayout& layout) {
    if (layout.kind != ModelKind::linear_ate)
        throw InvalidArgument("ATE extraction needs the linear_ate layout");
    if (theta.size() != layout.dim()) throw DimensionError("theta has the wrong length");
    return 2.0 * theta[layout.tau_offset()];
}

}  // namespace efi
