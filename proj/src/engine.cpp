#include "efi/engine.hpp"

#include "efi/errors.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace efi {

std::vector<double> inverse_features(double y, int t, std::span<const double> x, double z) {
    std::vector<double> f;
    f.reserve(x.size() + 3);
    f.push_back(y);
    f.push_back(t == 1 ? 1.0 : -1.0);
    f.insert(f.end(), x.begin(), x.end());
    f.push_back(z);
    return f;
}

EfiModel::EfiModel(Dataset data, ThetaLayout layout, nn::MlpSpec inverse_spec)
    : EfiModel(data, std::move(layout), std::move(inverse_spec), Standardizer::fit(data)) {}

EfiModel::EfiModel(Dataset data, ThetaLayout layout, nn::MlpSpec inverse_spec, Standardizer standardizer)
    : data_(std::move(data)),
      layout_(std::move(layout)),
      inverse_spec_(std::move(inverse_spec)),
      standardizer_(std::move(standardizer)) {
    validate(data_);
    validate(layout_);
    nn::validate(inverse_spec_);
    if (data_.n == 0) throw DataError("EFI needs at least one observation");
    if (data_.d != layout_.covariate_dim)
        throw DimensionError("dataset has " + std::to_string(data_.d) + " covariates, layout expects " +
                             std::to_string(layout_.covariate_dim));
    if (inverse_spec_.input_width() != data_.d + 3)
        throw DimensionError("inverse network input width must be d + 3 = " + std::to_string(data_.d + 3));
    if (inverse_spec_.output_width() != layout_.dim())
        throw DimensionError("inverse network output width must equal theta dimension " +
                             std::to_string(layout_.dim()));

    const auto n = static_cast<Eigen::Index>(data_.n);
    const auto d = static_cast<Eigen::Index>(data_.d);
    features_.resize(d + 3, n);
    covariates_.resize(d, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = data_.row(static_cast<std::size_t>(i));
        features_(0, i) = standardizer_.y(data_.y[static_cast<std::size_t>(i)]);
        features_(1, i) = data_.t[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            features_(2 + j, i) = standardizer_.x(static_cast<std::size_t>(j), row[static_cast<std::size_t>(j)]);
            covariates_(j, i) = row[static_cast<std::size_t>(j)];
        }
        features_(d + 2, i) = 0.0;
    }
}

std::vector<double> EfiModel::features(std::size_t i, double z) const {
    std::vector<double> f(feature_width());
    for (std::size_t k = 0; k + 1 < f.size(); ++k) f[k] = features_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
    f.back() = z;
    return f;
}

void EfiModel::check_params(const nn::MlpParams& w, std::span<const double> z) const {
    if (w.spec.widths != inverse_spec_.widths)
        throw DimensionError("inverse network weights do not match the model's network shape");
    if (w.flat.size() != nn::parameter_count(inverse_spec_))
        throw DimensionError("inverse network weight vector has the wrong length");
    if (z.size() != data_.n)
        throw DimensionError("latent vector has length " + std::to_string(z.size()) + ", expected " +
                             std::to_string(data_.n));
}

std::vector<double> EfiModel::theta_hat(const nn::MlpParams& w, std::size_t i, double z) const {
    const auto f = features(i, z);
    return nn::mlp_forward(w, f);
}

struct EfiModel::Forward {
    std::vector<std::size_t> rows;
    kernels::BatchTape tape;
    kernels::Matrix theta_hat;   // p x m
    Eigen::VectorXd theta_bar;   // p
    kernels::Matrix deviation;   // theta_hat - theta_bar
    Eigen::VectorXd residual;    // y - f
    Eigen::VectorXd zb;          // z over the batch
    Eigen::VectorXd tb;          // 0/1 treatment over the batch
    kernels::Matrix xb;          // d x m covariates
    UnpackedTheta unpacked;
    kernels::BatchTape c_tape;
    kernels::BatchTape tau_tape;
    double energy = 0.0;
    Eigen::VectorXd fit;
    Eigen::VectorXd consensus;
};

EfiModel::Forward EfiModel::run_forward(const nn::MlpParams& w, std::span<const double> z,
                                        std::span<const std::size_t> rows, const Aggregate* frozen,
                                        bool keep_tape) const {
    check_params(w, z);
    Forward f;
    if (rows.empty()) {
        f.rows.resize(data_.n);
        std::iota(f.rows.begin(), f.rows.end(), std::size_t{0});
    } else {
        f.rows.assign(rows.begin(), rows.end());
    }
    const auto m = static_cast<Eigen::Index>(f.rows.size());
    const auto d = static_cast<Eigen::Index>(data_.d);
    kernels::Matrix input(d + 3, m);
    f.xb.resize(d, m);
    f.zb.resize(m);
    f.tb.resize(m);
    Eigen::VectorXd yb(m);
    for (Eigen::Index k = 0; k < m; ++k) {
        const auto i = f.rows[static_cast<std::size_t>(k)];
        if (i >= data_.n) throw DimensionError("batch row index out of range");
        input.col(k) = features_.col(static_cast<Eigen::Index>(i));
        input(d + 2, k) = z[i];
        f.xb.col(k) = covariates_.col(static_cast<Eigen::Index>(i));
        f.zb[k] = z[i];
        f.tb[k] = data_.t[i];
        yb[k] = data_.y[i];
    }

    f.theta_hat = kernels::forward(inverse_spec_, w.flat, input, &f.tape);
    if (frozen) {
        if (frozen->theta_bar.size() != layout_.dim()) throw DimensionError("frozen theta_bar has the wrong length");
        f.theta_bar = Eigen::Map<const Eigen::VectorXd>(frozen->theta_bar.data(),
                                                        static_cast<Eigen::Index>(frozen->theta_bar.size()));
    } else {
        f.theta_bar = f.theta_hat.rowwise().mean();
    }
    f.deviation = f.theta_hat.colwise() - f.theta_bar;

    f.unpacked = unpack_theta(std::span<const double>(f.theta_bar.data(), static_cast<std::size_t>(f.theta_bar.size())), layout_);
    const auto& p = f.unpacked;
    Eigen::VectorXd c(m), tau(m);
    auto linear = [&](const std::vector<double>& coef) {
        Eigen::Map<const Eigen::VectorXd> beta(coef.data() + 1, d);
        return Eigen::VectorXd((f.xb.transpose() * beta).array() + coef[0]);
    };
    kernels::BatchTape* ct = keep_tape ? &f.c_tape : nullptr;
    kernels::BatchTape* tt = keep_tape ? &f.tau_tape : nullptr;
    switch (layout_.kind) {
        case ModelKind::linear_ate:
            c = linear(p.c_params).array() - p.tau_params[0];
            tau.setConstant(2.0 * p.tau_params[0]);
            break;
        case ModelKind::dnn_tau_linear_c:
            c = linear(p.c_params);
            tau = kernels::forward(layout_.tau_net, std::span<const double>(p.tau_params).subspan(1), f.xb, tt)
                      .row(0)
                      .transpose();
            tau.array() += p.tau_params[0];
            break;
        case ModelKind::dnn_both:
            c = kernels::forward(layout_.c_net, p.c_params, f.xb, ct).row(0).transpose();
            tau = kernels::forward(layout_.tau_net, p.tau_params, f.xb, tt).row(0).transpose();
            break;
    }
    f.residual = yb - c - tau.cwiseProduct(f.tb) - p.sigma * f.zb;
    f.fit = f.residual.array().square();
    f.consensus = f.deviation.colwise().squaredNorm().transpose();
    return f;
}

EnergyReport EfiModel::energy(const nn::MlpParams& w, std::span<const double> z, double eta) const {
    if (!(eta > 0.0)) throw InvalidArgument("eta must be positive");
    const auto f = run_forward(w, z, {}, nullptr, false);
    EnergyReport r;
    r.fit_terms.assign(f.fit.data(), f.fit.data() + f.fit.size());
    r.consensus_terms.assign(f.consensus.data(), f.consensus.data() + f.consensus.size());
    r.theta_bar.assign(f.theta_bar.data(), f.theta_bar.data() + f.theta_bar.size());
    r.total = f.fit.sum() + eta * f.consensus.sum();
    return r;
}

EfiModel::Snapshot EfiModel::snapshot(const nn::MlpParams& w, std::span<const double> z, double eta) const {
    const auto f = run_forward(w, z, {}, nullptr, false);
    Snapshot s;
    s.theta_bar.assign(f.theta_bar.data(), f.theta_bar.data() + f.theta_bar.size());
    s.residuals.assign(f.residual.data(), f.residual.data() + f.residual.size());
    s.energy = f.fit.sum() + eta * f.consensus.sum();
    return s;
}

std::vector<double> EfiModel::theta_bar(const nn::MlpParams& w, std::span<const double> z) const {
    const auto f = run_forward(w, z, {}, nullptr, false);
    return {f.theta_bar.data(), f.theta_bar.data() + f.theta_bar.size()};
}

GradientPass EfiModel::gradient_pass(const nn::MlpParams& w, std::span<const double> z, double eta,
                                     std::span<const std::size_t> rows, const Aggregate* frozen) const {
    if (!(eta > 0.0)) throw InvalidArgument("eta must be positive");
    auto f = run_forward(w, z, rows, frozen, true);
    const auto m = static_cast<Eigen::Index>(f.rows.size());
    const auto d = static_cast<Eigen::Index>(data_.d);
    const auto P = static_cast<Eigen::Index>(layout_.dim());
    const auto& p = f.unpacked;

    GradientPass out;
    out.energy = f.fit.sum() + eta * f.consensus.sum();
    out.theta_bar.assign(f.theta_bar.data(), f.theta_bar.data() + P);

    // A = sum_j d(fit_j)/d(theta_bar); d(fit_j)/d(yhat_j) = -2 r_j
    Eigen::VectorXd A = Eigen::VectorXd::Zero(P);
    const Eigen::VectorXd dfit = -2.0 * f.residual;
    const Eigen::VectorXd dfit_t = dfit.cwiseProduct(f.tb);
    auto linear_grad = [&](std::size_t offset) {
        A[static_cast<Eigen::Index>(offset)] += dfit.sum();
        A.segment(static_cast<Eigen::Index>(offset) + 1, d) += f.xb * dfit;
    };
    const double inv = 1.0 / layout_.rescale;
    switch (layout_.kind) {
        case ModelKind::linear_ate: {
            linear_grad(layout_.c_offset());
            // yhat = tau' t' + ..., t' = 2t - 1
            A[static_cast<Eigen::Index>(layout_.tau_offset())] += (dfit.array() * (2.0 * f.tb.array() - 1.0)).sum();
            break;
        }
        case ModelKind::dnn_tau_linear_c: {
            linear_grad(layout_.c_offset());
            const auto off = layout_.tau_offset();
            A[static_cast<Eigen::Index>(off)] += dfit_t.sum();
            std::vector<double> g(nn::parameter_count(layout_.tau_net), 0.0);
            kernels::backward(layout_.tau_net, std::span<const double>(p.tau_params).subspan(1), f.tau_tape,
                              dfit_t.transpose(), g, nullptr);
            for (std::size_t k = 0; k < g.size(); ++k) A[static_cast<Eigen::Index>(off + 1 + k)] += g[k] * inv;
            break;
        }
        case ModelKind::dnn_both: {
            std::vector<double> gc(nn::parameter_count(layout_.c_net), 0.0);
            kernels::backward(layout_.c_net, p.c_params, f.c_tape, dfit.transpose(), gc, nullptr);
            for (std::size_t k = 0; k < gc.size(); ++k)
                A[static_cast<Eigen::Index>(layout_.c_offset() + k)] += gc[k] * inv;
            std::vector<double> gt(nn::parameter_count(layout_.tau_net), 0.0);
            kernels::backward(layout_.tau_net, p.tau_params, f.tau_tape, dfit_t.transpose(), gt, nullptr);
            for (std::size_t k = 0; k < gt.size(); ++k)
                A[static_cast<Eigen::Index>(layout_.tau_offset() + k)] += gt[k] * inv;
            break;
        }
    }
    A[static_cast<Eigen::Index>(layout_.sigma_slot())] += p.sigma * dfit.dot(f.zb);

    out.aggregate.theta_bar = out.theta_bar;
    out.aggregate.fit_grad.assign(A.data(), A.data() + P);
    out.aggregate.count = static_cast<std::size_t>(m);

    Eigen::VectorXd shared = A / static_cast<double>(m);
    if (frozen) {
        if (frozen->fit_grad.size() != layout_.dim() || frozen->count == 0)
            throw DimensionError("frozen aggregate is incomplete");
        shared = Eigen::Map<const Eigen::VectorXd>(frozen->fit_grad.data(), P) / static_cast<double>(frozen->count);
    }
    kernels::Matrix G = 2.0 * eta * f.deviation;
    G.colwise() += shared;

    out.dU_dw.assign(w.flat.size(), 0.0);
    kernels::Matrix input_grads;
    kernels::backward(inverse_spec_, w.flat, f.tape, G, out.dU_dw, &input_grads);
    out.dU_dz.resize(static_cast<std::size_t>(m));
    for (Eigen::Index k = 0; k < m; ++k)
        out.dU_dz[static_cast<std::size_t>(k)] = dfit[k] * p.sigma + input_grads(d + 2, k);
    return out;
}

EnergyReport energy(const EfiModel& model, const nn::MlpParams& w, std::span<const double> z, double eta) {
    return model.energy(w, z, eta);
}

std::vector<double> grad_log_pred_z(const EfiModel& model, const nn::MlpParams& w,
                                    std::span<const double> z, double eta, double eps) {
    if (!(eps > 0.0)) throw InvalidArgument("epsilon must be positive");
    const auto pass = model.gradient_pass(w, z, eta);
    std::vector<double> g(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) g[i] = -z[i] - pass.dU_dz[i] / eps;
    return g;
}

std::vector<double> grad_log_post_w(const EfiModel& model, const nn::MlpParams& w,
                                    std::span<const double> z, double eta, double eps,
                                    const MixturePrior& prior, std::span<const std::size_t> batch,
                                    double scale) {
    if (!(eps > 0.0)) throw InvalidArgument("epsilon must be positive");
    const auto pass = model.gradient_pass(w, z, eta, batch);
    std::vector<double> g(pass.dU_dw.size());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = -scale * pass.dU_dw[k] / eps;
    add_log_prior_grad(w.flat, prior, g);
    return g;
}

}  // namespace efi
