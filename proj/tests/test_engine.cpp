#include "doctest.h"
#include "support.hpp"

#include "efi/datagen.hpp"
#include "efi/engine.hpp"
#include "efi/errors.hpp"

#include <cmath>
#include <numeric>

using namespace efi;

namespace {

ThetaLayout small_layout(ModelKind kind, std::size_t d) {
    switch (kind) {
        case ModelKind::linear_ate: return ThetaLayout::linear_ate(d);
        case ModelKind::dnn_tau_linear_c: return ThetaLayout::dnn_tau_linear_c(d, {3});
        case ModelKind::dnn_both: return ThetaLayout::dnn_both(d, {3}, {2});
    }
    return ThetaLayout::linear_ate(d);
}

nn::MlpSpec inverse_for(const ThetaLayout& layout, std::uint64_t seed) {
    nn::MlpSpec s;
    s.widths = {layout.covariate_dim + 3, 6, 5, layout.dim()};
    s.activation = nn::Activation::tanh;
    s.seed = seed;
    return s;
}

nn::MlpParams perturbed(const nn::MlpSpec& spec, std::uint64_t seed, double scale) {
    auto w = nn::mlp_init(spec);
    const auto noise = testing::normal_vector(w.flat.size(), seed, scale);
    for (std::size_t k = 0; k < w.flat.size(); ++k) w.flat[k] += noise[k];
    return w;
}

Design design_for(ModelKind kind) {
    return kind == ModelKind::linear_ate ? Design::linear_ate : Design::example2;
}

struct Toy {
    EfiModel model;
    nn::MlpParams w;
    std::vector<double> z;
};

Toy make_toy(ModelKind kind, std::size_t n, std::uint64_t seed) {
    const Design des = design_for(kind);
    auto data = generate({des, n, seed, des == Design::example2 ? std::size_t{2} : std::size_t{0}});
    const auto layout = small_layout(kind, data.d);
    const auto spec = inverse_for(layout, seed);
    EfiModel model(std::move(data), layout, spec);
    return {std::move(model), perturbed(spec, seed + 1, 0.2), testing::normal_vector(n, seed + 2)};
}

}  // namespace

TEST_CASE("inverse feature rows") {
    CHECK(inverse_features(0.0, 1, std::vector<double>{0.0, 0.0}, 0.0) == std::vector<double>{0, 1, 0, 0, 0});
    CHECK(inverse_features(2.0, 0, std::vector<double>{1.0}, -1.0) == std::vector<double>{2, -1, 1, -1});
}

TEST_CASE("theta layout fixtures") {
    const auto lin = ThetaLayout::linear_ate(1);
    const std::vector<double> theta{0.5, 1.5, 0.0, 0.0};
    CHECK(model_predict(theta, lin, std::vector<double>{0.0}, 1, 0.0) == doctest::Approx(2.0));
    CHECK(treatment_effect(theta, lin, std::vector<double>{0.0}) == doctest::Approx(1.0));
    CHECK(control_mean(theta, lin, std::vector<double>{0.0}) == doctest::Approx(1.0));
    CHECK(ate_from_theta(theta, lin) == doctest::Approx(1.0));
    const auto parts = unpack_theta(theta, lin);
    CHECK(parts.sigma == 1.0);

    const auto dnn = ThetaLayout::dnn_tau_linear_c(2, {3});
    std::vector<double> raw(dnn.dim(), 0.0);
    raw[dnn.tau_offset() + 1] = 25.0;
    CHECK(unpack_theta(raw, dnn).tau_params[1] == doctest::Approx(1.0));
    CHECK(pack_theta(unpack_theta(raw, dnn), dnn) == raw);

    const auto both = ThetaLayout::dnn_both(2, {3}, {3});
    const std::vector<double> zero(both.dim(), 0.0);
    CHECK(model_predict(zero, both, std::vector<double>{0.3, 0.4}, 1, 1.0) == doctest::Approx(1.0));
    CHECK(model_predict(zero, both, std::vector<double>{0.3, 0.4}, 0, 0.0) == 0.0);
}

TEST_CASE("theta_hat is the inverse network on the feature row") {
    auto toy = make_toy(ModelKind::dnn_tau_linear_c, 4, 3);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto direct = nn::mlp_forward(toy.w, toy.model.features(i, toy.z[i]));
        CHECK(toy.model.theta_hat(toy.w, i, toy.z[i]) == direct);
    }
    nn::MlpParams zero = toy.w;
    std::fill(zero.flat.begin(), zero.flat.end(), 0.0);
    for (double v : toy.model.theta_hat(zero, 0, 0.7)) CHECK(v == 0.0);
}

TEST_CASE("theta_bar is the mean and ignores row order") {
    auto toy = make_toy(ModelKind::linear_ate, 5, 8);
    const auto bar = toy.model.theta_bar(toy.w, toy.z);
    std::vector<double> mean(bar.size(), 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
        const auto h = toy.model.theta_hat(toy.w, i, toy.z[i]);
        for (std::size_t k = 0; k < h.size(); ++k) mean[k] += h[k] / 5.0;
    }
    for (std::size_t k = 0; k < bar.size(); ++k) CHECK(bar[k] == doctest::Approx(mean[k]).epsilon(1e-12));

    std::vector<std::size_t> perm{4, 2, 0, 3, 1};
    const auto& data = toy.model.data();
    EfiModel shuffled(data.subset(perm), toy.model.layout(), toy.model.inverse_spec(), toy.model.standardizer());
    std::vector<double> z2;
    for (auto i : perm) z2.push_back(toy.z[i]);
    const auto bar2 = shuffled.theta_bar(toy.w, z2);
    for (std::size_t k = 0; k < bar.size(); ++k) CHECK(bar2[k] == doctest::Approx(bar[k]).epsilon(1e-12));
}

TEST_CASE("energy matches an independent recomputation") {
    for (auto kind : {ModelKind::linear_ate, ModelKind::dnn_tau_linear_c, ModelKind::dnn_both}) {
        auto toy = make_toy(kind, 2, 21);
        const double eta = 3.0;
        const auto& data = toy.model.data();
        const auto bar = toy.model.theta_bar(toy.w, toy.z);
        double total = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            const double r = data.y[i] - model_predict(bar, toy.model.layout(), data.row(i), data.t[i], toy.z[i]);
            total += r * r;
            const auto h = toy.model.theta_hat(toy.w, i, toy.z[i]);
            for (std::size_t k = 0; k < h.size(); ++k) total += eta * (h[k] - bar[k]) * (h[k] - bar[k]);
        }
        const auto rep = energy(toy.model, toy.w, toy.z, eta);
        CHECK(rep.total == doctest::Approx(total).epsilon(1e-12));
        CHECK(rep.total >= 0.0);
    }
}

TEST_CASE("single observation: no consensus term") {
    auto toy = make_toy(ModelKind::dnn_tau_linear_c, 1, 5);
    const auto rep = energy(toy.model, toy.w, toy.z, 10.0);
    const auto& data = toy.model.data();
    const double r = data.y[0] - model_predict(rep.theta_bar, toy.model.layout(), data.row(0), data.t[0], toy.z[0]);
    CHECK(rep.total == doctest::Approx(r * r).epsilon(1e-12));
}

TEST_CASE("property: latent and weight gradients match central differences") {
    int instances = 0;
    for (auto kind : {ModelKind::linear_ate, ModelKind::dnn_tau_linear_c, ModelKind::dnn_both}) {
        for (std::uint64_t rep = 0; rep < 6; ++rep) {
            const std::size_t n = 1 + rep % 5;
            auto toy = make_toy(kind, n, 100 + rep + 31 * static_cast<std::uint64_t>(kind));
            const double eta = 2.0, eps = 0.5;
            const MixturePrior prior;

            const auto gz = grad_log_pred_z(toy.model, toy.w, toy.z, eta, eps);
            const auto fz = [&](const std::vector<double>& z) {
                double lp = 0.0;
                for (double v : z) lp -= 0.5 * v * v;
                return lp - energy(toy.model, toy.w, z, eta).total / eps;
            };
            for (std::size_t i = 0; i < n; ++i)
                CHECK(testing::close_grad(gz[i], testing::central_diff(fz, toy.z, i, 1e-6), 1e-4, 1e-6));

            const auto gw = grad_log_post_w(toy.model, toy.w, toy.z, eta, eps, prior);
            const auto fw = [&](const std::vector<double>& flat) {
                const auto w = nn::make_params(toy.w.spec, flat);
                return -energy(toy.model, w, toy.z, eta).total / eps + log_prior(flat, prior);
            };
            for (std::size_t k = 0; k < gw.size(); ++k) {
                INFO("kind ", to_string(kind), " rep ", rep, " weight ", k);
                CHECK(testing::close_grad(gw[k], testing::central_diff(fw, toy.w.flat, k, 1e-6), 1e-4, 1e-6));
            }
            ++instances;
        }
    }
    CHECK(instances == 18);
}

TEST_CASE("half batches with frozen theta_bar add up to the full gradient") {
    auto toy = make_toy(ModelKind::dnn_tau_linear_c, 6, 44);
    const double eta = 4.0;
    const auto full = toy.model.gradient_pass(toy.w, toy.z, eta);
    const std::vector<std::size_t> a{0, 1, 2}, b{3, 4, 5};
    const auto pa = toy.model.gradient_pass(toy.w, toy.z, eta, a, &full.aggregate);
    const auto pb = toy.model.gradient_pass(toy.w, toy.z, eta, b, &full.aggregate);
    for (std::size_t k = 0; k < full.dU_dw.size(); ++k)
        CHECK(pa.dU_dw[k] + pb.dU_dw[k] == doctest::Approx(full.dU_dw[k]).epsilon(1e-10).scale(1.0));
}

TEST_CASE("engine argument errors") {
    auto toy = make_toy(ModelKind::linear_ate, 3, 2);
    CHECK_THROWS_AS(toy.model.gradient_pass(toy.w, std::vector<double>{0.0}, 1.0), DimensionError);
    CHECK_THROWS_AS(grad_log_pred_z(toy.model, toy.w, toy.z, 1.0, 0.0), InvalidArgument);
    CHECK_THROWS_AS(toy.model.gradient_pass(toy.w, toy.z, 0.0), InvalidArgument);
}
