#include "efi/cqr.hpp"

#include "efi/errors.hpp"
#include "efi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace efi {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("alpha must lie in (0, 1)");
}

std::vector<double> model_inputs(const Dataset& data) {
    std::vector<double> rows;
    rows.reserve(data.n * (data.d + 1));
    for (std::size_t i = 0; i < data.n; ++i) {
        const auto r = data.row(i);
        rows.insert(rows.end(), r.begin(), r.end());
        rows.push_back(static_cast<double>(data.t[i]));
    }
    return rows;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double first_fraction, std::uint64_t seed) {
    auto idx = shuffled(data.n, seed);
    const auto cut = static_cast<std::size_t>(std::llround(first_fraction * static_cast<double>(data.n)));
    if (cut == 0 || cut >= data.n) throw DataError("too few rows to split for calibration");
    std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {data.subset(a), data.subset(b)};
}

// Density ratio of the target covariate law to the law of arm `arm`.
enum class Target { opposite, population };

double shift_weight(int arm, double e, Target target) {
    if (!(e > 0.0 && e < 1.0)) throw DataError("propensity outside (0, 1)");
    if (target == Target::opposite) return arm == 1 ? (1.0 - e) / e : e / (1.0 - e);
    return arm == 1 ? 1.0 / e : 1.0 / (1.0 - e);
}

struct Calibration {
    ArmModel arms;
    std::vector<double> scores[2];
    std::vector<double> propensity[2];
};

double propensity_of(const Dataset& data, std::size_t i) {
    if (!data.truth || data.truth->propensity.size() != data.n)
        throw DataError("weighted conformal needs oracle propensities");
    return data.truth->propensity[i];
}

Calibration fit_calibration(const Dataset& data, double alpha, const CqrConfig& config, bool weighted) {
    auto [fit, valid] = split(data, 1.0 - config.valid_fraction, derive_seed(config.seed, 0xc0));
    Calibration cal;
    cal.arms.model = pinball_fit(fit, alpha, config.pinball);
    for (int arm = 0; arm < 2; ++arm) {
        cal.scores[arm] = conformal_scores(cal.arms.model, valid, arm);
        cal.arms.correction[arm] = calibrate(cal.scores[arm], alpha);
        if (weighted)
            for (std::size_t i = 0; i < valid.n; ++i)
                if (valid.t[i] == arm) cal.propensity[arm].push_back(propensity_of(valid, i));
    }
    cal.arms.calibrated = true;
    return cal;
}

// Counterfactual band for Y(arm) at x; weighted when propensities were kept.
std::pair<double, double> band(const Calibration& cal, std::span<const double> x, int arm, double alpha,
                               double e_test, Target target) {
    auto [lo, hi] = cal.arms.model.predict(x, arm);
    double s = cal.arms.correction[arm].s_hat;
    if (!cal.propensity[arm].empty()) {
        std::vector<double> w;
        w.reserve(cal.propensity[arm].size());
        for (double e : cal.propensity[arm]) w.push_back(shift_weight(arm, e, target));
        s = calibrate_weighted(cal.scores[arm], w, shift_weight(arm, e_test, target), alpha).s_hat;
    }
    return {lo - s, hi + s};
}

double test_propensity(const Dataset& test, std::size_t i, bool weighted) {
    return weighted ? propensity_of(test, i) : 0.5;
}

}  // namespace

std::pair<double, double> QuantileNet::predict(std::span<const double> input) const {
    if (input.size() != in_mean.size()) throw DimensionError("quantile input has the wrong width");
    std::vector<double> z(input.size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (input[j] - in_mean[j]) / in_scale[j];
    const auto out = nn::mlp_forward(net, z);
    double a = out_mean + out_scale * out[0];
    double b = out_mean + out_scale * out[1];
    if (a > b) std::swap(a, b);
    return {a, b};
}

double pinball_loss(double residual, double q) { return residual >= 0.0 ? q * residual : (q - 1.0) * residual; }

QuantileNet fit_quantile_net(std::span<const double> inputs, std::size_t width, std::span<const double> target_lo,
                             std::span<const double> target_hi, double q_lo, double q_hi, const PinballConfig& config) {
    if (width == 0 || inputs.size() % width != 0) throw DimensionError("input rows have inconsistent width");
    const std::size_t n = inputs.size() / width;
    if (n == 0) throw DataError("quantile regression needs at least one row");
    if (target_lo.size() != n || target_hi.size() != n) throw DimensionError("one target per row expected");
    if (!(q_lo > 0.0 && q_lo < 1.0 && q_hi > 0.0 && q_hi < 1.0)) throw InvalidArgument("quantile levels must lie in (0, 1)");

    QuantileNet qn;
    qn.q_lo = q_lo;
    qn.q_hi = q_hi;
    qn.in_mean.assign(width, 0.0);
    qn.in_scale.assign(width, 1.0);
    for (std::size_t j = 0; j < width; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += inputs[i * width + j];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += (inputs[i * width + j] - m) * (inputs[i * width + j] - m);
        const double sd = n > 1 ? std::sqrt(v / static_cast<double>(n - 1)) : 0.0;
        qn.in_mean[j] = m;
        qn.in_scale[j] = sd > 0.0 ? sd : 1.0;
    }
    {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += target_lo[i] + target_hi[i];
        m /= static_cast<double>(2 * n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            v += (target_lo[i] - m) * (target_lo[i] - m) + (target_hi[i] - m) * (target_hi[i] - m);
        const double sd = n > 1 ? std::sqrt(v / static_cast<double>(2 * n - 1)) : 0.0;
        qn.out_mean = m;
        qn.out_scale = sd > 0.0 ? sd : 1.0;
    }

    nn::MlpSpec spec;
    spec.widths.push_back(width);
    for (auto h : config.hidden) spec.widths.push_back(h);
    spec.widths.push_back(2);
    spec.activation = config.activation;
    spec.seed = derive_seed(config.seed, 0x9b);
    qn.net = nn::mlp_init(spec);

    kernels::Matrix X(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < width; ++j)
            X(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = (inputs[i * width + j] - qn.in_mean[j]) / qn.in_scale[j];
    std::vector<double> tl(n), th(n);
    for (std::size_t i = 0; i < n; ++i) {
        tl[i] = (target_lo[i] - qn.out_mean) / qn.out_scale;
        th[i] = (target_hi[i] - qn.out_mean) / qn.out_scale;
    }

    const std::size_t P = qn.net.flat.size();
    std::vector<double> grad(P), m1(P, 0.0), m2(P, 0.0);
    constexpr double b1 = 0.9, b2 = 0.999, tiny = 1e-8;
    kernels::BatchTape tape;
    kernels::Matrix g(2, static_cast<Eigen::Index>(n));
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto out = kernels::forward(spec, qn.net.flat, X, &tape);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            g(0, c) = ((tl[i] - out(0, c) < 0.0 ? 1.0 : 0.0) - q_lo) * inv_n;
            g(1, c) = ((th[i] - out(1, c) < 0.0 ? 1.0 : 0.0) - q_hi) * inv_n;
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        kernels::backward(spec, qn.net.flat, tape, g, grad, nullptr);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(epoch));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(epoch));
        for (std::size_t k = 0; k < P; ++k) {
            m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k];
            m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k];
            qn.net.flat[k] -= config.learning_rate * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + tiny);
        }
    }
    return qn;
}

std::pair<double, double> QuantileModel::predict(std::span<const double> x, int t) const {
    if (x.size() != covariate_dim) throw DimensionError("covariate row has the wrong width");
    std::vector<double> in(x.begin(), x.end());
    in.push_back(static_cast<double>(t));
    return net.predict(in);
}

QuantileModel pinball_fit(const Dataset& train, double alpha, const PinballConfig& config) {
    check_alpha(alpha);
    if (train.n == 0) throw DataError("quantile regression needs training rows");
    QuantileModel m;
    m.alpha = alpha;
    m.covariate_dim = train.d;
    m.net = fit_quantile_net(model_inputs(train), train.d + 1, train.y, train.y, alpha / 2.0, 1.0 - alpha / 2.0, config);
    return m;
}

std::vector<double> conformal_scores(const QuantileModel& model, const Dataset& valid, int arm) {
    std::vector<double> s;
    for (std::size_t i = 0; i < valid.n; ++i) {
        if (valid.t[i] != arm) continue;
        const auto [lo, hi] = model.predict(valid.row(i), arm);
        s.push_back(std::max(lo - valid.y[i], valid.y[i] - hi));
    }
    if (s.empty()) throw DataError("no validation rows in arm " + std::to_string(arm));
    return s;
}

ConformalCorrection calibrate(std::span<const double> scores, double alpha) {
    check_alpha(alpha);
    if (scores.empty()) throw InvalidArgument("calibration needs at least one score");
    const std::size_t n = scores.size();
    const auto rank = static_cast<std::size_t>(std::ceil(static_cast<double>(n + 1) * (1.0 - alpha) - 1e-12));
    if (rank > n) return {kInf, alpha};
    std::vector<double> s(scores.begin(), scores.end());
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(rank - 1), s.end());
    return {s[rank - 1], alpha};
}

ConformalCorrection calibrate_weighted(std::span<const double> scores, std::span<const double> weights,
                                       double test_weight, double alpha) {
    check_alpha(alpha);
    if (scores.empty()) throw InvalidArgument("calibration needs at least one score");
    if (weights.size() != scores.size()) throw DimensionError("one weight per score expected");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double total = test_weight;
    for (double w : weights) {
        if (!(w >= 0.0)) throw InvalidArgument("conformal weights must be non-negative");
        total += w;
    }
    double acc = 0.0;
    for (auto k : order) {
        acc += weights[k] / total;
        if (acc >= 1.0 - alpha - 1e-12) return {scores[k], alpha};
    }
    return {kInf, alpha};
}

std::pair<double, double> cqr_counterfactual(const ArmModel& arms, std::span<const double> x, int arm) {
    if (!arms.calibrated) throw InvalidArgument("quantile model is not calibrated");
    if (arm != 0 && arm != 1) throw InvalidArgument("arm must be 0 or 1");
    const auto [lo, hi] = arms.model.predict(x, arm);
    const double s = arms.correction[arm].s_hat;
    return {lo - s, hi + s};
}

std::string to_string(CqrMode m) {
    switch (m) {
        case CqrMode::naive: return "naive";
        case CqrMode::exact: return "exact";
        case CqrMode::inexact: return "inexact";
    }
    return "?";
}

CqrMode parse_cqr_mode(const std::string& name) {
    if (name == "naive") return CqrMode::naive;
    if (name == "exact") return CqrMode::exact;
    if (name == "inexact") return CqrMode::inexact;
    throw InvalidArgument("unknown CQR mode '" + name + "'");
}

ArmModel fit_arms(const Dataset& train, double alpha, const CqrConfig& config) {
    check_alpha(alpha);
    return fit_calibration(train, alpha, config, config.weighted).arms;
}

std::vector<PredictionInterval> cqr_observed(const Dataset& train, const Dataset& test, double alpha,
                                             const CqrConfig& config) {
    check_alpha(alpha);
    if (test.d != train.d) throw DimensionError("test covariates do not match the training data");
    const auto cal = fit_calibration(train, alpha, config, config.weighted);
    std::vector<PredictionInterval> out;
    out.reserve(test.n);
    for (std::size_t i = 0; i < test.n; ++i) {
        const double e = test_propensity(test, i, config.weighted);
        if (test.t[i] == 0) {
            const auto [lo, hi] = band(cal, test.row(i), 1, alpha, e, Target::opposite);
            out.push_back({i, IteCase::Ic, lo - test.y[i], hi - test.y[i], alpha});
        } else {
            const auto [lo, hi] = band(cal, test.row(i), 0, alpha, e, Target::opposite);
            out.push_back({i, IteCase::It, test.y[i] - hi, test.y[i] - lo, alpha});
        }
    }
    return out;
}

std::vector<PredictionInterval> cqr_ite(const Dataset& train, const Dataset& test, double alpha, CqrMode mode,
                                        const CqrConfig& config) {
    check_alpha(alpha);
    if (test.d != train.d) throw DimensionError("test covariates do not match the training data");
    std::vector<PredictionInterval> out;
    out.reserve(test.n);

    if (mode == CqrMode::naive) {
        const double a = alpha / 2.0;
        const auto cal = fit_calibration(train, a, config, config.weighted);
        for (std::size_t i = 0; i < test.n; ++i) {
            const double e = test_propensity(test, i, config.weighted);
            const auto [l1, r1] = band(cal, test.row(i), 1, a, e, Target::population);
            const auto [l0, r0] = band(cal, test.row(i), 0, a, e, Target::population);
            out.push_back({i, IteCase::Im, l1 - r0, r1 - l0, alpha});
        }
        return out;
    }

    // Nested: fold 1 gives counterfactual bands, fold 2 turns them into ITE
    // intervals that serve as interval-valued outcomes.
    auto [fold1, fold2] = split(train, 0.5, derive_seed(config.seed, 0xf1));
    const double a1 = mode == CqrMode::exact ? alpha / 2.0 : alpha;
    CqrConfig inner = config;
    inner.seed = derive_seed(config.seed, 0xf2);
    const auto cal = fit_calibration(fold1, a1, inner, config.weighted);
    std::vector<double> cl(fold2.n), cr(fold2.n);
    for (std::size_t i = 0; i < fold2.n; ++i) {
        const double e = test_propensity(fold2, i, config.weighted);
        if (fold2.t[i] == 1) {
            const auto [l0, r0] = band(cal, fold2.row(i), 0, a1, e, Target::opposite);
            cl[i] = fold2.y[i] - r0;
            cr[i] = fold2.y[i] - l0;
        } else {
            const auto [l1, r1] = band(cal, fold2.row(i), 1, a1, e, Target::opposite);
            cl[i] = l1 - fold2.y[i];
            cr[i] = r1 - fold2.y[i];
        }
        if (!std::isfinite(cl[i]) || !std::isfinite(cr[i])) {
            // An infinite band propagates: the ITE interval is the whole line.
            for (std::size_t k = 0; k < test.n; ++k) out.push_back({k, IteCase::Im, -kInf, kInf, alpha});
            return out;
        }
    }

    PinballConfig pc = config.pinball;
    pc.seed = derive_seed(config.seed, 0xf3);
    if (mode == CqrMode::inexact) {
        const auto qn = fit_quantile_net(fold2.x, fold2.d, cl, cr, alpha / 2.0, 1.0 - alpha / 2.0, pc);
        for (std::size_t i = 0; i < test.n; ++i) {
            const auto [lo, hi] = qn.predict(test.row(i));
            out.push_back({i, IteCase::Im, lo, hi, alpha});
        }
        return out;
    }

    // exact: median endpoint regressors, then conformal on the interval outcome
    // with s_i = max(L(x_i) - C^L_i, C^R_i - R(x_i)).
    auto idx = shuffled(fold2.n, derive_seed(config.seed, 0xf4));
    const auto cut = static_cast<std::size_t>(std::llround((1.0 - config.valid_fraction) * static_cast<double>(fold2.n)));
    if (cut == 0 || cut >= fold2.n) throw DataError("too few rows to split for calibration");
    std::vector<double> fx, fl, fr;
    for (std::size_t k = 0; k < cut; ++k) {
        const auto r = fold2.row(idx[k]);
        fx.insert(fx.end(), r.begin(), r.end());
        fl.push_back(cl[idx[k]]);
        fr.push_back(cr[idx[k]]);
    }
    const auto qn = fit_quantile_net(fx, fold2.d, fl, fr, 0.5, 0.5, pc);
    std::vector<double> scores;
    for (std::size_t k = cut; k < fold2.n; ++k) {
        const auto [L, R] = qn.predict(fold2.row(idx[k]));
        scores.push_back(std::max(L - cl[idx[k]], cr[idx[k]] - R));
    }
    const double s = calibrate(scores, alpha / 2.0).s_hat;
    for (std::size_t i = 0; i < test.n; ++i) {
        const auto [L, R] = qn.predict(test.row(i));
        out.push_back({i, IteCase::Im, L - s, R + s, alpha});
    }
    return out;
}

}  // namespace efi
