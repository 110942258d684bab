#include "efi/inference.hpp"

#include "efi/errors.hpp"
#include "efi/kernels.hpp"
#include "efi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace efi {

std::string to_string(IteCase c) {
    switch (c) {
        case IteCase::Ic: return "Ic";
        case IteCase::It: return "It";
        case IteCase::Im: return "Im";
        case IteCase::ATE: return "ATE";
    }
    return "?";
}

IteCase parse_ite_case(const std::string& name) {
    if (name == "Ic") return IteCase::Ic;
    if (name == "It") return IteCase::It;
    if (name == "Im") return IteCase::Im;
    if (name == "ATE") return IteCase::ATE;
    throw InvalidArgument("unknown interval case '" + name + "'");
}

double quantile(std::span<const double> samples, double q) {
    if (samples.empty()) throw InvalidArgument("quantile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw InvalidArgument("quantile level must lie in [0, 1]");
    std::vector<double> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end());
    const double h = static_cast<double>(s.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= s.size()) return s.back();
    return s[lo] + (h - static_cast<double>(lo)) * (s[lo + 1] - s[lo]);
}

namespace {

void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("alpha must lie in (0, 1)");
}

void check_chain(const FiducialChain& chain, const ThetaLayout& layout) {
    if (chain.draws.empty()) throw InvalidArgument("fiducial chain has no draws");
    for (const auto& d : chain.draws)
        if (d.size() != layout.dim()) throw DimensionError("chain draw does not match the parameter layout");
}

kernels::Matrix covariate_matrix(const Dataset& data, std::size_t first, std::size_t count) {
    kernels::Matrix X(static_cast<Eigen::Index>(data.d), static_cast<Eigen::Index>(count));
    for (std::size_t j = 0; j < count; ++j) {
        const auto r = data.row(first + j);
        for (std::size_t a = 0; a < data.d; ++a) X(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) = r[a];
    }
    return X;
}

const Truth& require_truth(const Dataset& data) {
    if (!data.truth) throw DataError("test data carries no ground truth");
    return *data.truth;
}

std::size_t case_index(IteCase c) { return static_cast<std::size_t>(c); }

}  // namespace

PredictionInterval ate_interval(const FiducialChain& chain, const ThetaLayout& layout, double alpha) {
    check_alpha(alpha);
    if (layout.kind != ModelKind::linear_ate) throw InvalidArgument("ATE intervals need the linear_ate layout");
    check_chain(chain, layout);
    std::vector<double> tau;
    tau.reserve(chain.draws.size());
    for (const auto& d : chain.draws) tau.push_back(ate_from_theta(d, layout));
    return {0, IteCase::ATE, quantile(tau, alpha / 2.0), quantile(tau, 1.0 - alpha / 2.0), alpha};
}

std::vector<PredictionInterval> ite_intervals(const FiducialChain& chain, const ThetaLayout& layout,
                                              const Dataset& test, double alpha, std::uint64_t seed,
                                              IteRequest request) {
    check_alpha(alpha);
    check_chain(chain, layout);
    if (test.d != layout.covariate_dim) throw DimensionError("test covariates do not match the layout");
    const std::size_t D = chain.draws.size();
    const std::size_t sigma_slot = layout.sigma_slot();
    constexpr std::size_t kBlock = 256;

    std::vector<PredictionInterval> out;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t first = 0; first < test.n; first += kBlock) {
        const std::size_t count = std::min(kBlock, test.n - first);
        const auto X = covariate_matrix(test, first, count);
        std::vector<std::vector<double>> arm(count), im(count);
        std::vector<Rng> arm_rng, im_rng;
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t i = first + j;
            const IteCase c = test.t[i] == 0 ? IteCase::Ic : IteCase::It;
            arm_rng.emplace_back(derive_seed(seed, i, case_index(c)));
            im_rng.emplace_back(derive_seed(seed, i, case_index(IteCase::Im)));
            if (request.observed_arm) arm[j].reserve(D);
            if (request.covariates_only) im[j].reserve(D);
        }
        for (const auto& draw : chain.draws) {
            const auto bm = batch_means(draw, layout, X);
            const double sigma = std::exp(draw[sigma_slot]);
            for (std::size_t j = 0; j < count; ++j) {
                const std::size_t i = first + j;
                const auto jj = static_cast<Eigen::Index>(j);
                if (request.observed_arm) {
                    const double z = normal(arm_rng[j]);
                    if (test.t[i] == 0)
                        arm[j].push_back(bm.c(jj) + bm.tau(jj) + sigma * z - test.y[i]);
                    else
                        arm[j].push_back(test.y[i] - (bm.c(jj) + sigma * z));
                }
                if (request.covariates_only)
                    im[j].push_back(bm.tau(jj) + std::sqrt(2.0) * sigma * normal(im_rng[j]));
            }
        }
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t i = first + j;
            if (request.observed_arm) {
                const IteCase c = test.t[i] == 0 ? IteCase::Ic : IteCase::It;
                out.push_back({i, c, quantile(arm[j], alpha / 2.0), quantile(arm[j], 1.0 - alpha / 2.0), alpha});
            }
            if (request.covariates_only)
                out.push_back({i, IteCase::Im, quantile(im[j], alpha / 2.0), quantile(im[j], 1.0 - alpha / 2.0), alpha});
        }
    }
    return out;
}

std::vector<double> tau_hat(const FiducialChain& chain, const ThetaLayout& layout, const Dataset& test) {
    check_chain(chain, layout);
    if (test.d != layout.covariate_dim) throw DimensionError("test covariates do not match the layout");
    const auto X = covariate_matrix(test, 0, test.n);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(test.n));
    for (const auto& draw : chain.draws) sum += batch_means(draw, layout, X).tau;
    sum /= static_cast<double>(chain.draws.size());
    return {sum.data(), sum.data() + sum.size()};
}

double pehe(std::span<const double> tau_estimate, const Dataset& test, bool treated_only) {
    const Truth& truth = require_truth(test);
    if (tau_estimate.size() != test.n) throw DimensionError("one tau estimate per test row expected");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < test.n; ++i) {
        if (treated_only && test.t[i] != 1) continue;
        const double e = tau_estimate[i] - truth.tau[i];
        sum += e * e;
        ++count;
    }
    if (count == 0) throw DataError("no test rows qualify for PEHE");
    return sum / static_cast<double>(count);
}

double pehe(const FiducialChain& chain, const ThetaLayout& layout, const Dataset& test, bool treated_only) {
    require_truth(test);
    return pehe(tau_hat(chain, layout, test), test, treated_only);
}

double ite_truth(const Dataset& test, std::size_t i, IteCase kind) {
    const Truth& truth = require_truth(test);
    switch (kind) {
        case IteCase::Ic: return truth.y1[i] - test.y[i];
        case IteCase::It: return test.y[i] - truth.y0[i];
        case IteCase::Im: return truth.y1[i] - truth.y0[i];
        case IteCase::ATE: break;
    }
    throw InvalidArgument("ATE truth is a design constant, not a per-subject value");
}

EvalReport score_intervals(std::span<const PredictionInterval> intervals, std::span<const double> truth) {
    if (intervals.size() != truth.size()) throw DimensionError("one truth value per interval expected");
    EvalReport report;
    if (intervals.empty()) return report;
    double covered = 0.0, length = 0.0;
    for (std::size_t k = 0; k < intervals.size(); ++k) {
        const auto& iv = intervals[k];
        const bool hit = iv.contains(truth[k]);
        auto& cs = report.per_case[iv.kind];
        cs.count += 1;
        cs.coverage += hit ? 1.0 : 0.0;
        cs.mean_length += iv.length();
        covered += hit ? 1.0 : 0.0;
        length += iv.length();
    }
    for (auto& [kind, cs] : report.per_case) {
        cs.coverage /= static_cast<double>(cs.count);
        cs.mean_length /= static_cast<double>(cs.count);
    }
    report.coverage = covered / static_cast<double>(intervals.size());
    report.mean_length = length / static_cast<double>(intervals.size());
    return report;
}

EvalReport score_intervals(std::span<const PredictionInterval> intervals, const Dataset& test) {
    std::vector<double> truth;
    truth.reserve(intervals.size());
    for (const auto& iv : intervals) truth.push_back(ite_truth(test, iv.subject_id, iv.kind));
    return score_intervals(intervals, truth);
}

void write_intervals_header(std::ostream& out) {
    out << "method,replication,subject_id,case,alpha,lower,upper,truth,covered\n";
}

void write_interval_row(std::ostream& out, const IntervalRow& row) {
    const auto& iv = row.interval;
    std::ostringstream line;
    line.precision(17);
    line << row.method << ',' << row.replication << ',' << iv.subject_id << ',' << to_string(iv.kind) << ','
         << iv.alpha << ',' << iv.lower << ',' << iv.upper << ',' << row.truth << ','
         << (iv.contains(row.truth) ? 1 : 0) << '\n';
    out << line.str();
}

std::vector<IntervalRow> read_intervals_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
    std::vector<IntervalRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 8) throw DataError(path.string() + ": row " + std::to_string(lineno) + " has too few columns");
        try {
            IntervalRow r;
            r.method = cells[0];
            r.replication = std::stoul(cells[1]);
            r.interval.subject_id = std::stoul(cells[2]);
            r.interval.kind = parse_ite_case(cells[3]);
            r.interval.alpha = std::stod(cells[4]);
            r.interval.lower = std::stod(cells[5]);
            r.interval.upper = std::stod(cells[6]);
            r.truth = std::stod(cells[7]);
            rows.push_back(r);
        } catch (const InvalidArgument& e) {
            throw DataError(path.string() + ": row " + std::to_string(lineno) + ": " + e.what());
        } catch (const std::logic_error&) {
            throw DataError(path.string() + ": row " + std::to_string(lineno) + " is malformed");
        }
    }
    return rows;
}

}  // namespace efi
