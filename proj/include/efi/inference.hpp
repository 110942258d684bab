#pragma once

// Interval construction and scoring from a fiducial chain.

#include "efi/dataset.hpp"
#include "efi/sampler.hpp"
#include "efi/theta_layout.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace efi {

enum class IteCase { Ic, It, Im, ATE };

std::string to_string(IteCase c);
IteCase parse_ite_case(const std::string& name);

struct PredictionInterval {
    std::size_t subject_id = 0;
    IteCase kind = IteCase::Im;
    double lower = 0.0;
    double upper = 0.0;
    double alpha = 0.05;

    double length() const { return upper - lower; }
    bool contains(double v) const { return lower <= v && v <= upper; }
};

/// Type-7 quantile: linear interpolation between the closest order statistics.
double quantile(std::span<const double> samples, double q);

PredictionInterval ate_interval(const FiducialChain& chain, const ThetaLayout& layout, double alpha);

/// Which cases to build for a test set. By default every subject gets the
/// case of its observed arm (Ic for t=0, It for t=1) plus an Im interval.
struct IteRequest {
    bool observed_arm = true;
    bool covariates_only = true;
};

/// Per subject and draw k: Ic uses c + tau + sigma Z - y_obs, It uses
/// y_obs - (c + sigma Z), Im uses tau + sqrt(2) sigma Z. Z_new comes from a
/// stream seeded by (seed, subject, case).
std::vector<PredictionInterval> ite_intervals(const FiducialChain& chain, const ThetaLayout& layout,
                                              const Dataset& test, double alpha, std::uint64_t seed,
                                              IteRequest request = {});

/// Chain-mean tau(x_i) for every test row.
std::vector<double> tau_hat(const FiducialChain& chain, const ThetaLayout& layout, const Dataset& test);

/// Mean squared error of the chain-mean tau(x) against the true tau over the
/// treated rows (or every row).
double pehe(const FiducialChain& chain, const ThetaLayout& layout, const Dataset& test, bool treated_only = true);
double pehe(std::span<const double> tau_estimate, const Dataset& test, bool treated_only = true);

/// Realized quantity an interval of this case targets for subject i.
double ite_truth(const Dataset& test, std::size_t i, IteCase kind);

struct CaseSummary {
    std::size_t count = 0;
    double coverage = 0.0;
    double mean_length = 0.0;
};

struct EvalReport {
    double coverage = 0.0;
    double mean_length = 0.0;
    std::map<IteCase, CaseSummary> per_case;
    std::optional<double> pehe;
};

/// Truth per interval, in the same order.
EvalReport score_intervals(std::span<const PredictionInterval> intervals, std::span<const double> truth);
EvalReport score_intervals(std::span<const PredictionInterval> intervals, const Dataset& test);

struct IntervalRow {
    std::string method;
    std::size_t replication = 0;
    PredictionInterval interval;
    double truth = 0.0;
};

void write_intervals_header(std::ostream& out);
void write_interval_row(std::ostream& out, const IntervalRow& row);
std::vector<IntervalRow> read_intervals_csv(const std::filesystem::path& path);

}  // namespace efi
