#pragma once

// Config-driven experiment runner: presets, replications, scoring and reports.

#include "efi/cqr.hpp"
#include "efi/datagen.hpp"
#include "efi/dataset.hpp"
#include "efi/inference.hpp"
#include "efi/sampler.hpp"
#include "efi/theta_layout.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace efi {

struct CsvSource {
    std::filesystem::path path;
    CsvSchema schema{};
    double test_fraction = 0.0;  // rows held out per replication
};

struct ModelConfig {
    ModelKind kind = ModelKind::linear_ate;
    std::vector<std::size_t> c_hidden{10, 10};
    std::vector<std::size_t> tau_hidden{10, 10};
    std::vector<std::size_t> inverse_hidden{90, 30};
    nn::Activation activation = nn::Activation::tanh;
    double rescale = 25.0;
};

struct ExperimentConfig {
    std::string preset;
    std::optional<Design> design;
    std::optional<CsvSource> csv;
    std::size_t replications = 1;
    std::size_t n_train = 250;
    std::size_t n_test = 0;
    std::size_t d = 0;
    ModelConfig model{};
    ScheduleParams schedule{};
    RunConfig run{};
    std::vector<double> alphas{0.05};
    std::vector<std::string> methods{"efi"};
    CqrConfig cqr{};
    std::uint64_t seed = 1;
    std::filesystem::path out_dir = "out";
    bool trace = false;
    bool treated_only_pehe = true;
};

/// Known methods: efi, cqr-naive, cqr-exact, cqr-inexact.
const std::vector<std::string>& known_methods();

/// Names accepted by preset().
std::vector<std::string> preset_names();

/// Desk scale halves K, M and the initialization phase and uses fewer
/// replications; paper_scale keeps the published values.
ExperimentConfig preset(const std::string& name, bool paper_scale = false);

/// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& config);

/// Applies `j` on top of its "preset" (or the defaults). Unknown keys and
/// values of the wrong type raise ConfigError naming the key.
ExperimentConfig config_from_json(const nlohmann::json& j, bool paper_scale = false);
ExperimentConfig load_config(const std::filesystem::path& path, bool paper_scale = false);
nlohmann::json config_to_json(const ExperimentConfig& config);

std::uint64_t replication_seed(const ExperimentConfig& config, std::size_t r);

struct ReplicationData {
    Dataset train;
    Dataset test;
};

ReplicationData replication_data(const ExperimentConfig& config, std::size_t r);

ThetaLayout make_layout(const ExperimentConfig& config, std::size_t d);
nn::MlpSpec make_inverse_spec(const ExperimentConfig& config, const ThetaLayout& layout, std::uint64_t seed);

struct ReplicationResult {
    std::size_t index = 0;
    std::vector<IntervalRow> rows;
    std::map<std::string, double> pehe;  // per method, when truth exists
    std::optional<FiducialChain> chain;  // efi only, kept when requested
    double seconds = 0.0;
};

/// Runs every configured method on replication r. keep_chain retains the
/// fiducial chain; trace receives the sampler trace when non-null.
ReplicationResult run_replication(const ExperimentConfig& config, std::size_t r, bool keep_chain = false,
                                  std::ostream* trace = nullptr);

struct MetricSummary {
    double mean = 0.0;
    double sd = 0.0;
    std::vector<double> per_replication;
};

/// Mean and sample sd (0 for a single value).
MetricSummary summarize_metric(std::vector<double> values);

/// Summary JSON: per (method, alpha) coverage and length across
/// replications, per-case breakdown, and PEHE where available. Rows whose
/// truth is NaN are not scored.
nlohmann::json summarize(const std::vector<IntervalRow>& rows,
                         const std::map<std::string, std::vector<double>>& pehe = {});

struct ExperimentResult {
    std::vector<ReplicationResult> replications;
    nlohmann::json summary;
};

/// Runs all replications on up to `workers` threads and writes
/// intervals.csv, summary.json and config.json into config.out_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t workers = 1);

void write_chain_csv(const FiducialChain& chain, const std::filesystem::path& path);

/// Dumps JSON with a fixed layout so equal values give equal bytes.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace efi
