#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace efi {

/// Simulation ground truth, one entry per observation.
struct Truth {
    std::vector<double> z;           // standardized error of the observed outcome
    std::vector<double> tau;         // tau(x_i)
    std::vector<double> c;           // c(x_i)
    std::vector<double> y1;          // potential outcome under treatment
    std::vector<double> y0;          // potential outcome under control
    std::vector<double> propensity;  // P(T=1 | x_i)
};

struct Dataset {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> x;  // row-major n x d
    std::vector<int> t;     // 0/1
    std::vector<double> y;  // observed outcome
    std::optional<Truth> truth;

    std::span<const double> row(std::size_t i) const { return {x.data() + i * d, d}; }
    bool has_truth() const { return truth.has_value(); }

    Dataset subset(std::span<const std::size_t> rows) const;
};

/// Throws DataError on inconsistent lengths, non-binary treatment or non-finite entries.
void validate(const Dataset& data);

/// Column naming for CSV ingestion. Empty `covariates` means every column
/// that is not the outcome, the treatment or a known truth column.
struct CsvSchema {
    std::string outcome = "y";
    std::string treatment = "t";
    std::vector<std::string> covariates;
};

void write_csv(const Dataset& data, const std::filesystem::path& path);
void write_csv(const Dataset& data, std::ostream& out);

Dataset load_csv_dataset(const std::filesystem::path& path, const CsvSchema& schema = {});
Dataset read_csv_dataset(std::istream& in, const CsvSchema& schema = {});

/// Affine standardization fitted on a training set.
struct Standardizer {
    double y_mean = 0.0;
    double y_scale = 1.0;
    std::vector<double> x_mean;
    std::vector<double> x_scale;

    static Standardizer fit(const Dataset& data);
    double y(double v) const { return (v - y_mean) / y_scale; }
    double x(std::size_t j, double v) const { return (v - x_mean[j]) / x_scale[j]; }
};

}  // namespace efi
