#include "efi/dataset.hpp"

#include "efi/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace efi {

namespace {

constexpr const char* kTruthColumns[] = {"z_true", "tau_true", "c_true", "y1", "y0", "e_true"};

bool is_truth_column(const std::string& name) {
    return std::find(std::begin(kTruthColumns), std::end(kTruthColumns), name) != std::end(kTruthColumns);
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        std::size_t s = 0;
        while (s < cell.size() && cell[s] == ' ') ++s;
        cells.push_back(cell.substr(s));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& column) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || cell.empty())
        throw DataError("non-numeric cell '" + cell + "' at row " + std::to_string(row) +
                        ", column '" + column + "'");
    return v;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.n = rows.size();
    out.d = d;
    out.x.reserve(rows.size() * d);
    for (std::size_t i : rows) {
        auto r = row(i);
        out.x.insert(out.x.end(), r.begin(), r.end());
        out.t.push_back(t[i]);
        out.y.push_back(y[i]);
    }
    if (truth) {
        Truth tr;
        auto pick = [&](const std::vector<double>& src, std::vector<double>& dst) {
            if (src.empty()) return;
            for (std::size_t i : rows) dst.push_back(src[i]);
        };
        pick(truth->z, tr.z);
        pick(truth->tau, tr.tau);
        pick(truth->c, tr.c);
        pick(truth->y1, tr.y1);
        pick(truth->y0, tr.y0);
        pick(truth->propensity, tr.propensity);
        out.truth = std::move(tr);
    }
    return out;
}

void validate(const Dataset& data) {
    if (data.x.size() != data.n * data.d || data.t.size() != data.n || data.y.size() != data.n)
        throw DataError("dataset arrays have inconsistent lengths");
    for (std::size_t i = 0; i < data.n; ++i) {
        if (data.t[i] != 0 && data.t[i] != 1)
            throw DataError("treatment at row " + std::to_string(i) + " is not binary");
        if (!std::isfinite(data.y[i])) throw DataError("non-finite outcome at row " + std::to_string(i));
    }
    for (double v : data.x) {
        if (!std::isfinite(v)) throw DataError("non-finite covariate");
    }
    if (data.truth) {
        const Truth& tr = *data.truth;
        for (const auto* v : {&tr.z, &tr.tau, &tr.c, &tr.y1, &tr.y0, &tr.propensity}) {
            if (!v->empty() && v->size() != data.n)
                throw DataError("truth column length does not match the dataset");
        }
    }
}

void write_csv(const Dataset& data, std::ostream& out) {
    out << std::setprecision(17);
    for (std::size_t j = 0; j < data.d; ++j) out << "x_" << (j + 1) << ',';
    out << "t,y";
    struct Col {
        const char* name;
        const std::vector<double>* values;
    };
    std::vector<Col> extra;
    if (data.truth) {
        const Truth& tr = *data.truth;
        const Col all[] = {{"z_true", &tr.z}, {"tau_true", &tr.tau}, {"c_true", &tr.c},
                           {"y1", &tr.y1},    {"y0", &tr.y0},       {"e_true", &tr.propensity}};
        for (const auto& c : all) {
            if (!c.values->empty()) extra.push_back(c);
        }
    }
    for (const auto& c : extra) out << ',' << c.name;
    out << '\n';
    for (std::size_t i = 0; i < data.n; ++i) {
        for (double v : data.row(i)) out << v << ',';
        out << data.t[i] << ',' << data.y[i];
        for (const auto& c : extra) out << ',' << (*c.values)[i];
        out << '\n';
    }
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    write_csv(data, out);
}

Dataset read_csv_dataset(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("CSV input is empty (header row expected)");
    const auto header = split_line(line);
    std::map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < header.size(); ++c) index[header[c]] = c;

    auto require = [&](const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw DataError("missing column '" + name + "'");
        return it->second;
    };
    const std::size_t y_col = require(schema.outcome);
    const std::size_t t_col = require(schema.treatment);
    std::vector<std::size_t> x_cols;
    if (schema.covariates.empty()) {
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (c != y_col && c != t_col && !is_truth_column(header[c])) x_cols.push_back(c);
        }
    } else {
        for (const auto& name : schema.covariates) x_cols.push_back(require(name));
    }

    Dataset data;
    data.d = x_cols.size();
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = split_line(line);
        if (cells.size() != header.size())
            throw DataError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(header.size()));
        const double t = parse_cell(cells[t_col], row, header[t_col]);
        if (t != 0.0 && t != 1.0)
            throw DataError("treatment value '" + cells[t_col] + "' at row " + std::to_string(row) +
                            " is not binary");
        data.t.push_back(static_cast<int>(t));
        data.y.push_back(parse_cell(cells[y_col], row, header[y_col]));
        for (std::size_t c : x_cols) data.x.push_back(parse_cell(cells[c], row, header[c]));
    }
    data.n = data.y.size();
    validate(data);
    return data;
}

Dataset load_csv_dataset(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return read_csv_dataset(in, schema);
}

Standardizer Standardizer::fit(const Dataset& data) {
    if (data.n == 0) throw DataError("cannot standardize an empty dataset");
    Standardizer s;
    auto moments = [&](auto get, double& mean, double& scale) {
        double m = 0.0;
        for (std::size_t i = 0; i < data.n; ++i) m += get(i);
        m /= static_cast<double>(data.n);
        double v = 0.0;
        for (std::size_t i = 0; i < data.n; ++i) v += (get(i) - m) * (get(i) - m);
        v = data.n > 1 ? v / static_cast<double>(data.n - 1) : 0.0;
        mean = m;
        scale = v > 0.0 ? std::sqrt(v) : 1.0;
    };
    moments([&](std::size_t i) { return data.y[i]; }, s.y_mean, s.y_scale);
    s.x_mean.resize(data.d);
    s.x_scale.resize(data.d);
    for (std::size_t j = 0; j < data.d; ++j)
        moments([&](std::size_t i) { return data.x[i * data.d + j]; }, s.x_mean[j], s.x_scale[j]);
    return s;
}

}  // namespace efi
