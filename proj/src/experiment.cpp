#include "efi/experiment.hpp"

#include "efi/errors.hpp"
#include "efi/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace efi {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void halve_iterations(RunConfig& run) {
    run.burn_in /= 2;
    run.keep /= 2;
    run.init_iters /= 2;
    run.keep -= run.keep % run.thin;
}

ExperimentConfig linear_preset(std::size_t n, double c_upsilon, std::size_t paper_reps, bool paper_scale) {
    ExperimentConfig c;
    c.design = Design::linear_ate;
    c.n_train = n;
    c.n_test = 0;
    c.model.kind = ModelKind::linear_ate;
    c.model.inverse_hidden = {90, 30};
    c.schedule.upsilon = {c_upsilon, 1e6};
    c.schedule.gamma = {{kDefaultGroup, {54000.0, 1e6}}};
    c.schedule.alpha = 1.0 / 7.0;
    c.schedule.varpi = 0.1;
    c.run.eta = 500.0;
    c.run.eps = 0.1;
    c.run.burn_in = 5000;
    c.run.keep = 50000;
    c.run.thin = 5;
    c.run.init_iters = 0;
    c.run.clip_norm = 5000.0;
    c.run.clip_iters = 100;
    c.run.latent_step_scale = 0.25;
    c.methods = {"efi"};
    c.replications = paper_scale ? paper_reps : 20;
    if (!paper_scale) halve_iterations(c.run);
    return c;
}

ExperimentConfig example_preset(Design design, bool paper_scale) {
    ExperimentConfig c;
    c.design = design;
    c.n_test = 1000;
    c.model.inverse_hidden = {90, 30};
    c.model.tau_hidden = {10, 10};
    c.model.c_hidden = {10, 10};
    c.schedule.alpha = 1.0 / 7.0;
    c.schedule.varpi = 0.1;
    c.run.eta = 10.0;
    c.run.eps = 0.1;
    c.run.burn_in = 20000;
    c.run.keep = 50000;
    c.run.thin = 5;
    c.run.init_iters = 5000;
    c.run.clip_norm = 5000.0;
    c.run.clip_iters = 100;
    c.methods = {"efi", "cqr-naive", "cqr-exact", "cqr-inexact"};
    if (design == Design::example1) {
        c.n_train = 500;
        c.model.kind = ModelKind::dnn_tau_linear_c;
        c.schedule.upsilon = {200000.0, 1e6};
        c.schedule.gamma = {{kDefaultGroup, {20000.0, 200000.0}}, {kTauHeadGroup, {400000.0, 200000.0}}};
    } else {
        c.n_train = 1000;
        c.model.kind = ModelKind::dnn_both;
        c.schedule.upsilon = {500000.0, 1e6};
        c.schedule.gamma = {{kDefaultGroup, {20000.0, 200000.0}},
                            {kTauHeadGroup, {400000.0, 200000.0}},
                            {kCHeadGroup, {400000.0, 200000.0}}};
    }
    c.replications = paper_scale ? 20 : 5;
    if (!paper_scale) halve_iterations(c.run);
    return c;
}

// ---- JSON helpers -------------------------------------------------------

[[noreturn]] void bad(const std::string& key, const std::string& what) {
    throw ConfigError("config field '" + key + "': " + what);
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) bad(where, "expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) bad(where.empty() ? k : where + "." + k, "unknown key");
    }
}

std::string key_path(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

double get_double(const json& j, const std::string& where, const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number()) bad(key_path(where, key), "expected a number");
    return v.get<double>();
}

std::size_t get_size(const json& j, const std::string& where, const char* key, std::size_t fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) bad(key_path(where, key), "expected a non-negative integer");
    return v.get<std::size_t>();
}

bool get_bool(const json& j, const std::string& where, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_boolean()) bad(key_path(where, key), "expected true or false");
    return v.get<bool>();
}

std::string get_string(const json& j, const std::string& where, const char* key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_string()) bad(key_path(where, key), "expected a string");
    return v.get<std::string>();
}

std::vector<std::size_t> get_widths(const json& j, const std::string& where, const char* key,
                                    std::vector<std::size_t> fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_array()) bad(key_path(where, key), "expected an array of widths");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
        if (!e.is_number_integer() || e.get<long long>() < 1) bad(key_path(where, key), "widths must be positive integers");
        out.push_back(e.get<std::size_t>());
    }
    return out;
}

RateConstants get_rate(const json& v, const std::string& key) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
        bad(key, "expected [C, c]");
    return {v[0].get<double>(), v[1].get<double>()};
}

json rate_json(const RateConstants& r) { return json::array({r.scale, r.offset}); }

json widths_json(const std::vector<std::size_t>& w) {
    json a = json::array();
    for (auto v : w) a.push_back(v);
    return a;
}

void apply_model(const json& j, ModelConfig& m) {
    const std::string w = "model";
    check_keys(j, w, {"kind", "c_hidden", "tau_hidden", "inverse_hidden", "activation", "rescale"});
    try {
        if (j.contains("kind")) m.kind = parse_model_kind(get_string(j, w, "kind", ""));
        if (j.contains("activation")) m.activation = nn::parse_activation(get_string(j, w, "activation", ""));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        bad(w, e.what());
    }
    m.c_hidden = get_widths(j, w, "c_hidden", m.c_hidden);
    m.tau_hidden = get_widths(j, w, "tau_hidden", m.tau_hidden);
    m.inverse_hidden = get_widths(j, w, "inverse_hidden", m.inverse_hidden);
    m.rescale = get_double(j, w, "rescale", m.rescale);
}

void apply_schedule(const json& j, ScheduleParams& s) {
    const std::string w = "schedule";
    check_keys(j, w, {"upsilon", "gamma", "alpha", "varpi"});
    if (j.contains("upsilon")) s.upsilon = get_rate(j.at("upsilon"), "schedule.upsilon");
    if (j.contains("gamma")) {
        const auto& g = j.at("gamma");
        if (!g.is_object()) bad("schedule.gamma", "expected an object of groups");
        std::map<std::string, RateConstants> groups;
        for (const auto& [name, v] : g.items()) {
            if (name != kDefaultGroup && name != kTauHeadGroup && name != kCHeadGroup)
                bad("schedule.gamma." + name, "unknown group");
            groups[name] = get_rate(v, "schedule.gamma." + name);
        }
        if (!groups.count(kDefaultGroup)) bad("schedule.gamma.default", "missing");
        s.gamma = std::move(groups);
    }
    s.alpha = get_double(j, w, "alpha", s.alpha);
    s.varpi = get_double(j, w, "varpi", s.varpi);
}

void apply_run(const json& j, RunConfig& r) {
    const std::string w = "run";
    check_keys(j, w, {"eta", "eps", "burn_in", "keep", "thin", "batch_size", "init_iters", "clip_norm", "clip_iters",
                      "step_scale", "inner_step_scale", "latent_step_scale", "prior"});
    r.eta = get_double(j, w, "eta", r.eta);
    r.eps = get_double(j, w, "eps", r.eps);
    r.burn_in = get_size(j, w, "burn_in", r.burn_in);
    r.keep = get_size(j, w, "keep", r.keep);
    r.thin = get_size(j, w, "thin", r.thin);
    r.batch_size = get_size(j, w, "batch_size", r.batch_size);
    r.init_iters = get_size(j, w, "init_iters", r.init_iters);
    r.clip_norm = get_double(j, w, "clip_norm", r.clip_norm);
    r.clip_iters = get_size(j, w, "clip_iters", r.clip_iters);
    r.step_scale = get_double(j, w, "step_scale", r.step_scale);
    r.inner_step_scale = get_double(j, w, "inner_step_scale", r.inner_step_scale);
    r.latent_step_scale = get_double(j, w, "latent_step_scale", r.latent_step_scale);
    if (j.contains("prior")) {
        const auto& p = j.at("prior");
        check_keys(p, "run.prior", {"rho", "sigma1", "sigma0"});
        r.prior.rho = get_double(p, "run.prior", "rho", r.prior.rho);
        r.prior.sigma1 = get_double(p, "run.prior", "sigma1", r.prior.sigma1);
        r.prior.sigma0 = get_double(p, "run.prior", "sigma0", r.prior.sigma0);
    }
}

void apply_cqr(const json& j, CqrConfig& c) {
    const std::string w = "cqr";
    check_keys(j, w, {"hidden", "activation", "epochs", "learning_rate", "valid_fraction", "weighted"});
    c.pinball.hidden = get_widths(j, w, "hidden", c.pinball.hidden);
    if (j.contains("activation")) {
        try {
            c.pinball.activation = nn::parse_activation(get_string(j, w, "activation", ""));
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            bad("cqr.activation", e.what());
        }
    }
    c.pinball.epochs = get_size(j, w, "epochs", c.pinball.epochs);
    c.pinball.learning_rate = get_double(j, w, "learning_rate", c.pinball.learning_rate);
    c.valid_fraction = get_double(j, w, "valid_fraction", c.valid_fraction);
    c.weighted = get_bool(j, w, "weighted", c.weighted);
}

double sd_of(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string alpha_key(double a) {
    std::ostringstream os;
    os.precision(6);
    os << a;
    return os.str();
}

void append_method(ReplicationResult& res, const std::string& method, std::size_t r,
                   const std::vector<PredictionInterval>& ivs, const Dataset& test) {
    for (const auto& iv : ivs) {
        IntervalRow row{method, r, iv, test.has_truth() ? ite_truth(test, iv.subject_id, iv.kind) : kNaN};
        res.rows.push_back(row);
    }
}

}  // namespace

const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"efi", "cqr-naive", "cqr-exact", "cqr-inexact"};
    return m;
}

std::vector<std::string> preset_names() {
    return {"linear_ate_n250", "linear_ate_n500", "linear_ate_n1000", "example1", "example2"};
}

ExperimentConfig preset(const std::string& name, bool paper_scale) {
    ExperimentConfig c;
    if (name == "linear_ate_n250")
        c = linear_preset(250, 200000.0, 100, paper_scale);
    else if (name == "linear_ate_n500")
        c = linear_preset(500, 500000.0, 100, paper_scale);
    else if (name == "linear_ate_n1000")
        c = linear_preset(1000, 500000.0, 100, paper_scale);
    else if (name == "example1")
        c = example_preset(Design::example1, paper_scale);
    else if (name == "example2")
        c = example_preset(Design::example2, paper_scale);
    else
        throw ConfigError("config field 'preset': unknown preset '" + name + "'");
    c.preset = name;
    return c;
}

void validate(const ExperimentConfig& c) {
    if (c.replications < 1) bad("replications", "must be at least 1");
    if (c.methods.empty()) bad("methods", "must not be empty");
    std::set<std::string> seen;
    for (const auto& m : c.methods) {
        if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
            bad("methods", "unknown method '" + m + "'");
        if (!seen.insert(m).second) bad("methods", "duplicate method '" + m + "'");
    }
    if (c.alphas.empty()) bad("alphas", "must not be empty");
    for (double a : c.alphas)
        if (!(a > 0.0 && a < 1.0)) bad("alphas", "every level must lie in (0, 1)");
    if (c.design.has_value() == c.csv.has_value()) bad("design", "give exactly one of design or csv");
    if (c.csv) {
        if (!(c.csv->test_fraction >= 0.0 && c.csv->test_fraction < 1.0)) bad("csv.test_fraction", "must lie in [0, 1)");
    } else if (c.n_train < 2) {
        bad("n_train", "must be at least 2");
    }
    if (c.design && *c.design == Design::linear_ate && c.model.kind != ModelKind::linear_ate)
        bad("model.kind", "the linear design needs the linear_ate model");
    if (c.model.inverse_hidden.empty()) bad("model.inverse_hidden", "needs at least one hidden layer");
    if (!(c.model.rescale > 0.0)) bad("model.rescale", "must be positive");
    try {
        validate(c.schedule);
    } catch (const Error& e) {
        bad("schedule", e.what());
    }
    try {
        validate(c.run);
    } catch (const Error& e) {
        bad("run", e.what());
    }
    if (c.cqr.pinball.epochs == 0) bad("cqr.epochs", "must be positive");
    if (!(c.cqr.pinball.learning_rate > 0.0)) bad("cqr.learning_rate", "must be positive");
    if (!(c.cqr.valid_fraction > 0.0 && c.cqr.valid_fraction < 1.0)) bad("cqr.valid_fraction", "must lie in (0, 1)");
}

ExperimentConfig config_from_json(const json& j, bool paper_scale) {
    check_keys(j, "", {"preset", "design", "csv", "replications", "n_train", "n_test", "d", "model", "schedule", "run",
                       "alphas", "methods", "cqr", "seed", "out_dir", "trace", "treated_only_pehe"});
    ExperimentConfig c;
    if (j.contains("preset")) c = preset(get_string(j, "", "preset", ""), paper_scale);
    if (j.contains("design")) {
        try {
            c.design = parse_design(get_string(j, "", "design", ""));
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            bad("design", e.what());
        }
        c.csv.reset();
    }
    if (j.contains("csv")) {
        const auto& s = j.at("csv");
        check_keys(s, "csv", {"path", "outcome", "treatment", "covariates", "test_fraction"});
        CsvSource src;
        src.path = get_string(s, "csv", "path", "");
        if (src.path.empty()) bad("csv.path", "missing");
        src.schema.outcome = get_string(s, "csv", "outcome", "y");
        src.schema.treatment = get_string(s, "csv", "treatment", "t");
        if (s.contains("covariates")) {
            if (!s.at("covariates").is_array()) bad("csv.covariates", "expected an array of names");
            for (const auto& v : s.at("covariates")) {
                if (!v.is_string()) bad("csv.covariates", "expected an array of names");
                src.schema.covariates.push_back(v.get<std::string>());
            }
        }
        src.test_fraction = get_double(s, "csv", "test_fraction", 0.0);
        c.csv = src;
        c.design.reset();
    }
    c.replications = get_size(j, "", "replications", c.replications);
    c.n_train = get_size(j, "", "n_train", c.n_train);
    c.n_test = get_size(j, "", "n_test", c.n_test);
    c.d = get_size(j, "", "d", c.d);
    if (j.contains("model")) apply_model(j.at("model"), c.model);
    if (j.contains("schedule")) apply_schedule(j.at("schedule"), c.schedule);
    if (j.contains("run")) apply_run(j.at("run"), c.run);
    if (j.contains("cqr")) apply_cqr(j.at("cqr"), c.cqr);
    if (j.contains("alphas")) {
        const auto& a = j.at("alphas");
        if (!a.is_array()) bad("alphas", "expected an array of levels");
        c.alphas.clear();
        for (const auto& v : a) {
            if (!v.is_number()) bad("alphas", "expected an array of levels");
            c.alphas.push_back(v.get<double>());
        }
    }
    if (j.contains("methods")) {
        const auto& m = j.at("methods");
        if (!m.is_array()) bad("methods", "expected an array of method names");
        c.methods.clear();
        for (const auto& v : m) {
            if (!v.is_string()) bad("methods", "expected an array of method names");
            c.methods.push_back(v.get<std::string>());
        }
    }
    if (j.contains("seed")) {
        const auto& s = j.at("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
            bad("seed", "expected a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    c.out_dir = get_string(j, "", "out_dir", c.out_dir.string());
    c.trace = get_bool(j, "", "trace", c.trace);
    c.treated_only_pehe = get_bool(j, "", "treated_only_pehe", c.treated_only_pehe);
    validate(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, bool paper_scale) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, paper_scale);
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    if (!c.preset.empty()) j["preset"] = c.preset;
    if (c.design) j["design"] = std::string(to_string(*c.design));
    if (c.csv) {
        json covs = json::array();
        for (const auto& s : c.csv->schema.covariates) covs.push_back(s);
        j["csv"] = {{"path", c.csv->path.string()},
                    {"outcome", c.csv->schema.outcome},
                    {"treatment", c.csv->schema.treatment},
                    {"covariates", covs},
                    {"test_fraction", c.csv->test_fraction}};
    }
    j["replications"] = c.replications;
    j["n_train"] = c.n_train;
    j["n_test"] = c.n_test;
    j["d"] = c.d;
    j["model"] = {{"kind", std::string(to_string(c.model.kind))},
                  {"c_hidden", widths_json(c.model.c_hidden)},
                  {"tau_hidden", widths_json(c.model.tau_hidden)},
                  {"inverse_hidden", widths_json(c.model.inverse_hidden)},
                  {"activation", std::string(nn::to_string(c.model.activation))},
                  {"rescale", c.model.rescale}};
    json gamma = json::object();
    for (const auto& [g, r] : c.schedule.gamma) gamma[g] = rate_json(r);
    j["schedule"] = {{"upsilon", rate_json(c.schedule.upsilon)},
                     {"gamma", gamma},
                     {"alpha", c.schedule.alpha},
                     {"varpi", c.schedule.varpi}};
    j["run"] = {{"eta", c.run.eta},
                {"eps", c.run.eps},
                {"burn_in", c.run.burn_in},
                {"keep", c.run.keep},
                {"thin", c.run.thin},
                {"batch_size", c.run.batch_size},
                {"init_iters", c.run.init_iters},
                {"clip_norm", c.run.clip_norm},
                {"clip_iters", c.run.clip_iters},
                {"step_scale", c.run.step_scale},
                {"inner_step_scale", c.run.inner_step_scale},
                {"latent_step_scale", c.run.latent_step_scale},
                {"prior", {{"rho", c.run.prior.rho}, {"sigma1", c.run.prior.sigma1}, {"sigma0", c.run.prior.sigma0}}}};
    j["alphas"] = c.alphas;
    j["methods"] = c.methods;
    j["cqr"] = {{"hidden", widths_json(c.cqr.pinball.hidden)},
                {"activation", std::string(nn::to_string(c.cqr.pinball.activation))},
                {"epochs", c.cqr.pinball.epochs},
                {"learning_rate", c.cqr.pinball.learning_rate},
                {"valid_fraction", c.cqr.valid_fraction},
                {"weighted", c.cqr.weighted}};
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir.string();
    j["trace"] = c.trace;
    j["treated_only_pehe"] = c.treated_only_pehe;
    return j;
}

std::uint64_t replication_seed(const ExperimentConfig& config, std::size_t r) { return derive_seed(config.seed, r); }

ReplicationData replication_data(const ExperimentConfig& config, std::size_t r) {
    const std::uint64_t rs = replication_seed(config, r);
    if (config.design) {
        GenSpec g;
        g.design = *config.design;
        g.d = config.d;
        g.n = config.n_train;
        g.seed = derive_seed(rs, 1);
        ReplicationData out{generate(g), {}};
        if (config.n_test > 0) {
            g.n = config.n_test;
            g.seed = derive_seed(rs, 2);
            out.test = generate(g);
        } else {
            out.test.d = out.train.d;
        }
        return out;
    }
    const Dataset all = load_csv_dataset(config.csv->path, config.csv->schema);
    if (config.csv->test_fraction == 0.0) {
        ReplicationData out{all, {}};
        out.test.d = all.d;
        return out;
    }
    std::vector<std::size_t> idx(all.n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(rs, 3));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(config.csv->test_fraction * static_cast<double>(all.n)));
    if (n_test == 0 || n_test >= all.n) throw ConfigError("config field 'csv.test_fraction': leaves an empty split");
    std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {all.subset(train), all.subset(test)};
}

ThetaLayout make_layout(const ExperimentConfig& config, std::size_t d) {
    const auto& m = config.model;
    switch (m.kind) {
        case ModelKind::linear_ate: return ThetaLayout::linear_ate(d);
        case ModelKind::dnn_tau_linear_c:
            return ThetaLayout::dnn_tau_linear_c(d, m.tau_hidden, m.activation, m.rescale);
        case ModelKind::dnn_both: return ThetaLayout::dnn_both(d, m.c_hidden, m.tau_hidden, m.activation, m.rescale);
    }
    throw ConfigError("config field 'model.kind': unsupported");
}

nn::MlpSpec make_inverse_spec(const ExperimentConfig& config, const ThetaLayout& layout, std::uint64_t seed) {
    nn::MlpSpec s;
    s.widths.push_back(layout.covariate_dim + 3);
    for (auto w : config.model.inverse_hidden) s.widths.push_back(w);
    s.widths.push_back(layout.dim());
    s.activation = config.model.activation;
    s.seed = seed;
    return s;
}

ReplicationResult run_replication(const ExperimentConfig& config, std::size_t r, bool keep_chain, std::ostream* trace) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t rs = replication_seed(config, r);
    const auto data = replication_data(config, r);
    ReplicationResult res;
    res.index = r;

    for (const auto& method : config.methods) {
        if (method == "efi") {
            const auto layout = make_layout(config, data.train.d);
            const auto inv = make_inverse_spec(config, layout, derive_seed(rs, 10));
            RunConfig run = config.run;
            run.seed = derive_seed(rs, 11);
            if (!trace) run.trace_every = 0;
            FiducialChain chain;
            try {
                chain = run_efi(data.train, layout, inv, config.schedule, run, trace);
            } catch (const DivergenceError& e) {
                throw DivergenceError("replication " + std::to_string(r) + ": " + e.what());
            }
            for (double a : config.alphas) {
                if (layout.kind == ModelKind::linear_ate) {
                    const auto iv = ate_interval(chain, layout, a);
                    double truth = kNaN;
                    if (data.train.has_truth()) {
                        const auto& tau = data.train.truth->tau;
                        truth = std::accumulate(tau.begin(), tau.end(), 0.0) / static_cast<double>(tau.size());
                    }
                    res.rows.push_back({method, r, iv, truth});
                }
                if (data.test.n > 0)
                    append_method(res, method, r, ite_intervals(chain, layout, data.test, a, derive_seed(rs, 12)),
                                  data.test);
            }
            if (data.test.n > 0 && data.test.has_truth())
                res.pehe[method] = pehe(chain, layout, data.test, config.treated_only_pehe);
            if (keep_chain) res.chain = std::move(chain);
            continue;
        }
        if (data.test.n == 0) continue;
        CqrConfig cc = config.cqr;
        cc.seed = derive_seed(rs, 20);
        cc.pinball.seed = derive_seed(rs, 21);
        const CqrMode mode = parse_cqr_mode(method.substr(4));
        for (double a : config.alphas) {
            append_method(res, method, r, cqr_observed(data.train, data.test, a, cc), data.test);
            append_method(res, method, r, cqr_ite(data.train, data.test, a, mode, cc), data.test);
        }
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

MetricSummary summarize_metric(std::vector<double> values) {
    MetricSummary s;
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    s.sd = sd_of(values, s.mean);
    s.per_replication = std::move(values);
    return s;
}

json summarize(const std::vector<IntervalRow>& rows, const std::map<std::string, std::vector<double>>& pehe) {
    // (method, alpha, case) -> replication -> rows
    using Key = std::tuple<std::string, std::string, std::string>;
    std::map<Key, std::map<std::size_t, std::vector<const IntervalRow*>>> groups;
    for (const auto& row : rows) {
        if (std::isnan(row.truth)) continue;
        const auto a = alpha_key(row.interval.alpha);
        groups[{row.method, a, "all"}][row.replication].push_back(&row);
        groups[{row.method, a, to_string(row.interval.kind)}][row.replication].push_back(&row);
    }
    json methods = json::object();
    for (const auto& [key, reps] : groups) {
        const auto& [method, a, kind] = key;
        std::vector<double> cov, len;
        for (const auto& [r, list] : reps) {
            double c = 0.0, l = 0.0;
            for (const auto* row : list) {
                c += row->interval.contains(row->truth) ? 1.0 : 0.0;
                l += row->interval.length();
            }
            cov.push_back(c / static_cast<double>(list.size()));
            len.push_back(l / static_cast<double>(list.size()));
        }
        const auto cs = summarize_metric(cov);
        const auto ls = summarize_metric(len);
        methods[method]["alpha=" + a][kind] = {{"coverage_mean", cs.mean},
                                                {"coverage_sd", cs.sd},
                                                {"length_mean", ls.mean},
                                                {"length_sd", ls.sd},
                                                {"replications", cov.size()},
                                                {"coverage", cs.per_replication},
                                                {"length", ls.per_replication}};
    }
    for (const auto& [method, values] : pehe) {
        if (values.empty()) continue;
        const auto s = summarize_metric(values);
        methods[method]["pehe"] = {{"mean", s.mean}, {"sd", s.sd}, {"per_replication", s.per_replication}};
    }
    return {{"methods", methods}};
}

void write_chain_csv(const FiducialChain& chain, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "draw,sigma,energy";
    if (!chain.draws.empty())
        for (std::size_t k = 0; k < chain.draws.front().size(); ++k) out << ",theta" << k;
    out << '\n';
    for (std::size_t i = 0; i < chain.draws.size(); ++i) {
        out << i << ',' << chain.sigmas[i] << ',' << chain.energies[i];
        for (double v : chain.draws[i]) out << ',' << v;
        out << '\n';
    }
}

void write_json(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t workers) {
    validate(config);
    std::filesystem::create_directories(config.out_dir);
    const std::size_t R = config.replications;
    std::vector<ReplicationResult> results(R);
    std::vector<std::exception_ptr> errors(R);
    std::vector<std::ostringstream> traces(config.trace ? R : 0);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t r = next++; r < R; r = next++) {
            try {
                results[r] = run_replication(config, r, false, config.trace ? &traces[r] : nullptr);
            } catch (...) {
                errors[r] = std::current_exception();
            }
        }
    };
    workers = std::clamp<std::size_t>(workers, 1, R);
    if (workers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t k = 0; k < workers; ++k) pool.emplace_back(work);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentResult out;
    std::vector<IntervalRow> all;
    std::map<std::string, std::vector<double>> pehe;
    {
        std::ofstream csv(config.out_dir / "intervals.csv");
        if (!csv) throw DataError("cannot write intervals.csv in " + config.out_dir.string());
        write_intervals_header(csv);
        for (const auto& rr : results) {
            for (const auto& row : rr.rows) write_interval_row(csv, row);
            all.insert(all.end(), rr.rows.begin(), rr.rows.end());
            for (const auto& [m, v] : rr.pehe) pehe[m].push_back(v);
        }
    }
    if (config.trace)
        for (std::size_t r = 0; r < R; ++r) {
            std::ofstream t(config.out_dir / ("trace_r" + std::to_string(r) + ".csv"));
            t << traces[r].str();
        }
    out.summary = summarize(all, pehe);
    out.summary["config"] = config_to_json(config);
    out.summary["config"].erase("out_dir");  // summaries compare equal across output folders
    write_json(out.summary, config.out_dir / "summary.json");
    write_json(config_to_json(config), config.out_dir / "config.json");
    out.replications = std::move(results);
    return out;
}

}  // namespace efi
