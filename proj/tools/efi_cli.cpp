#include "efi/datagen.hpp"
#include "efi/errors.hpp"
#include "efi/experiment.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace efi;

namespace {

struct Common {
    std::string config = "example1";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool paper_scale = false;
    std::size_t workers = 1;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON config file or preset name")->capture_default_str();
    app->add_option("--seed", c.seed, "Master seed");
    app->add_option("--out", c.out, "Output directory");
    app->add_flag("--paper-scale", c.paper_scale, "Use the published iteration and replication counts");
    app->add_option("--workers", c.workers, "Replications run in parallel")->check(CLI::PositiveNumber)->capture_default_str();
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg;
    if (fs::exists(c.config)) {
        cfg = load_config(c.config, c.paper_scale);
    } else {
        cfg = preset(c.config, c.paper_scale);
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.out) cfg.out_dir = *c.out;
    validate(cfg);
    return cfg;
}

void print_summary(const nlohmann::json& summary) {
    for (const auto& [method, block] : summary.at("methods").items()) {
        for (const auto& [key, cases] : block.items()) {
            if (key == "pehe") {
                std::cout << method << "  pehe " << cases.at("mean").get<double>() << " (sd "
                          << cases.at("sd").get<double>() << ")\n";
                continue;
            }
            for (const auto& [kind, s] : cases.items())
                std::cout << method << "  " << key << "  " << kind << "  coverage "
                          << s.at("coverage_mean").get<double>() << "  length " << s.at("length_mean").get<double>()
                          << "  (R=" << s.at("replications").get<std::size_t>() << ")\n";
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Extended fiducial inference for treatment effects"};
    app.require_subcommand(1);

    Common sim_c, fit_c, cqr_c, bench_c;

    auto* sim = app.add_subcommand("simulate", "Write one generated dataset as CSV");
    add_common(sim, sim_c);
    std::string design_name;
    std::size_t sim_n = 0;
    sim->add_option("--design", design_name, "linear_ate, example1 or example2 (overrides the config)");
    sim->add_option("-n", sim_n, "Sample size (defaults to the config n_train)");

    auto* fit = app.add_subcommand("fit", "Single EFI run: chain, intervals and summary");
    add_common(fit, fit_c);
    std::size_t fit_rep = 0;
    fit->add_option("--replication", fit_rep, "Replication index")->capture_default_str();

    auto* cqr = app.add_subcommand("cqr", "CQR baseline only");
    add_common(cqr, cqr_c);

    auto* bench = app.add_subcommand("benchmark", "Every configured method over all replications");
    add_common(bench, bench_c);

    auto* report = app.add_subcommand("report", "Re-score an existing intervals.csv");
    std::string intervals_path;
    std::optional<std::string> report_out;
    report->add_option("intervals", intervals_path, "intervals.csv to score")->required()->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "Write the summary JSON here instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) {
            auto cfg = resolve(sim_c);
            if (!design_name.empty()) cfg.design = parse_design(design_name);
            if (!cfg.design) throw ConfigError("config field 'design': simulate needs a synthetic design");
            GenSpec g;
            g.design = *cfg.design;
            g.n = sim_n > 0 ? sim_n : cfg.n_train;
            g.d = cfg.d;
            g.seed = cfg.seed;
            const auto data = generate(g);
            if (sim_c.out) {
                write_csv(data, *sim_c.out);
            } else {
                write_csv(data, std::cout);
            }
            return 0;
        }
        if (fit->parsed()) {
            auto cfg = resolve(fit_c);
            if (std::find(cfg.methods.begin(), cfg.methods.end(), "efi") == cfg.methods.end())
                throw ConfigError("config field 'methods': fit needs efi");
            cfg.methods = {"efi"};
            if (fit_rep >= cfg.replications) throw ConfigError("replication index is past the configured count");
            fs::create_directories(cfg.out_dir);
            std::ofstream trace;
            if (cfg.trace) trace.open(cfg.out_dir / "trace.csv");
            auto res = run_replication(cfg, fit_rep, true, cfg.trace ? &trace : nullptr);
            write_chain_csv(*res.chain, cfg.out_dir / "chain.csv");
            {
                std::ofstream csv(cfg.out_dir / "intervals.csv");
                write_intervals_header(csv);
                for (const auto& row : res.rows) write_interval_row(csv, row);
            }
            std::map<std::string, std::vector<double>> pehe;
            for (const auto& [m, v] : res.pehe) pehe[m].push_back(v);
            auto summary = summarize(res.rows, pehe);
            summary["config"] = config_to_json(cfg);
            summary["config"].erase("out_dir");
            write_json(summary, cfg.out_dir / "summary.json");
            print_summary(summary);
            std::cout << "draws " << res.chain->draws.size() << "  seconds " << res.seconds << '\n';
            return 0;
        }
        if (cqr->parsed() || bench->parsed()) {
            const bool only_cqr = cqr->parsed();
            auto& c = only_cqr ? cqr_c : bench_c;
            auto cfg = resolve(c);
            if (only_cqr) {
                std::erase(cfg.methods, std::string("efi"));
                if (cfg.methods.empty()) cfg.methods = {"cqr-naive", "cqr-exact", "cqr-inexact"};
            }
            const auto res = run_experiment(cfg, c.workers);
            print_summary(res.summary);
            std::cout << "wrote " << (cfg.out_dir / "summary.json").string() << '\n';
            return 0;
        }
        if (report->parsed()) {
            const auto rows = read_intervals_csv(intervals_path);
            const auto summary = summarize(rows);
            if (report_out) {
                write_json(summary, *report_out);
            } else {
                std::cout << summary.dump(2) << '\n';
            }
            return 0;
        }
    } catch (const efi::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
