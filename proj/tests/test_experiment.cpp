#include "doctest.h"
#include "support.hpp"

#include "efi/datagen.hpp"
#include "efi/errors.hpp"
#include "efi/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace efi;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("efi_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_of(const nlohmann::json& j) {
    try {
        config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("csv dataset roundtrip") {
    const auto dir = scratch("csv");
    const auto data = generate({Design::example1, 40, 3});
    write_csv(data, dir / "d.csv");
    const auto back = load_csv_dataset(dir / "d.csv");
    REQUIRE(back.n == data.n);
    REQUIRE(back.d == data.d);
    for (std::size_t k = 0; k < data.x.size(); ++k) CHECK(std::abs(back.x[k] - data.x[k]) < 1e-12);
    for (std::size_t i = 0; i < data.n; ++i) {
        CHECK(back.t[i] == data.t[i]);
        CHECK(std::abs(back.y[i] - data.y[i]) < 1e-12);
    }
    fs::remove_all(dir);
}

TEST_CASE("csv dataset errors") {
    std::istringstream two("x1,t,y\n0.5,0,1.0\n0.1,2,3.0\n");
    try {
        read_csv_dataset(two);
        FAIL("expected a rejection");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
    std::istringstream no_y("x1,t\n0.5,0\n");
    CHECK_THROWS_WITH_AS(read_csv_dataset(no_y), doctest::Contains("'y'"), DataError);
    std::istringstream text("x1,t,y\nabc,0,1\n");
    CHECK_THROWS_AS(read_csv_dataset(text), DataError);
    std::istringstream empty("");
    CHECK_THROWS_AS(read_csv_dataset(empty), DataError);
}

TEST_CASE("presets carry the published constants") {
    const auto e1 = preset("example1", true);
    CHECK(e1.run.eta == 10.0);
    CHECK(e1.run.eps == doctest::Approx(0.1));
    CHECK(e1.run.burn_in == 20000);
    CHECK(e1.run.keep == 50000);
    CHECK(e1.run.thin == 5);
    CHECK(e1.run.init_iters == 5000);
    CHECK(e1.n_train == 500);
    CHECK(e1.n_test == 1000);
    CHECK(e1.replications == 20);

    const auto lin = preset("linear_ate_n250", true);
    CHECK(lin.schedule.upsilon.scale == 200000.0);
    CHECK(lin.schedule.upsilon.offset == 1e6);
    CHECK(lin.schedule.gamma.at(kDefaultGroup).scale == 54000.0);
    CHECK(lin.schedule.gamma.at(kDefaultGroup).offset == 1e6);
    CHECK(lin.schedule.alpha == doctest::Approx(1.0 / 7.0));
    CHECK(lin.schedule.varpi == doctest::Approx(0.1));
    CHECK(lin.run.eta == 500.0);

    const auto desk = preset("example1");
    CHECK(desk.run.burn_in == 10000);
    CHECK(desk.run.keep == 25000);
    CHECK(desk.run.init_iters == 2500);
    CHECK(desk.replications == 5);
    CHECK_THROWS_AS(preset("nope"), ConfigError);
}

TEST_CASE("config validation names the offending key") {
    CHECK(error_of({{"preset", "example1"}, {"replicatons", 3}}).find("replicatons") != std::string::npos);
    CHECK(error_of({{"preset", "example1"}, {"run", {{"eta", "ten"}}}}).find("run.eta") != std::string::npos);
    CHECK(error_of({{"preset", "example1"}, {"methods", nlohmann::json::array()}}).find("methods") != std::string::npos);
    CHECK(error_of({{"preset", "example1"}, {"replications", 0}}).find("replications") != std::string::npos);
    CHECK(error_of({{"preset", "example1"}, {"schedule", {{"gamma", {{"head", {1, 2}}}}}}}).find("schedule.gamma.head") !=
          std::string::npos);
    CHECK(error_of({{"design", "example1"}, {"methods", {"efi", "magic"}}}).find("methods") != std::string::npos);

    const auto dir = scratch("cfg");
    std::ofstream(dir / "bad.json") << "{ \"preset\": ";
    CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("config json roundtrip") {
    auto c = preset("example2");
    c.seed = 99;
    c.alphas = {0.05, 0.1};
    const auto j = config_to_json(c);
    const auto back = config_from_json(j);
    CHECK(config_to_json(back) == j);
}

TEST_CASE("replication seeds and data are independent and reproducible") {
    const auto c = preset("example1");
    CHECK(replication_seed(c, 0) != replication_seed(c, 1));
    const auto a = replication_data(c, 1);
    const auto b = replication_data(c, 1);
    const auto other = replication_data(c, 2);
    CHECK(a.train.y == b.train.y);
    CHECK(a.test.y == b.test.y);
    CHECK(a.train.y != other.train.y);
    CHECK(a.train.n == 500);
    CHECK(a.test.n == 1000);
}

TEST_CASE("summary means equal the mean of per-replication metrics") {
    std::vector<IntervalRow> rows;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t i = 0; i < 4; ++i) {
            const double lo = static_cast<double>(r) - 1.0, hi = lo + static_cast<double>(i + 1);
            rows.push_back({"efi", r, {i, IteCase::Im, lo, hi, 0.05}, 0.5});
        }
    const auto s = summarize(rows, {{"efi", {0.1, 0.2, 0.6}}});
    const auto& all = s["methods"]["efi"]["alpha=0.05"]["all"];
    double mean_cov = 0.0;
    for (const auto& v : all["coverage"]) mean_cov += v.get<double>() / 3.0;
    CHECK(std::abs(all["coverage_mean"].get<double>() - mean_cov) < 1e-10);
    CHECK(all["length_mean"].get<double>() == doctest::Approx(2.5));
    CHECK(s["methods"]["efi"]["pehe"]["mean"].get<double>() == doctest::Approx(0.3));
    CHECK(all["replications"].get<std::size_t>() == 3);
}

TEST_CASE("smoke run: files, draw count, both method blocks, determinism") {
    const auto dir = scratch("smoke");
    nlohmann::json j = {{"preset", "example1"},
                        {"replications", 1},
                        {"n_train", 120},
                        {"n_test", 50},
                        {"methods", {"efi", "cqr-inexact"}},
                        {"run", {{"burn_in", 2000}, {"keep", 5000}, {"init_iters", 200}}},
                        {"cqr", {{"epochs", 100}}},
                        {"out_dir", (dir / "a").string()}};
    auto cfg = config_from_json(j);
    const auto res = run_experiment(cfg);
    CHECK(fs::exists(dir / "a" / "intervals.csv"));
    CHECK(fs::exists(dir / "a" / "summary.json"));
    CHECK(fs::exists(dir / "a" / "config.json"));
    CHECK(res.summary["methods"].contains("efi"));
    CHECK(res.summary["methods"].contains("cqr-inexact"));
    CHECK(res.summary["methods"]["efi"].contains("pehe"));

    const auto one = run_replication(cfg, 0, true);
    REQUIRE(one.chain.has_value());
    CHECK(one.chain->draws.size() == 1000);

    for (const auto& row : read_intervals_csv(dir / "a" / "intervals.csv")) CHECK(row.interval.lower <= row.interval.upper);

    cfg.out_dir = dir / "b";
    run_experiment(cfg, 2);
    CHECK(slurp(dir / "a" / "intervals.csv") == slurp(dir / "b" / "intervals.csv"));
    auto sa = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
    auto sb = nlohmann::json::parse(slurp(dir / "b" / "summary.json"));
    sa.erase("config");
    sb.erase("config");
    CHECK(sa == sb);
    fs::remove_all(dir);
}
