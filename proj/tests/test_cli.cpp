#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "cli.hpp"

namespace fs = std::filesystem;
using namespace entangle;

namespace {

struct CliRun {
    int code;
    std::string output;
};

CliRun run_cli(const std::string& args) {
    const std::string cmd = std::string(ENTANGLE_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {-1, ""};
    std::string out;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("entangle_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
}

std::string config(const std::string& name) { return std::string(ENTANGLE_SOURCE_DIR) + "/configs/" + name; }

// Data rows of a CSV as split cells, after the header.
std::vector<std::vector<std::string>> rows(const fs::path& p, std::vector<std::string>* header = nullptr) {
    std::ifstream in(p);
    std::string line;
    std::vector<std::vector<std::string>> out;
    bool seen_header = false;
    while (std::getline(in, line)) {
        if (line.rfind("#", 0) == 0) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!seen_header) {
            seen_header = true;
            if (header) *header = cells;
            continue;
        }
        out.push_back(cells);
    }
    return out;
}

}  // namespace

TEST(Config, ResolvesUnitsAndDefaults) {
    const cli::Settings s = cli::load_settings(config("fig5.cfg"));
    EXPECT_NEAR(s.k(), 1.3 * 2.0 * std::numbers::pi, 1e-12);
    EXPECT_NEAR(s.tau(), 1.0 / (2.0 * std::numbers::pi * 1.6), 1e-15);
    ASSERT_TRUE(s.decoherence());
    EXPECT_EQ(s.decoherence()->tphi[0], 6.9);
    const cli::Settings angular = cli::load_settings(config("fig5.cfg"), {"time_convention=\"angular\""});
    EXPECT_NEAR(angular.decoherence()->tphi[0], 6.9 / (2.0 * std::numbers::pi), 1e-15);
    const cli::Settings d = cli::load_settings("", {"eta=0.3"});
    EXPECT_NEAR(d.k(), 2.0 * std::numbers::pi, 1e-15);
    EXPECT_NEAR(d.dt(), 1e-3 / d.k(), 1e-18);
    EXPECT_EQ(d.eta, 0.3);
}

TEST(Config, RejectsBadInputWithKeyNames) {
    const fs::path dir = scratch("config");
    auto error_key = [&](const std::string& text) {
        try {
            cli::load_settings(write_file(dir, "c.cfg", text).string());
        } catch (const cli::ConfigError& e) {
            return e.key();
        }
        return std::string("<no error>");
    };
    EXPECT_EQ(error_key(R"({"eta": 0.5})"), "k_2pi_mhz");
    EXPECT_EQ(error_key(R"({"k_2pi_mhz": 1, "eta": 1.2})"), "eta");
    EXPECT_EQ(error_key(R"({"k_2pi_mhz": 1, "colour": 3})"), "colour");
    EXPECT_EQ(error_key(R"({"k_2pi_mhz": 1, "n_traj": 2.5})"), "n_traj");
    EXPECT_EQ(error_key(R"({"k_2pi_mhz": 1, "time_convention": "hours"})"), "time_convention");
    EXPECT_EQ(error_key(R"({"k_2pi_mhz": 1, "bandwidth_2pi_mhz": 1.0, "dt_us": 0.05})"), "dt_us");
    EXPECT_EQ(error_key("{\"k_2pi_mhz\": 1,\n  \"eta\": }"), "");
}

TEST(Config, OverridesParseJsonOrString) {
    EXPECT_EQ(cli::parse_override("eta=0.25").second, 0.25);
    EXPECT_EQ(cli::parse_override("initial=t0").second, "t0");
    EXPECT_EQ(cli::parse_override("etas=[1,0.5]").second.size(), 2u);
    EXPECT_THROW(cli::parse_override("eta"), cli::ConfigError);
}

TEST(Format, ShortestRoundTrip) {
    for (double x : {0.1, 1.0 / 3.0, 2.5e-17, -7.0, 123456.789}) EXPECT_EQ(std::stod(cli::fmt(x)), x);
    EXPECT_EQ(cli::fmt(0.5), "0.5");
    EXPECT_EQ(cli::fmt(std::nan("")), "nan");
}

TEST(Cli, ExitCodesAndDiagnostics) {
    const fs::path dir = scratch("exit");
    const CliRun missing = run_cli("--config " + write_file(dir, "m.cfg", R"({"eta": 0.5})").string() + " validate");
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.output.find("k_2pi_mhz"), std::string::npos) << missing.output;
    const CliRun range = run_cli("--eta 1.2 validate");
    EXPECT_EQ(range.code, 2);
    EXPECT_NE(range.output.find("out of range"), std::string::npos) << range.output;
    const CliRun syntax = run_cli("--config " + write_file(dir, "s.cfg", "{\"k_2pi_mhz\": 1,\n \"eta\": }").string() + " validate");
    EXPECT_EQ(syntax.code, 2);
    EXPECT_NE(syntax.output.find("line 2"), std::string::npos) << syntax.output;
    EXPECT_EQ(run_cli("--set nonsense=1 validate").code, 2);
    EXPECT_EQ(run_cli("no-such-command").code, 2);
    // A coarse integrator step misses the closed form: tolerance failure.
    EXPECT_EQ(run_cli("--out " + (dir / "o").string() + " --set dt_us=0.05 continuous").code, 3);
}

TEST(Cli, ValidateShowsResolvedValues) {
    const CliRun r = run_cli("--config " + config("fig5.cfg") + " validate");
    EXPECT_EQ(r.code, 0) << r.output;
    const auto j = cli::Json::parse(r.output);
    EXPECT_NEAR(j["k_rad_per_us"].get<double>(), 2.6 * std::numbers::pi, 1e-12);
    EXPECT_EQ(j["time_convention"], "microseconds");
    for (const char* c : {"default.cfg", "fig1.cfg", "fig2.cfg", "fig3.cfg", "fig4.cfg"}) {
        EXPECT_EQ(run_cli("--config " + config(c) + " validate").code, 0) << c;
    }
}

TEST(Cli, PovmCheckPasses) {
    const fs::path dir = scratch("povm");
    const CliRun r = run_cli("--out " + dir.string() + " povm-check");
    EXPECT_EQ(r.code, 0) << r.output;
    std::vector<std::string> header;
    const auto data = rows(dir / "povm-check.csv", &header);
    EXPECT_EQ(header, (std::vector<std::string>{"eta", "k_dt", "nodes", "completeness_residual", "composition_residual"}));
    EXPECT_EQ(data.size(), 6u);
    for (const auto& row : data) {
        EXPECT_LT(std::stod(row[3]), 1e-8);
        EXPECT_LE(std::stod(row[4]), 1e-10);
    }
    const auto side = cli::Json::parse(slurp(dir / "povm-check.json"));
    EXPECT_EQ(side["seed"], 1);
    EXPECT_TRUE(side["config"].contains("k_rad_per_us"));
}

TEST(Cli, ContinuousMatchesClosedForm) {
    const fs::path dir = scratch("continuous");
    const CliRun r = run_cli("--out " + dir.string() + " --eta 1 continuous");
    ASSERT_EQ(r.code, 0) << r.output;
    const double k = 2.0 * std::numbers::pi;
    const auto data = rows(dir / "continuous.csv");
    ASSERT_GT(data.size(), 100u);
    for (const auto& row : data) {
        const double t = std::stod(row[0]);
        EXPECT_NEAR(std::stod(row[1]), 1.0 - 0.5 * std::exp(-2.0 * k * t), 1e-3);
    }
}

TEST(Cli, IdenticalSeedGivesIdenticalBytes) {
    const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
    const std::string args = " --config " + config("fig5.cfg") + " --traj 40 --set horizon_us=0.6 --set post_select_window_us=0.5 experiment";
    ASSERT_EQ(run_cli("--out " + a.string() + args).code, 0);
    ASSERT_EQ(run_cli("--out " + b.string() + args).code, 0);
    ASSERT_EQ(run_cli("--out " + c.string() + " --seed 99" + args).code, 0);
    EXPECT_EQ(slurp(a / "experiment.csv"), slurp(b / "experiment.csv"));
    EXPECT_EQ(slurp(a / "experiment.json"), slurp(b / "experiment.json"));
    EXPECT_NE(slurp(a / "experiment.csv"), slurp(c / "experiment.csv"));
    std::vector<std::string> header;
    rows(a / "experiment.csv", &header);
    EXPECT_EQ(header, (std::vector<std::string>{"curve", "t_us", "mean_fidelity", "sem_fidelity", "concurrence", "n_kept"}));
}

TEST(Cli, FigureSubcommandsWriteTheirTables) {
    const fs::path dir = scratch("figs");
    const std::string out = " --out " + dir.string();
    EXPECT_EQ(run_cli("--config " + config("fig1.cfg") + out + " --traj 2000 histogram").code, 0);
    EXPECT_EQ(run_cli("--config " + config("fig2.cfg") + out + " semiclassical").code, 0);
    EXPECT_EQ(run_cli("--config " + config("fig3.cfg") + out + " quantum-discrete").code, 0);
    EXPECT_EQ(run_cli("--config " + config("fig4.cfg") + out +
                      " --set n_steps=8 --set horizon_us=1 --set restarts=1 --set max_iterations=5 hybrid-optimize")
                  .code,
              0);
    EXPECT_EQ(run_cli(out + " --set thresholds=[0.3] --set rounds=300 --traj 200 --set p_over_k=[4] --set etas=[0.5] steady-state").code, 0);
    for (const char* f : {"histogram.csv", "semiclassical.csv", "quantum-discrete.csv", "quantum-discrete_theta.csv",
                          "hybrid-optimize.csv", "hybrid-optimize_schedule.csv", "hybrid-optimize_trace.csv",
                          "steady-state.csv"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
        EXPECT_FALSE(rows(dir / f).empty()) << f;
    }
    // Histogram densities integrate to the sampled fraction inside the range.
    double mc = 0.0, exact = 0.0, width = 0.0;
    const auto hist = rows(dir / "histogram.csv");
    width = std::stod(hist[1][1]) - std::stod(hist[0][1]);
    for (const auto& row : hist) {
        if (row[0] != "1") continue;
        mc += std::stod(row[3]) * width;
        exact += std::stod(row[4]) * width;
    }
    EXPECT_NEAR(mc, 1.0, 1e-3);
    EXPECT_NEAR(exact, 1.0, 1e-3);
}
