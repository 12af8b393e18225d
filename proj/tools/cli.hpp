#pragma once

// Command-line driver: JSON configs, scenario runners and CSV/JSON output.
// The runners return plain result structs so the acceptance runner and the
// tests can use them without going through files.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "entangle/average_evolution.hpp"
#include "entangle/decoherence.hpp"
#include "entangle/error.hpp"
#include "entangle/experiment.hpp"
#include "entangle/feedback.hpp"
#include "entangle/hybrid_optimizer.hpp"
#include "entangle/measurement.hpp"
#include "entangle/quadrature.hpp"
#include "entangle/state.hpp"

namespace entangle::cli {

using Json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalError = 3 };

// A config problem tied to one key (empty for file-level problems).
class ConfigError : public Error {
  public:
    ConfigError(std::string key, const std::string& what)
        : Error(key.empty() ? what : "config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

  private:
    std::string key_;
};

// Raised after outputs are written when a result misses its tolerance.
class ToleranceError : public NumericalError {
  public:
    using NumericalError::NumericalError;
};

struct Settings {
    std::string scenario;
    double k_2pi_mhz = 0.0;
    double eta = 1.0;
    double duration_us = 1.0;          // discrete window
    double dt_us = 0.0;                // continuous step; 0 means 1e-3 / k
    double horizon_us = 1.0;
    std::size_t rounds = 50;
    std::size_t n_traj = 200;
    std::uint64_t seed = 1;
    unsigned workers = 0;
    std::string initial = "psi0";
    std::string protocol = "adaptive_proportional";
    std::vector<double> thresholds;
    std::vector<double> etas{1.0, 0.2};
    std::vector<double> p_over_k{0.5, 4.0, 20.0};
    std::vector<double> k_dt{0.1, 1.0, 10.0};
    std::vector<double> windows_us;
    std::vector<std::size_t> slice_steps{0, 1, 3, 10};
    std::string time_convention = "angular";
    std::optional<std::array<double, 2>> t1_us;
    std::optional<std::array<double, 2>> tphi_us;
    double delay_us = 0.0;
    double bandwidth_2pi_mhz = 0.0;    // 0 means no filtering
    double post_select_window_us = 0.0;  // 0 disables post-selection
    double keep_fraction = 0.5;
    std::size_t record_every = 1;
    std::size_t n_steps = 200;
    int restarts = 5;
    int max_iterations = 200;
    int gradient_nodes = 61;
    double large_step_us = 0.0;        // 0 disables the uniform-large comparison
    std::size_t benchmark_traj = 0;
    std::size_t bins = 81;
    int voltage_points = 801;
    std::size_t burn_in = 100;
    bool compare_no_feedback = true;
    bool write_records = false;

    double k() const { return 2.0 * std::numbers::pi * k_2pi_mhz; }
    double dt() const { return dt_us > 0.0 ? dt_us : 1e-3 / k(); }
    double tau() const { return bandwidth_2pi_mhz > 0.0 ? 1.0 / (2.0 * std::numbers::pi * bandwidth_2pi_mhz) : 0.0; }
    MeasurementConfig measurement(double duration) const { return {k(), eta, duration}; }

    double coherence_time(double raw) const {
        return time_convention == "angular" ? raw / (2.0 * std::numbers::pi) : raw;
    }

    std::optional<DecoherenceParams> decoherence() const {
        if (!t1_us && !tphi_us) return std::nullopt;
        DecoherenceParams d;
        for (int q = 0; q < 2; ++q) {
            if (t1_us) d.t1[q] = coherence_time((*t1_us)[q]);
            if (tphi_us) d.tphi[q] = coherence_time((*tphi_us)[q]);
        }
        return d;
    }

    TwoQubitState initial_state() const {
        if (initial == "psi0") return TwoQubitState::psi0();
        if (initial == "triplet_mixed") return TwoQubitState::triplet_mixed();
        if (initial == "t0") return TwoQubitState::basis_state(kT0);
        if (initial == "ground") return TwoQubitState::basis_state(kTPlus);
        throw ConfigError("initial", "unknown state '" + initial + "'");
    }

    std::size_t steps_for(double step) const {
        const double n = std::round(horizon_us / step);
        if (!(n >= 1.0)) throw ConfigError("horizon_us", "horizon shorter than one step");
        return static_cast<std::size_t>(n);
    }
};

namespace detail {

inline double as_number(const Json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key, "expected a number, got " + v.dump());
    return v.get<double>();
}

inline double as_positive(const Json& v, const std::string& key) {
    const double x = as_number(v, key);
    if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError(key, "must be positive (got " + v.dump() + ")");
    return x;
}

inline double as_non_negative(const Json& v, const std::string& key) {
    const double x = as_number(v, key);
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError(key, "must be non-negative (got " + v.dump() + ")");
    return x;
}

inline std::uint64_t as_count(const Json& v, const std::string& key, std::uint64_t min = 0) {
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < static_cast<std::int64_t>(min))) {
        throw ConfigError(key, "expected an integer >= " + std::to_string(min) + ", got " + v.dump());
    }
    return v.get<std::uint64_t>();
}

inline std::string as_string(const Json& v, const std::string& key, std::initializer_list<const char*> allowed) {
    if (!v.is_string()) throw ConfigError(key, "expected a string, got " + v.dump());
    const std::string s = v.get<std::string>();
    if (allowed.size() == 0) return s;
    std::string list;
    for (const char* a : allowed) {
        if (s == a) return s;
        list += std::string(list.empty() ? "" : ", ") + a;
    }
    throw ConfigError(key, "'" + s + "' is not one of " + list);
}

inline std::vector<double> as_numbers(const Json& v, const std::string& key) {
    if (!v.is_array()) throw ConfigError(key, "expected an array of numbers, got " + v.dump());
    std::vector<double> out;
    for (const auto& x : v) out.push_back(as_number(x, key));
    return out;
}

// A number (same for both qubits) or a two-element array; null clears it.
inline std::optional<std::array<double, 2>> as_pair(const Json& v, const std::string& key) {
    if (v.is_null()) return std::nullopt;
    if (v.is_number()) {
        const double x = as_positive(v, key);
        return std::array<double, 2>{x, x};
    }
    if (v.is_array() && v.size() == 2) return std::array<double, 2>{as_positive(v[0], key), as_positive(v[1], key)};
    throw ConfigError(key, "expected a positive number or a two-element array, got " + v.dump());
}

using Setter = std::function<void(Settings&, const Json&)>;

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> m;
        m["scenario"] = [](Settings& s, const Json& v) { s.scenario = as_string(v, "scenario", {}); };
        m["k_2pi_mhz"] = [](Settings& s, const Json& v) { s.k_2pi_mhz = as_positive(v, "k_2pi_mhz"); };
        m["eta"] = [](Settings& s, const Json& v) {
            const double x = as_number(v, "eta");
            if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("eta", "out of range [0, 1] (got " + v.dump() + ")");
            s.eta = x;
        };
        m["duration_us"] = [](Settings& s, const Json& v) { s.duration_us = as_positive(v, "duration_us"); };
        m["dt_us"] = [](Settings& s, const Json& v) { s.dt_us = as_non_negative(v, "dt_us"); };
        m["horizon_us"] = [](Settings& s, const Json& v) { s.horizon_us = as_positive(v, "horizon_us"); };
        m["rounds"] = [](Settings& s, const Json& v) { s.rounds = as_count(v, "rounds", 1); };
        m["n_traj"] = [](Settings& s, const Json& v) { s.n_traj = as_count(v, "n_traj", 1); };
        m["seed"] = [](Settings& s, const Json& v) { s.seed = as_count(v, "seed"); };
        m["workers"] = [](Settings& s, const Json& v) { s.workers = static_cast<unsigned>(as_count(v, "workers")); };
        m["initial"] = [](Settings& s, const Json& v) {
            s.initial = as_string(v, "initial", {"psi0", "triplet_mixed", "t0", "ground"});
        };
        m["protocol"] = [](Settings& s, const Json& v) {
            s.protocol = as_string(v, "protocol", {"adaptive_proportional", "none", "locally_optimal"});
        };
        m["thresholds"] = [](Settings& s, const Json& v) {
            s.thresholds = as_numbers(v, "thresholds");
            for (double t : s.thresholds)
                if (!(t >= 0.0)) throw ConfigError("thresholds", "threshold voltages must be non-negative");
        };
        m["etas"] = [](Settings& s, const Json& v) {
            s.etas = as_numbers(v, "etas");
            for (double e : s.etas)
                if (!(e > 0.0 && e <= 1.0)) throw ConfigError("etas", "efficiencies must lie in (0, 1]");
        };
        m["p_over_k"] = [](Settings& s, const Json& v) {
            s.p_over_k = as_numbers(v, "p_over_k");
            for (double p : s.p_over_k)
                if (p == 0.0) throw ConfigError("p_over_k", "P = 0 has no unique steady state");
        };
        m["k_dt"] = [](Settings& s, const Json& v) {
            s.k_dt = as_numbers(v, "k_dt");
            for (double x : s.k_dt)
                if (!(x > 0.0)) throw ConfigError("k_dt", "window strengths must be positive");
        };
        m["windows_us"] = [](Settings& s, const Json& v) {
            s.windows_us = as_numbers(v, "windows_us");
            for (double x : s.windows_us)
                if (!(x > 0.0)) throw ConfigError("windows_us", "windows must be positive");
        };
        m["slice_steps"] = [](Settings& s, const Json& v) {
            if (!v.is_array()) throw ConfigError("slice_steps", "expected an array of step indices");
            s.slice_steps.clear();
            for (const auto& x : v) s.slice_steps.push_back(as_count(x, "slice_steps"));
        };
        m["time_convention"] = [](Settings& s, const Json& v) {
            s.time_convention = as_string(v, "time_convention", {"angular", "microseconds"});
        };
        m["t1_us"] = [](Settings& s, const Json& v) { s.t1_us = as_pair(v, "t1_us"); };
        m["tphi_us"] = [](Settings& s, const Json& v) { s.tphi_us = as_pair(v, "tphi_us"); };
        m["delay_us"] = [](Settings& s, const Json& v) { s.delay_us = as_non_negative(v, "delay_us"); };
        m["bandwidth_2pi_mhz"] = [](Settings& s, const Json& v) {
            s.bandwidth_2pi_mhz = as_non_negative(v, "bandwidth_2pi_mhz");
        };
        m["post_select_window_us"] = [](Settings& s, const Json& v) {
            s.post_select_window_us = as_non_negative(v, "post_select_window_us");
        };
        m["keep_fraction"] = [](Settings& s, const Json& v) {
            const double x = as_number(v, "keep_fraction");
            if (!(x > 0.0 && x <= 1.0)) throw ConfigError("keep_fraction", "out of range (0, 1]");
            s.keep_fraction = x;
        };
        m["record_every"] = [](Settings& s, const Json& v) { s.record_every = as_count(v, "record_every", 1); };
        m["n_steps"] = [](Settings& s, const Json& v) { s.n_steps = as_count(v, "n_steps", 2); };
        m["restarts"] = [](Settings& s, const Json& v) { s.restarts = static_cast<int>(as_count(v, "restarts", 1)); };
        m["max_iterations"] = [](Settings& s, const Json& v) {
            s.max_iterations = static_cast<int>(as_count(v, "max_iterations"));
        };
        m["gradient_nodes"] = [](Settings& s, const Json& v) {
            s.gradient_nodes = static_cast<int>(as_count(v, "gradient_nodes", 3));
        };
        m["large_step_us"] = [](Settings& s, const Json& v) { s.large_step_us = as_non_negative(v, "large_step_us"); };
        m["benchmark_traj"] = [](Settings& s, const Json& v) { s.benchmark_traj = as_count(v, "benchmark_traj"); };
        m["bins"] = [](Settings& s, const Json& v) { s.bins = as_count(v, "bins", 2); };
        m["voltage_points"] = [](Settings& s, const Json& v) {
            s.voltage_points = static_cast<int>(as_count(v, "voltage_points", 3));
        };
        m["burn_in"] = [](Settings& s, const Json& v) { s.burn_in = as_count(v, "burn_in"); };
        m["compare_no_feedback"] = [](Settings& s, const Json& v) {
            if (!v.is_boolean()) throw ConfigError("compare_no_feedback", "expected true or false");
            s.compare_no_feedback = v.get<bool>();
        };
        m["write_records"] = [](Settings& s, const Json& v) {
            if (!v.is_boolean()) throw ConfigError("write_records", "expected true or false");
            s.write_records = v.get<bool>();
        };
        return m;
    }();
    return table;
}

}  // namespace detail

// Parses `text` (JSON, comments allowed) and applies `overrides` on top.
inline Json parse_config_text(const std::string& text, const std::string& origin) {
    Json doc;
    try {
        doc = Json::parse(text, nullptr, true, true);
    } catch (const Json::parse_error& e) {
        throw ConfigError("", origin + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("", origin + ": top level must be an object of key/value pairs");
    return doc;
}

inline Json read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

// "key=value"; the value is read as JSON when it parses, else as a string.
inline std::pair<std::string, Json> parse_override(const std::string& item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("", "override '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq);
    const std::string raw = item.substr(eq + 1);
    Json value = Json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    return {key, value};
}

inline Settings settings_from_json(const Json& doc) {
    Settings s;
    const auto& table = detail::setters();
    for (const auto& [key, value] : doc.items()) {
        const auto it = table.find(key);
        if (it == table.end()) throw ConfigError(key, "unknown key");
        it->second(s, value);
    }
    if (!doc.contains("k_2pi_mhz")) throw ConfigError("k_2pi_mhz", "missing required key");
    if (s.bandwidth_2pi_mhz > 0.0 && s.dt() > s.tau() / 10.0) {
        throw ConfigError("dt_us", "must be at most tau / 10 = " + std::to_string(s.tau() / 10.0) + " us");
    }
    if (s.delay_us > 0.0 && s.dt() > s.delay_us) throw ConfigError("dt_us", "must not exceed delay_us");
    s.decoherence();  // range checks happen in the setters
    return s;
}

inline Settings load_settings(const std::string& path, const std::vector<std::string>& overrides = {}) {
    // Without a file the built-in desk defaults apply; a file must name k itself.
    Json doc = path.empty() ? Json{{"k_2pi_mhz", 1.0}} : read_config_file(path);
    for (const auto& item : overrides) {
        auto [key, value] = parse_override(item);
        doc[key] = value;
    }
    return settings_from_json(doc);
}

// Every setting after defaults and unit conversions, for sidecars and
// `validate`.
inline Json resolved_json(const Settings& s) {
    Json j;
    j["scenario"] = s.scenario;
    j["k_2pi_mhz"] = s.k_2pi_mhz;
    j["k_rad_per_us"] = s.k();
    j["eta"] = s.eta;
    j["duration_us"] = s.duration_us;
    j["dt_us"] = s.dt();
    j["horizon_us"] = s.horizon_us;
    j["rounds"] = s.rounds;
    j["n_traj"] = s.n_traj;
    j["seed"] = s.seed;
    j["workers"] = s.workers;
    j["initial"] = s.initial;
    j["protocol"] = s.protocol;
    j["thresholds"] = s.thresholds;
    j["etas"] = s.etas;
    j["p_over_k"] = s.p_over_k;
    j["k_dt"] = s.k_dt;
    j["windows_us"] = s.windows_us;
    j["slice_steps"] = s.slice_steps;
    j["time_convention"] = s.time_convention;
    if (const auto d = s.decoherence()) {
        j["t1_resolved_us"] = d->t1;
        j["tphi_resolved_us"] = d->tphi;
    } else {
        j["t1_resolved_us"] = nullptr;
        j["tphi_resolved_us"] = nullptr;
    }
    j["delay_us"] = s.delay_us;
    j["bandwidth_2pi_mhz"] = s.bandwidth_2pi_mhz;
    j["tau_us"] = s.tau();
    j["post_select_window_us"] = s.post_select_window_us;
    j["keep_fraction"] = s.keep_fraction;
    j["record_every"] = s.record_every;
    j["n_steps"] = s.n_steps;
    j["restarts"] = s.restarts;
    j["max_iterations"] = s.max_iterations;
    j["gradient_nodes"] = s.gradient_nodes;
    j["large_step_us"] = s.large_step_us;
    j["benchmark_traj"] = s.benchmark_traj;
    j["bins"] = s.bins;
    j["voltage_points"] = s.voltage_points;
    j["burn_in"] = s.burn_in;
    j["compare_no_feedback"] = s.compare_no_feedback;
    j["write_records"] = s.write_records;
    return j;
}

// Shortest round-trip formatting keeps identical runs byte-identical.
inline std::string fmt(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

inline std::string fmt(std::size_t x) { return std::to_string(x); }
inline std::string fmt(int x) { return std::to_string(x); }
inline std::string fmt(const std::string& x) { return x; }
inline std::string fmt(const char* x) { return x; }

class Table {
  public:
    explicit Table(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void meta(const std::string& key, const std::string& value) { meta_.emplace_back(key, value); }

    template <typename... Cells>
    void row(const Cells&... cells) {
        if (sizeof...(cells) != columns_.size()) throw std::logic_error("row width does not match the header");
        rows_.push_back({fmt(cells)...});
    }

    std::size_t size() const { return rows_.size(); }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write " + path.string());
        for (const auto& [k, v] : meta_) out << "# " << k << ": " << v << '\n';
        for (std::size_t i = 0; i < columns_.size(); ++i) out << (i ? "," : "") << columns_[i];
        out << '\n';
        for (const auto& r : rows_) {
            for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
            out << '\n';
        }
    }

  private:
    std::vector<std::string> columns_;
    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------- runners

struct HistogramResult {
    Table table{{"eta", "v_center", "count", "density_mc", "density_exact"}};
};

inline HistogramResult run_histogram(const Settings& s) {
    HistogramResult out;
    const TwoQubitState rho = s.initial_state();
    double widest = 0.0;
    for (double eta : s.etas) widest = std::max(widest, outcome_range({s.k(), eta, s.duration_us}, 6.0));
    const double width = 2.0 * widest / static_cast<double>(s.bins);
    for (std::size_t e = 0; e < s.etas.size(); ++e) {
        const MeasurementConfig m{s.k(), s.etas[e], s.duration_us};
        std::vector<std::size_t> counts(s.bins, 0);
        for (std::size_t i = 0; i < s.n_traj; ++i) {
            const TrajectoryStream st(s.seed, e * s.n_traj + i);
            const double v = sample_outcome(rho, m, st.uniform_at(0), st.normal_at(0));
            const double pos = std::floor((v + widest) / width);
            if (pos >= 0.0 && pos < static_cast<double>(s.bins)) ++counts[static_cast<std::size_t>(pos)];
        }
        for (std::size_t b = 0; b < s.bins; ++b) {
            const double v = -widest + (static_cast<double>(b) + 0.5) * width;
            out.table.row(m.eta, v, counts[b], static_cast<double>(counts[b]) / (static_cast<double>(s.n_traj) * width),
                          outcome_density(rho, v, m));
        }
    }
    out.table.meta("subcommand", "histogram");
    out.table.meta("initial", s.initial);
    out.table.meta("duration_us", fmt(s.duration_us));
    out.table.meta("samples_per_eta", fmt(s.n_traj));
    return out;
}

struct SemiclassicalResult {
    Table table{{"rule", "v_threshold", "step", "t_us", "fidelity", "threshold_used"}};
    std::vector<std::pair<std::string, AverageRun>> runs;
};

inline SemiclassicalResult run_semiclassical(const Settings& s) {
    SemiclassicalResult out;
    const MeasurementConfig m = s.measurement(s.duration_us);
    const TwoQubitState initial = s.initial_state();
    out.runs.emplace_back("optimal", run_average_protocol(initial, SemiclassicalThreshold{}, m, s.rounds));
    for (double vt : s.thresholds) {
        out.runs.emplace_back("fixed", run_average_protocol(initial, SemiclassicalThreshold{{vt}}, m, s.rounds));
        out.table.meta("steady_state[v_threshold=" + fmt(vt) + "]", fmt(steady_state_fidelity_threshold(vt, m)));
    }
    std::size_t fixed = 0;
    for (const auto& [rule, run] : out.runs) {
        const double vt = rule == "fixed" ? s.thresholds[fixed++] : std::numeric_limits<double>::quiet_NaN();
        for (std::size_t n = 0; n < run.times.size(); ++n) {
            const double used = rule == "fixed" && n > 0 ? vt : run.threshold[n];
            out.table.row(rule, vt, n, run.times[n], run.fidelity[n], used);
        }
    }
    out.table.meta("subcommand", "semiclassical");
    out.table.meta("initial", s.initial);
    out.table.meta("steady_state_formula",
                   "1 - 4 erfc(V/s) / (erfc((V+1)/s) + 4 erfc(V/s) + erfc((V-1)/s)), s = 1/sqrt(4 eta k dt)");
    return out;
}

struct QuantumDiscreteResult {
    Table fidelity{{"window_us", "rule", "step", "t_us", "fidelity"}};
    Table theta{{"window_us", "step", "t_us", "v", "theta"}};
};

inline QuantumDiscreteResult run_quantum_discrete(const Settings& s) {
    if (s.windows_us.empty()) throw ConfigError("windows_us", "needs at least one window");
    QuantumDiscreteResult out;
    const TwoQubitState initial = s.initial_state();
    for (double w : s.windows_us) {
        const MeasurementConfig m = s.measurement(w);
        const std::size_t steps = s.steps_for(w);
        const std::pair<const char*, ProtocolSpec> rules[] = {{"quantum", HybridSchedule{}},
                                                              {"semiclassical", SemiclassicalThreshold{}}};
        for (const auto& [name, rule] : rules) {
            const AverageRun run = run_average_protocol(initial, rule, m, steps);
            for (std::size_t n = 0; n < run.times.size(); ++n) out.fidelity.row(w, name, n, run.times[n], run.fidelity[n]);
        }
    }
    std::size_t last = 0;
    for (std::size_t st : s.slice_steps) last = std::max(last, st);
    const double w0 = s.windows_us.front();
    const FeedbackTable table =
        build_feedback_table(initial, HybridSchedule{}, s.measurement(w0), last + 1, s.voltage_points);
    for (std::size_t st : s.slice_steps) {
        for (std::size_t i = 0; i < table.voltages.size(); ++i) {
            out.theta.row(w0, st, table.times[st], table.voltages[i], table.theta[st][i]);
        }
    }
    out.fidelity.meta("subcommand", "quantum-discrete");
    out.fidelity.meta("continuous_limit", "1 - (1 - f0) exp(-2 k t) at eta = 1");
    out.theta.meta("subcommand", "quantum-discrete");
    return out;
}

// Exponential model F(t) = F_inf - (F_inf - F0) exp(-g t) fitted by a
// golden-section search over F_inf with a log-linear fit for g.
struct ExponentialFit {
    double f_inf = 0.0;
    double rate = 0.0;
    double max_residual = 0.0;
};

inline ExponentialFit fit_exponential(const std::vector<double>& t, const std::vector<double>& f) {
    const double f0 = f.front();
    const double top = *std::max_element(f.begin(), f.end());
    auto fit_for = [&](double f_inf) {
        ExponentialFit r{f_inf, 0.0, 0.0};
        double num = 0.0;
        double den = 0.0;
        const double gap0 = f_inf - f0;
        for (std::size_t i = 1; i < t.size(); ++i) {
            const double gap = f_inf - f[i];
            if (gap <= 0.0 || gap0 <= 0.0) continue;
            const double y = std::log(gap / gap0);
            num += -y * t[i];
            den += t[i] * t[i];
        }
        r.rate = den > 0.0 ? num / den : 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            r.max_residual = std::max(r.max_residual, std::abs(f_inf - gap0 * std::exp(-r.rate * t[i]) - f[i]));
        }
        return r;
    };
    double lo = top + 1e-12;
    double hi = std::min(1.0, top + 0.25) + 1e-9;
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int it = 0; it < 200; ++it) {
        const double a = hi - g * (hi - lo);
        const double b = lo + g * (hi - lo);
        if (fit_for(a).max_residual < fit_for(b).max_residual) hi = b;
        else lo = a;
    }
    return fit_for(0.5 * (lo + hi));
}

struct ContinuousResult {
    Table table{{"t_us", "fidelity", "coefficient", "analytic_fidelity", "analytic_coefficient"}};
    AverageRun run;
    double max_error = std::numeric_limits<double>::quiet_NaN();  // against the closed form, eta = 1 only
    std::optional<ExponentialFit> fit;                             // eta < 1 only
};

inline ContinuousResult run_continuous(const Settings& s) {
    ContinuousResult out;
    const TwoQubitState initial = s.initial_state();
    const MeasurementConfig m = s.measurement(s.dt());
    const std::size_t steps = s.steps_for(s.dt());
    out.run = run_average_protocol(initial, QuantumProportional{{}, true}, m, steps, {}, s.decoherence());
    const bool closed_form = s.eta == 1.0 && !s.decoherence() && is_01_symmetric(initial, 1e-12) &&
                             std::abs(initial.purity() - 1.0) < 1e-12;
    const double f0 = fidelity_t0(initial);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (closed_form) out.max_error = 0.0;
    for (std::size_t n = 0; n < out.run.times.size(); ++n) {
        const double t = out.run.times[n];
        const AnalyticPoint a = closed_form ? analytic_eta1(t, f0, s.k()) : AnalyticPoint{nan, nan};
        if (closed_form) out.max_error = std::max(out.max_error, std::abs(out.run.fidelity[n] - a.fidelity));
        if (n % s.record_every == 0 || n + 1 == out.run.times.size()) {
            // Row n carries the coefficient used over the following step.
            const double c = n + 1 < out.run.coefficient.size() ? out.run.coefficient[n + 1] : nan;
            out.table.row(t, out.run.fidelity[n], c, a.fidelity, a.coefficient);
        }
    }
    out.table.meta("subcommand", "continuous");
    out.table.meta("initial", s.initial);
    out.table.meta("analytic", "F(t) = 1 - (1 - f0) exp(-2 k t), P(t) = 4k sqrt((1-f0) e^{-2kt} / (1 - (1-f0) e^{-2kt}))");
    out.table.meta("k_rad_per_us", fmt(s.k()));
    if (closed_form) {
        out.table.meta("max_abs_error", fmt(out.max_error));
    } else if (!s.decoherence()) {
        out.fit = fit_exponential(out.run.times, out.run.fidelity);
        out.table.meta("exp_fit_f_inf", fmt(out.fit->f_inf));
        out.table.meta("exp_fit_rate_per_us", fmt(out.fit->rate));
        out.table.meta("exp_fit_max_residual", fmt(out.fit->max_residual));
    }
    return out;
}

struct HybridResult {
    OptimizationResult optimized;
    ScheduleEvaluation optimized_eval;
    ScheduleEvaluation uniform_small;
    std::optional<ScheduleEvaluation> uniform_large;
    std::optional<EnsembleResult> benchmark;
    Table curves{{"curve", "t_us", "fidelity", "sem_fidelity"}};
    Table schedule{{"index", "duration_us", "t_end_us"}};
    Table trace{{"restart", "iteration", "cost", "step_size"}};
};

inline HybridResult run_hybrid(const Settings& s) {
    HybridResult out;
    const MeasurementConfig m = s.measurement(1.0);
    const TwoQubitState initial = s.initial_state();
    const auto deco = s.decoherence();
    OptimizerOptions o;
    o.restarts = s.restarts;
    o.max_iterations = s.max_iterations;
    o.seed = s.seed;
    o.workers = s.workers;
    o.gradient_nodes = s.gradient_nodes;
    o.decoherence = deco;
    o.initial = initial;
    out.optimized = optimize_schedule(s.n_steps, s.horizon_us, m, o);
    out.optimized_eval = evaluate_schedule(out.optimized.schedule, m, deco, initial);
    out.uniform_small = evaluate_schedule(Schedule::uniform(s.n_steps, s.horizon_us), m, deco, initial);
    if (s.large_step_us > 0.0) {
        out.uniform_large = evaluate_schedule(Schedule::uniform(s.steps_for(s.large_step_us), s.horizon_us), m, deco, initial);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto add = [&](const char* name, const ScheduleEvaluation& ev) {
        for (std::size_t n = 0; n < ev.times.size(); ++n) out.curves.row(name, ev.times[n], ev.fidelity[n], nan);
    };
    add("optimized", out.optimized_eval);
    add("uniform_small", out.uniform_small);
    if (out.uniform_large) add("uniform_large", *out.uniform_large);
    if (s.benchmark_traj > 0) {
        EnsembleConfig e;
        e.measurement = m;
        e.dt = s.dt();
        e.steps = s.steps_for(s.dt());
        e.n_traj = s.benchmark_traj;
        e.seed = s.seed;
        e.workers = s.workers;
        e.record_every = s.record_every;
        e.decoherence = deco;
        e.initial = initial;
        out.benchmark = locally_optimal_trajectory(e);
        for (std::size_t n = 0; n < out.benchmark->times.size(); ++n) {
            out.curves.row("locally_optimal", out.benchmark->times[n], out.benchmark->mean_fidelity[n],
                           out.benchmark->sem_fidelity[n]);
        }
    }
    double t = 0.0;
    for (std::size_t i = 0; i < out.optimized.schedule.size(); ++i) {
        t += out.optimized.schedule.durations[i];
        out.schedule.row(i, out.optimized.schedule.durations[i], t);
    }
    for (const auto& r : out.optimized.trace) out.trace.row(r.restart, r.iteration, r.cost, r.step_size);
    out.curves.meta("subcommand", "hybrid-optimize");
    out.curves.meta("descended", out.optimized.descended ? "true" : "false");
    out.curves.meta("optimized_final_fidelity", fmt(out.optimized_eval.final_fidelity));
    out.curves.meta("uniform_small_final_fidelity", fmt(out.uniform_small.final_fidelity));
    if (out.uniform_large) out.curves.meta("uniform_large_final_fidelity", fmt(out.uniform_large->final_fidelity));
    out.schedule.meta("subcommand", "hybrid-optimize");
    out.schedule.meta("t_final_us", fmt(s.horizon_us));
    out.trace.meta("subcommand", "hybrid-optimize");
    return out;
}

struct ExperimentResult {
    EnsembleResult feedback;
    std::optional<EnsembleResult> no_feedback;
    std::optional<PostSelection> feedback_selected;
    std::optional<PostSelection> no_feedback_selected;
    Table curves{{"curve", "t_us", "mean_fidelity", "sem_fidelity", "concurrence", "n_kept"}};
    Table p_schedule{{"t_us", "p"}};
    Table records{{"curve", "traj", "t_us", "fidelity", "concurrence", "signal"}};
};

inline ProtocolSpec experiment_protocol(const Settings& s) {
    if (s.protocol == "none") return NoFeedback{};
    if (s.protocol == "locally_optimal") return LocallyOptimalEstimator{};
    return QuantumProportional{{}, true};
}

inline ExperimentResult run_experiment(const Settings& s) {
    ExperimentResult out;
    EnsembleConfig e;
    e.measurement = s.measurement(s.dt());
    e.dt = s.dt();
    e.steps = s.steps_for(s.dt());
    e.n_traj = s.n_traj;
    e.seed = s.seed;
    e.workers = s.workers;
    e.record_every = s.record_every;
    e.decoherence = s.decoherence();
    e.delay = s.delay_us;
    e.tau = s.tau();
    e.initial = s.initial_state();
    const bool select = s.post_select_window_us > 0.0;
    e.keep_records = select || s.write_records;
    e.keep_states = select;

    out.feedback = run_ensemble(e, experiment_protocol(s));
    if (s.compare_no_feedback) out.no_feedback = run_ensemble(e, NoFeedback{});
    if (select) {
        out.feedback_selected = post_select(out.feedback, s.post_select_window_us, s.keep_fraction);
        if (out.no_feedback) out.no_feedback_selected = post_select(*out.no_feedback, s.post_select_window_us, s.keep_fraction);
    }

    auto add = [&](const char* name, const EnsembleResult& r) {
        for (std::size_t n = 0; n < r.times.size(); ++n) {
            out.curves.row(name, r.times[n], r.mean_fidelity[n], r.sem_fidelity[n], r.concurrence[n], r.n_traj);
        }
    };
    auto add_selected = [&](const char* name, const EnsembleResult& r, const PostSelection& p) {
        for (std::size_t n = 0; n < r.times.size(); ++n) {
            out.curves.row(name, r.times[n], p.mean_fidelity[n], p.sem_fidelity[n], p.concurrence[n], p.kept.size());
        }
    };
    add("feedback", out.feedback);
    if (out.no_feedback) add("no_feedback", *out.no_feedback);
    if (out.feedback_selected) add_selected("feedback_postselected", out.feedback, *out.feedback_selected);
    if (out.no_feedback_selected) add_selected("no_feedback_postselected", *out.no_feedback, *out.no_feedback_selected);
    for (std::size_t n = 0; n < out.feedback.p_schedule.size(); n += s.record_every) {
        out.p_schedule.row(static_cast<double>(n) * e.dt, out.feedback.p_schedule[n]);
    }
    if (s.write_records) {
        auto dump = [&](const char* name, const EnsembleResult& r) {
            for (const auto& rec : r.records) {
                for (std::size_t n = 0; n < r.times.size(); ++n) {
                    out.records.row(name, rec.index, r.times[n], rec.fidelity[n], rec.concurrence[n], rec.signal[n]);
                }
            }
        };
        dump("feedback", out.feedback);
        if (out.no_feedback) dump("no_feedback", *out.no_feedback);
    }
    out.curves.meta("subcommand", "experiment");
    out.curves.meta("protocol", s.protocol);
    out.curves.meta("time_convention", s.time_convention);
    out.curves.meta("post_select_window_us", fmt(s.post_select_window_us));
    out.p_schedule.meta("subcommand", "experiment");
    out.records.meta("subcommand", "experiment");
    return out;
}

struct PovmCheckResult {
    Table table{{"eta", "k_dt", "nodes", "completeness_residual", "composition_residual"}};
    double worst_completeness = 0.0;
    double worst_composition = 0.0;
};

// Completeness: integral of Omega^2 over outcomes on +-(1 + 6 sigma) with
// 200 Gauss-Legendre nodes, doubled until two rules agree to 1e-12.
// Composition: Omega_{V2}(dt) Omega_{V1}(dt) / Omega_{(V1+V2)/2}(2 dt) must be
// the same for every diagonal entry.
inline PovmCheckResult run_povm_check(const Settings& s) {
    PovmCheckResult out;
    for (double eta : s.etas) {
        for (double kdt : s.k_dt) {
            const MeasurementConfig m{s.k(), eta, kdt / s.k()};
            const double half = outcome_range(m, 6.0);
            auto completeness = [&](int nodes) {
                const QuadratureRule r = gauss_legendre_rule(-half, half, nodes);
                Vec4 sum = Vec4::Zero();
                for (std::size_t i = 0; i < r.nodes.size(); ++i) sum += r.weights[i] * povm_operator(r.nodes[i], m).cwiseAbs2();
                return (sum.array() - 1.0).abs().maxCoeff();
            };
            int nodes = 200;
            double residual = completeness(nodes);
            for (int d = 0; d < 4; ++d) {
                const double finer = completeness(2 * nodes);
                const bool settled = std::abs(finer - residual) < 1e-12;
                nodes *= 2;
                residual = finer;
                if (settled) break;
            }
            double comp = 0.0;
            const MeasurementConfig twice = m.with_duration(2.0 * m.duration);
            for (double v1 = -1.5; v1 <= 1.5; v1 += 0.25) {
                for (double v2 = -1.5; v2 <= 1.5; v2 += 0.25) {
                    const Vec4 prod = povm_operator(v2, m).cwiseProduct(povm_operator(v1, m));
                    const Vec4 ratio = prod.cwiseQuotient(povm_operator(0.5 * (v1 + v2), twice));
                    comp = std::max(comp, (ratio.array() / ratio(0) - 1.0).abs().maxCoeff());
                }
            }
            out.worst_completeness = std::max(out.worst_completeness, residual);
            out.worst_composition = std::max(out.worst_composition, comp);
            out.table.row(eta, kdt, nodes, residual, comp);
        }
    }
    out.table.meta("subcommand", "povm-check");
    out.table.meta("max_completeness_residual", fmt(out.worst_completeness));
    out.table.meta("max_composition_residual", fmt(out.worst_composition));
    return out;
}

struct SteadyStateResult {
    Table table{{"kind", "eta", "param", "simulated", "sem", "formula", "deviation"}};
    double worst_fixed_p_rel = 0.0;   // relative error
    double worst_threshold_z = 0.0;   // |MC - formula| / SEM
};

inline SteadyStateResult run_steady_state(const Settings& s) {
    SteadyStateResult out;
    const double k = s.k();
    for (double eta : s.etas) {
        for (double pk : s.p_over_k) {
            const MeasurementConfig m{k, eta, 1.0};
            const SteadyState ss = integrate_to_steady_state(TwoQubitState::psi0(), pk * k, m, 1e-3 / k, 5000.0 / k);
            if (!ss.converged) throw NumericalError("fixed-P integration did not settle by k t = 5000");
            const double sim = fidelity_t0(ss.state);
            const double formula = steady_state_fidelity_fixed_p(pk * k, k, eta);
            const double rel = std::abs(sim - formula) / formula;
            out.worst_fixed_p_rel = std::max(out.worst_fixed_p_rel, rel);
            out.table.row("fixed_p", eta, pk, sim, 0.0, formula, rel);
        }
    }
    const MeasurementConfig window = s.measurement(s.duration_us);
    for (double vt : s.thresholds) {
        DiscreteEnsembleConfig d;
        d.measurement = window;
        d.rounds = s.rounds;
        d.n_traj = s.n_traj;
        d.seed = s.seed;
        d.workers = s.workers;
        d.burn_in = std::min(s.burn_in, s.rounds - 1);
        d.initial = s.initial_state();
        const DiscreteEnsembleResult r = run_discrete_ensemble(d, SemiclassicalThreshold{{vt}});
        const double formula = steady_state_fidelity_threshold(vt, window);
        const double z = r.steady_sem > 0.0 ? std::abs(r.steady_mean - formula) / r.steady_sem
                                            : (r.steady_mean == formula ? 0.0 : std::numeric_limits<double>::infinity());
        out.worst_threshold_z = std::max(out.worst_threshold_z, z);
        out.table.row("threshold", s.eta, vt, r.steady_mean, r.steady_sem, formula, z);
    }
    out.table.meta("subcommand", "steady-state");
    out.table.meta("fixed_p_formula", "(P^2 + 16 k^2 eta (1 + 8 eta)) / (3 P^2 + 16 k^2 eta (3 + 8 eta)); param = P/k; deviation = relative error");
    out.table.meta("threshold_formula", "erfc form; param = V_T; deviation = |MC - formula| / SEM");
    return out;
}

// ---------------------------------------------------------------- driver

struct Output {
    std::filesystem::path dir;
    std::string name;
    Json sidecar;

    void write(const std::string& suffix, const Table& t) {
        const std::string file = name + suffix + ".csv";
        t.write(dir / file);
        sidecar["outputs"].push_back(file);
    }

    void finish() const {
        std::ofstream out(dir / (name + ".json"));
        if (!out) throw Error("cannot write sidecar in " + dir.string());
        out << sidecar.dump(2) << '\n';
    }
};

inline int dispatch(const std::string& command, const Settings& s, const std::filesystem::path& out_dir,
                    std::ostream& log) {
    if (command == "validate") {
        log << resolved_json(s).dump(2) << '\n';
        return kOk;
    }
    std::filesystem::create_directories(out_dir);
    Output out{out_dir, command, Json::object()};
    out.sidecar["subcommand"] = command;
    out.sidecar["seed"] = s.seed;
    out.sidecar["config"] = resolved_json(s);
    out.sidecar["outputs"] = Json::array();
    Json summary = Json::object();
    std::optional<std::string> failure;

    if (command == "histogram") {
        out.write("", run_histogram(s).table);
    } else if (command == "semiclassical") {
        out.write("", run_semiclassical(s).table);
    } else if (command == "quantum-discrete") {
        const auto r = run_quantum_discrete(s);
        out.write("", r.fidelity);
        out.write("_theta", r.theta);
    } else if (command == "continuous") {
        const auto r = run_continuous(s);
        out.write("", r.table);
        summary["final_fidelity"] = r.run.fidelity.back();
        if (!std::isnan(r.max_error)) {
            summary["max_abs_error"] = r.max_error;
            if (r.max_error > 1e-3) failure = "closed-form mismatch " + fmt(r.max_error) + " exceeds 1e-3";
        }
        if (r.fit) summary["exp_fit"] = {{"f_inf", r.fit->f_inf}, {"rate_per_us", r.fit->rate}, {"max_residual", r.fit->max_residual}};
    } else if (command == "hybrid-optimize") {
        const auto r = run_hybrid(s);
        out.write("", r.curves);
        out.write("_schedule", r.schedule);
        out.write("_trace", r.trace);
        summary["optimized_final_fidelity"] = r.optimized_eval.final_fidelity;
        summary["uniform_small_final_fidelity"] = r.uniform_small.final_fidelity;
        if (r.uniform_large) summary["uniform_large_final_fidelity"] = r.uniform_large->final_fidelity;
        summary["descended"] = r.optimized.descended;
        if (!r.optimized.descended) log << "warning: no restart improved on its initial schedule\n";
    } else if (command == "experiment") {
        const auto r = run_experiment(s);
        out.write("", r.curves);
        if (r.p_schedule.size() > 0) out.write("_p", r.p_schedule);
        if (s.write_records) out.write("_records", r.records);
        const auto peak = [](const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); };
        summary["peak_fidelity"] = peak(r.feedback.mean_fidelity);
        summary["peak_concurrence"] = peak(r.feedback.concurrence);
        if (r.feedback_selected) summary["peak_fidelity_postselected"] = peak(r.feedback_selected->mean_fidelity);
        if (r.no_feedback_selected) summary["peak_fidelity_postselected_no_feedback"] = peak(r.no_feedback_selected->mean_fidelity);
    } else if (command == "povm-check") {
        const auto r = run_povm_check(s);
        out.write("", r.table);
        summary["max_completeness_residual"] = r.worst_completeness;
        summary["max_composition_residual"] = r.worst_composition;
        log << "max completeness residual " << fmt(r.worst_completeness) << ", max composition residual "
            << fmt(r.worst_composition) << '\n';
        if (r.worst_completeness >= 1e-8) failure = "POVM completeness residual " + fmt(r.worst_completeness);
        else if (r.worst_composition > 1e-10) failure = "POVM composition residual " + fmt(r.worst_composition);
    } else if (command == "steady-state") {
        const auto r = run_steady_state(s);
        out.write("", r.table);
        summary["worst_fixed_p_relative_error"] = r.worst_fixed_p_rel;
        summary["worst_threshold_z"] = r.worst_threshold_z;
    } else {
        throw ConfigError("", "unknown subcommand " + command);
    }
    out.sidecar["summary"] = summary;
    out.finish();
    for (const auto& f : out.sidecar["outputs"]) log << "wrote " << (out_dir / f.get<std::string>()).string() << '\n';
    if (failure) throw ToleranceError(*failure);
    return kOk;
}

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"histogram", "semiclassical", "quantum-discrete", "continuous",
                                                "hybrid-optimize", "experiment", "povm-check", "steady-state",
                                                "validate"};
    return names;
}

inline int run(int argc, char** argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Remote entanglement by half-parity measurement and local feedback"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config;
    std::string out_dir = "out";
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> traj;
    std::optional<double> eta;
    app.add_option("--config", config, "JSON config file");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--set", sets, "override a config key (key=value, repeatable)");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--traj", traj, "number of trajectories");
    app.add_option("--eta", eta, "measurement efficiency");
    for (const auto& name : subcommands()) app.add_subcommand(name);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, log, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, log, err);
        return kConfigError;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        std::vector<std::string> overrides = sets;
        if (seed) overrides.push_back("seed=" + std::to_string(*seed));
        if (traj) overrides.push_back("n_traj=" + std::to_string(*traj));
        if (eta) overrides.push_back("eta=" + fmt(*eta));
        const Settings s = load_settings(config, overrides);
        return dispatch(command, s, out_dir, log);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const DomainError& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kNumericalError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

}  // namespace entangle::cli
