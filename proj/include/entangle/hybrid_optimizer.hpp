#pragma once

// Variable-duration measurement schedules: evaluation of the final fidelity
// under theta_opt feedback and projected gradient descent over the durations
// with their sum held fixed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include "entangle/average_evolution.hpp"
#include "entangle/decoherence.hpp"
#include "entangle/error.hpp"
#include "entangle/feedback.hpp"
#include "entangle/measurement.hpp"
#include "entangle/parallel.hpp"
#include "entangle/rng.hpp"
#include "entangle/state.hpp"

namespace entangle {

struct Schedule {
    std::vector<double> durations;  // us

    std::size_t size() const { return durations.size(); }

    double total() const {
        // Neumaier summation; the constraint is checked at 1e-9.
        double sum = 0.0;
        double c = 0.0;
        for (double d : durations) {
            const double t = sum + d;
            c += std::abs(sum) >= std::abs(d) ? (sum - t) + d : (d - t) + sum;
            sum = t;
        }
        return sum + c;
    }

    static Schedule uniform(std::size_t n, double t_final) {
        return {std::vector<double>(n, t_final / static_cast<double>(n))};
    }

    void validate(double t_final, double dt_min) const {
        if (durations.empty()) throw DomainError("empty schedule");
        for (double d : durations) {
            if (!(d >= dt_min * (1.0 - 1e-12))) {
                std::ostringstream os;
                os << "schedule step " << d << " below the minimum " << dt_min;
                throw DomainError(os.str());
            }
        }
        if (std::abs(total() - t_final) > 1e-9) {
            std::ostringstream os;
            os << "schedule sums to " << total() << ", expected " << t_final;
            throw DomainError(os.str());
        }
    }
};

struct ScheduleEvaluation {
    double final_fidelity = 0.0;
    std::vector<double> times;     // us; entry 0 is t = 0
    std::vector<double> fidelity;
    TwoQubitState final_state;
};

// One window of the schedule: decoherence over dt (if any), then the averaged
// measurement with theta_opt feedback.
inline TwoQubitState schedule_step(const TwoQubitState& avg, double dt, const MeasurementConfig& cfg,
                                   const std::optional<DecoherenceParams>& decoherence,
                                   const QuadratureOptions& opts) {
    const MeasurementConfig c = cfg.with_duration(dt);
    const TwoQubitState pre = decoherence ? lindblad_step(avg, *decoherence, dt) : avg;
    return average_discrete_step(pre, HybridSchedule{}, c, {}, opts);
}

inline ScheduleEvaluation evaluate_schedule(const Schedule& schedule, const MeasurementConfig& cfg,
                                            const std::optional<DecoherenceParams>& decoherence = std::nullopt,
                                            const TwoQubitState& initial = TwoQubitState::psi0(),
                                            const QuadratureOptions& opts = {}) {
    if (schedule.durations.empty()) throw DomainError("empty schedule");
    ScheduleEvaluation ev;
    TwoQubitState avg = initial;
    double t = 0.0;
    ev.times.push_back(t);
    ev.fidelity.push_back(fidelity_t0(avg));
    for (double dt : schedule.durations) {
        avg = schedule_step(avg, dt, cfg, decoherence, opts);
        t += dt;
        ev.times.push_back(t);
        ev.fidelity.push_back(fidelity_t0(avg));
    }
    ev.final_fidelity = fidelity_t0(avg);
    ev.final_state = avg;
    return ev;
}

// Euclidean projection onto {x_i >= lower, sum x_i = total}.
inline std::vector<double> project_to_simplex(const std::vector<double>& v, double total, double lower) {
    const std::size_t n = v.size();
    const double budget = total - lower * static_cast<double>(n);
    if (n == 0 || budget < 0.0) throw DomainError("simplex is empty: total below n * lower bound");
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = v[i] - lower;
    std::vector<double> sorted = y;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double cumsum = 0.0;
    double shift = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        cumsum += sorted[j];
        const double candidate = (cumsum - budget) / static_cast<double>(j + 1);
        if (sorted[j] - candidate > 0.0) shift = candidate;
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = lower + std::max(0.0, y[i] - shift);
    // Put the rounding residue on the largest entry so the sum is exact to ~1 ulp.
    double sum = 0.0;
    for (double x : out) sum += x;
    auto big = std::max_element(out.begin(), out.end());
    *big += total - sum;
    return out;
}

struct OptimizerOptions {
    double dt_min = 0.0;           // us; <= 0 means 1e-4 / k
    double fd_fraction = 1e-4;     // central-difference step as a fraction of t_final / n
    int max_halvings = 30;
    double improvement_tol = 1e-8;
    int patience = 5;              // consecutive small improvements before stopping
    int max_iterations = 200;
    int restarts = 5;
    std::uint64_t seed = 1;
    unsigned workers = 0;          // 0 means hardware concurrency
    int gradient_nodes = 61;       // fixed Simpson nodes per step inside the optimizer
    std::optional<DecoherenceParams> decoherence;
    TwoQubitState initial = TwoQubitState::psi0();
};

struct OptimizerTraceRow {
    int restart;
    int iteration;
    double cost;
    double step_size;
};

struct OptimizationResult {
    Schedule schedule;
    double cost = 1.0;               // 1 - F(T_final) under the optimizer's quadrature
    double final_fidelity = 0.0;     // re-evaluated with the default quadrature
    bool descended = false;          // false: no restart improved on its initial schedule
    std::vector<double> restart_costs;
    std::vector<OptimizerTraceRow> trace;
};

namespace detail {

inline QuadratureOptions fixed_nodes(int nodes) {
    QuadratureOptions o;
    o.min_nodes = nodes;
    o.nodes_per_sigma = 2.0;  // long windows still get a usable grid
    o.verify = false;
    o.adaptive = false;
    return o;
}

class ScheduleCost {
  public:
    ScheduleCost(const MeasurementConfig& cfg, const OptimizerOptions& opts)
        : cfg_(cfg), opts_(opts), quad_(fixed_nodes(opts.gradient_nodes)) {}

    // Cost and the state before every step.
    double evaluate(const std::vector<double>& x, std::vector<TwoQubitState>* prefix = nullptr) const {
        TwoQubitState avg = opts_.initial;
        if (prefix) prefix->assign(1, avg);
        for (double dt : x) {
            avg = schedule_step(avg, dt, cfg_, opts_.decoherence, quad_);
            if (prefix) prefix->push_back(avg);
        }
        return 1.0 - fidelity_t0(avg);
    }

    double tail(const std::vector<double>& x, std::size_t from, const TwoQubitState& start, double replaced) const {
        TwoQubitState avg = schedule_step(start, replaced, cfg_, opts_.decoherence, quad_);
        for (std::size_t i = from + 1; i < x.size(); ++i) avg = schedule_step(avg, x[i], cfg_, opts_.decoherence, quad_);
        return 1.0 - fidelity_t0(avg);
    }

    std::vector<double> gradient(const std::vector<double>& x, const std::vector<TwoQubitState>& prefix, double h,
                                 unsigned workers) const {
        std::vector<double> g(x.size());
        parallel_for(x.size(), workers, [&](std::size_t i) {
            const double lo = std::max(x[i] - h, 0.5 * x[i]);
            const double hi = x[i] + h;
            g[i] = (tail(x, i, prefix[i], hi) - tail(x, i, prefix[i], lo)) / (hi - lo);
        });
        return g;
    }

  private:
    MeasurementConfig cfg_;
    OptimizerOptions opts_;
    QuadratureOptions quad_;
};

}  // namespace detail

// Restart initializations: uniform, front-loaded (long steps first),
// back-loaded (long steps last), and Dirichlet(1) draws from the seed.
inline std::vector<Schedule> initial_schedules(std::size_t n, double t_final, double dt_min, int count,
                                               std::uint64_t seed) {
    std::vector<Schedule> out;
    const double ramp = 3.0;
    for (int r = 0; r < count; ++r) {
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double u = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
            switch (r) {
                case 0: w[i] = 1.0; break;
                case 1: w[i] = std::exp(ramp * (1.0 - u)); break;
                case 2: w[i] = std::exp(ramp * u); break;
                default: w[i] = -std::log(counter_uniform(seed, static_cast<std::uint64_t>(r), i, 0)); break;
            }
        }
        const double sum = std::accumulate(w.begin(), w.end(), 0.0);
        for (double& v : w) v *= t_final / sum;
        out.push_back({project_to_simplex(w, t_final, dt_min)});
    }
    return out;
}

inline OptimizationResult optimize_schedule(std::size_t n, double t_final, const MeasurementConfig& cfg,
                                            OptimizerOptions opts = {}) {
    cfg.require_observed();
    if (n < 2) throw DomainError("schedule optimization needs at least 2 steps");
    if (opts.dt_min <= 0.0) opts.dt_min = 1e-4 / cfg.k;
    if (!(t_final > static_cast<double>(n) * opts.dt_min)) {
        throw DomainError("t_final must exceed n * dt_min");
    }
    if (opts.restarts < 1) throw DomainError("need at least one restart");
    const unsigned workers = detail::worker_count(opts.workers);
    const detail::ScheduleCost cost_fn(cfg, opts);
    const double h = opts.fd_fraction * t_final / static_cast<double>(n);

    OptimizationResult result;
    result.cost = std::numeric_limits<double>::infinity();
    const auto starts = initial_schedules(n, t_final, opts.dt_min, opts.restarts, opts.seed);
    for (int r = 0; r < opts.restarts; ++r) {
        std::vector<double> x = starts[r].durations;
        std::vector<TwoQubitState> prefix;
        double cost = cost_fn.evaluate(x, &prefix);
        const double start_cost = cost;
        result.trace.push_back({r, 0, cost, 0.0});
        double step = 0.0;
        int quiet = 0;
        std::vector<double> prev_x;
        std::vector<double> prev_g;
        for (int it = 1; it <= opts.max_iterations; ++it) {
            const std::vector<double> g = cost_fn.gradient(x, prefix, h, workers);
            double gmax = 0.0;
            for (double v : g) gmax = std::max(gmax, std::abs(v));
            if (gmax == 0.0) break;
            // Trial step: Barzilai-Borwein from the last move when it is
            // informative, else twice the last accepted step. The first trial
            // moves the most sensitive duration by its mean length.
            double alpha = step == 0.0 ? (t_final / static_cast<double>(n)) / gmax : 2.0 * step;
            if (!prev_x.empty()) {
                double ss = 0.0;
                double sy = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double si = x[i] - prev_x[i];
                    ss += si * si;
                    sy += si * (g[i] - prev_g[i]);
                }
                if (sy > 0.0 && ss > 0.0) alpha = ss / sy;
            }
            bool accepted = false;
            std::vector<double> trial;
            double trial_cost = cost;
            for (int halving = 0; halving <= opts.max_halvings; ++halving, alpha *= 0.5) {
                std::vector<double> moved(n);
                for (std::size_t i = 0; i < n; ++i) moved[i] = x[i] - alpha * g[i];
                trial = project_to_simplex(moved, t_final, opts.dt_min);
                trial_cost = cost_fn.evaluate(trial);
                if (trial_cost < cost) {
                    accepted = true;
                    break;
                }
            }
            if (!accepted) break;
            const double gain = cost - trial_cost;
            step = alpha;
            prev_x = std::move(x);
            prev_g = g;
            x = std::move(trial);
            cost = cost_fn.evaluate(x, &prefix);
            result.trace.push_back({r, it, cost, alpha});
            quiet = gain < opts.improvement_tol ? quiet + 1 : 0;
            if (quiet >= opts.patience) break;
        }
        if (cost < start_cost) result.descended = true;
        result.restart_costs.push_back(cost);
        if (cost < result.cost) {
            result.cost = cost;
            result.schedule.durations = x;
        }
    }
    result.schedule.validate(t_final, opts.dt_min);
    result.final_fidelity =
        evaluate_schedule(result.schedule, cfg, opts.decoherence, opts.initial, QuadratureOptions::fast())
            .final_fidelity;
    return result;
}

}  // namespace entangle
