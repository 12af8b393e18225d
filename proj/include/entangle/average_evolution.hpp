#pragma once

// Deterministic propagation of the outcome-averaged state under measurement
// plus feedback. The feedback for outcome V is chosen from the conditional
// state rho_bar_V, then the rotated conditional states are integrated over V
// with the outcome density. Nothing here is stochastic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <type_traits>
#include <variant>
#include <vector>

#include "entangle/decoherence.hpp"
#include "entangle/error.hpp"
#include "entangle/feedback.hpp"
#include "entangle/measurement.hpp"
#include "entangle/quadrature.hpp"
#include "entangle/state.hpp"

namespace entangle {

struct QuadratureOptions {
    int min_nodes = 801;
    double nodes_per_sigma = 8.0;  // grid spacing at most sigma / nodes_per_sigma; 0 disables
    double range_sigmas = 8.0;     // grid spans [-1 - L sigma, 1 + L sigma]
    bool verify = true;            // re-run with doubled nodes and compare
    double tolerance = 1e-7;
    int max_doublings = 4;
    bool adaptive = true;          // Gauss-Kronrod refinement of every piece to tolerance / 100

    // Cheaper settings for inner loops that evaluate thousands of steps.
    static QuadratureOptions fast() {
        QuadratureOptions o;
        o.min_nodes = 41;
        o.nodes_per_sigma = 4.0;
        o.verify = false;
        o.adaptive = false;
        return o;
    }
};

inline double outcome_range(const MeasurementConfig& cfg, double sigmas) {
    return 1.0 + sigmas * outcome_sigma(cfg);
}

inline int outcome_node_count(const MeasurementConfig& cfg, const QuadratureOptions& opts) {
    int n = opts.min_nodes;
    if (opts.nodes_per_sigma > 0.0) {
        const double width = 2.0 * outcome_range(cfg, opts.range_sigmas);
        const double needed = std::ceil(width / outcome_sigma(cfg) * opts.nodes_per_sigma);
        if (needed > n) n = static_cast<int>(std::min(needed, 2.0e6));
    }
    return n % 2 == 0 ? n + 1 : n;
}

namespace detail {

// theta_opt of a / tr without building a normalized copy.
inline double theta_opt_scaled(const Mat4& a, double tr) {
    const double y = std::sqrt(8.0) * (a(kTMinus, kT0) - a(kT0, kTPlus)) / tr;
    const double x = (3.0 * a(kT0, kT0) + a(kSinglet, kSinglet) + 2.0 * a(kTMinus, kTPlus)) / tr - 1.0;
    return 0.5 * quadrant_atan2(y, x);
}

// Adaptive Gauss-Kronrod (7, 15) for a matrix-valued integrand on [a, b].
template <typename F>
Mat4 gauss_kronrod(F&& f, double a, double b, double tol, int depth) {
    static constexpr double xk[8] = {0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                                     0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                                     0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                                     0.207784955007898467600689403773245, 0.0};
    static constexpr double wk[8] = {0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                                     0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                                     0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                                     0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
    static constexpr double wg[4] = {0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                                     0.381830050505118944950369775488975, 0.417959183673469387755102040816327};
    const double c = 0.5 * (a + b);
    const double h = 0.5 * (b - a);
    Mat4 kronrod = wk[7] * f(c);
    Mat4 gauss = wg[3] * f(c);
    for (int i = 0; i < 7; ++i) {
        const Mat4 sum = f(c - h * xk[i]) + f(c + h * xk[i]);
        kronrod += wk[i] * sum;
        if (i % 2 == 1) gauss += wg[i / 2] * sum;
    }
    kronrod *= h;
    gauss *= h;
    if (depth <= 0 || (kronrod - gauss).cwiseAbs().maxCoeff() <= tol) return kronrod;
    return gauss_kronrod(f, a, c, 0.5 * tol, depth - 1) + gauss_kronrod(f, c, b, 0.5 * tol, depth - 1);
}

// Integral over outcomes of U(theta(V)) A(V) U(theta(V))^T where A(V) is the
// unnormalized conditional state and `angle(v, a, tr)` the rotation. The
// angle may jump (a threshold, or theta_opt switching between +-pi/2), so
// jumps found on the coarse grid are located by bisection and each smooth
// piece is integrated on its own. adaptive_tol > 0 refines each panel with
// Gauss-Kronrod to that absolute tolerance; otherwise fixed panels are used,
// which keeps the result smooth in the window length.
template <typename AngleFn>
Mat4 integrate_feedback(const TwoQubitState& avg, const MeasurementConfig& cfg, int nodes, double range_sigmas,
                        double adaptive_tol, AngleFn&& angle) {
    constexpr double kJump = std::numbers::pi / 8.0;
    const double s = cfg.strength();
    const double norm = std::sqrt(std::sqrt(4.0 * s / std::numbers::pi));
    const double half = outcome_range(cfg, range_sigmas);
    const Mat4 pre = avg.matrix().cwiseProduct(dephasing_factors(cfg.k * (1.0 - cfg.eta) * cfg.duration));

    auto conditional = [&](double v, Mat4& a) {
        const double wp = norm * std::exp(-2.0 * s * (v - 1.0) * (v - 1.0));
        const double w0 = norm * std::exp(-2.0 * s * v * v);
        const double wm = norm * std::exp(-2.0 * s * (v + 1.0) * (v + 1.0));
        const Vec4 w(wp, w0, wm, w0);
        a = pre.cwiseProduct(w * w.transpose());
        return a.trace();
    };
    auto theta_at = [&](double v, Mat4& a) {
        const double tr = conditional(v, a);
        return tr > 0.0 ? angle(v, a, tr) : 0.0;
    };
    auto rotated = [](const Mat4& a, double theta) -> Mat4 {
        if (theta == 0.0) return a;
        const Mat4 u = symmetric_y_rotation(theta);
        return u * a * u.transpose();
    };

    const QuadratureRule coarse = simpson_rule(-half, half, nodes);
    const std::size_t count = coarse.nodes.size();
    std::vector<Mat4> values(count);
    std::vector<double> thetas(count);
    std::vector<double> breaks{-half};
    Mat4 scratch;
    for (std::size_t n = 0; n < count; ++n) {
        thetas[n] = theta_at(coarse.nodes[n], values[n]);
        if (n == 0 || std::abs(thetas[n] - thetas[n - 1]) <= kJump) continue;
        double lo = coarse.nodes[n - 1];
        double hi = coarse.nodes[n];
        double t_lo = thetas[n - 1];
        double t_hi = thetas[n];
        for (int it = 0; it < 64; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (mid <= lo || mid >= hi) break;
            const double t_mid = theta_at(mid, scratch);
            if (std::abs(t_mid - t_lo) >= std::abs(t_hi - t_mid)) {
                hi = mid;
                t_hi = t_mid;
            } else {
                lo = mid;
                t_lo = t_mid;
            }
        }
        breaks.push_back(0.5 * (lo + hi));
    }
    breaks.push_back(half);

    Mat4 acc = Mat4::Zero();
    if (breaks.size() == 2 && adaptive_tol <= 0.0) {
        for (std::size_t n = 0; n < count; ++n) acc.noalias() += coarse.weights[n] * rotated(values[n], thetas[n]);
        return acc;
    }
    // Pieces end at arbitrary points, where Simpson loses its accuracy on
    // Gaussians; Gauss-Legendre panels about eight coarse spacings wide keep it.
    static const QuadratureRule unit = gauss_legendre_rule(-1.0, 1.0, 8);
    const double panel_width = 8.0 * (2.0 * half) / static_cast<double>(count - 1);
    for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
        const double a = breaks[p];
        const double b = breaks[p + 1];
        if (!(b > a)) continue;
        const int panels = std::max(1, static_cast<int>(std::ceil((b - a) / panel_width)));
        const double w = (b - a) / panels;
        for (int q = 0; q < panels; ++q) {
            const double lo = a + q * w;
            if (adaptive_tol > 0.0) {
                auto f = [&](double v) -> Mat4 {
                    Mat4 m;
                    const double theta = theta_at(v, m);
                    return rotated(m, theta);
                };
                acc += gauss_kronrod(f, lo, lo + w, adaptive_tol * w / (2.0 * half), 40);
                continue;
            }
            for (std::size_t n = 0; n < unit.nodes.size(); ++n) {
                const double v = lo + 0.5 * w * (unit.nodes[n] + 1.0);
                const double theta = theta_at(v, scratch);
                acc.noalias() += 0.5 * w * unit.weights[n] * rotated(scratch, theta);
            }
        }
    }
    return acc;
}

}  // namespace detail

// Per-step inputs that a rule may depend on besides the outcome.
struct StepContext {
    std::size_t step = 0;
};

// Measurement window actually used by `rule` at `step`.
inline MeasurementConfig step_config(const ProtocolSpec& rule, const MeasurementConfig& cfg, std::size_t step) {
    if (const auto* h = std::get_if<HybridSchedule>(&rule); h && !h->durations.empty()) {
        if (step >= h->durations.size()) throw DomainError("hybrid schedule shorter than the requested horizon");
        return cfg.with_duration(h->durations[step]);
    }
    return cfg;
}

// Threshold in force at `step` for a semiclassical rule given the average
// state at the start of the step.
inline double semiclassical_threshold(const SemiclassicalThreshold& rule, const TwoQubitState& avg,
                                      const MeasurementConfig& cfg, std::size_t step) {
    return rule.optimal() ? v_threshold_opt(std::clamp(fidelity_t0(avg), 0.0, 1.0), cfg) : rule.at(step);
}

// One measurement window followed by the rule's feedback, averaged over
// outcomes. Throws NumericalError if node doubling changes the result by more
// than opts.tolerance after opts.max_doublings refinements.
inline TwoQubitState average_discrete_step(const TwoQubitState& avg, const ProtocolSpec& rule,
                                           const MeasurementConfig& base_cfg, StepContext ctx = {},
                                           const QuadratureOptions& opts = {}) {
    const MeasurementConfig cfg = step_config(rule, base_cfg, ctx.step);
    cfg.require_observed();

    const double gk_tol = opts.adaptive ? 1e-2 * opts.tolerance : 0.0;
    auto run = [&](int nodes) -> Mat4 {
        return std::visit(
            [&](const auto& r) -> Mat4 {
                using R = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<R, NoFeedback>) {
                    return detail::integrate_feedback(avg, cfg, nodes, opts.range_sigmas, gk_tol, [](double, const Mat4&, double) { return 0.0; });
                } else if constexpr (std::is_same_v<R, SemiclassicalThreshold>) {
                    const double vt = semiclassical_threshold(r, avg, cfg, ctx.step);
                    return detail::integrate_feedback(
                        avg, cfg, nodes, opts.range_sigmas, gk_tol, [vt](double v, const Mat4&, double) { return semiclassical_rule(v, vt); });
                } else if constexpr (std::is_same_v<R, QuantumProportional>) {
                    const double p = r.adaptive ? p_opt_from_avg_state(avg, cfg) : r.at(ctx.step);
                    const double dt = cfg.duration;
                    return detail::integrate_feedback(avg, cfg, nodes, opts.range_sigmas, gk_tol,
                                                      [p, dt](double v, const Mat4&, double) { return p * v * dt; });
                } else if constexpr (std::is_same_v<R, LookupTable>) {
                    return detail::integrate_feedback(avg, cfg, nodes, opts.range_sigmas, gk_tol, [&](double v, const Mat4&, double) {
                        return r.table.lookup(ctx.step, v);
                    });
                } else if constexpr (std::is_same_v<R, HybridSchedule>) {
                    return detail::integrate_feedback(avg, cfg, nodes, opts.range_sigmas, gk_tol, [](double, const Mat4& a, double tr) {
                        return detail::theta_opt_scaled(a, tr);
                    });
                } else {
                    throw DomainError("locally optimal estimation acts on trajectories, not on the average state");
                }
            },
            rule);
    };

    int nodes = outcome_node_count(cfg, opts);
    Mat4 result = run(nodes);
    if (opts.verify) {
        bool converged = false;
        double change = 0.0;
        for (int d = 0; d < opts.max_doublings; ++d) {
            nodes = 2 * nodes - 1;
            const Mat4 finer = run(nodes);
            change = (finer - result).cwiseAbs().maxCoeff();
            result = finer;
            if (change <= opts.tolerance) {
                converged = true;
                break;
            }
        }
        if (!converged) {
            std::ostringstream os;
            os << "outcome quadrature did not converge: node doubling changed the state by " << change;
            throw NumericalError(os.str());
        }
    }
    const double mass = result.trace();
    if (std::abs(mass - 1.0) > 1e-6) {
        std::ostringstream os;
        os.precision(12);
        os << "outcome quadrature lost probability mass (trace " << mass << ")";
        throw NumericalError(os.str());
    }
    TwoQubitState out = TwoQubitState(result).normalized();
    require_physical(out, 1e-9, "average_discrete_step");
    return out;
}

// Averaged Wiseman-Milburn step with a fixed coefficient, midpoint rule.
inline TwoQubitState average_continuous_step(const TwoQubitState& avg, double p, const MeasurementConfig& cfg,
                                             double dt) {
    const Mat4 k1 = wiseman_milburn_drift(avg, p, cfg.k, cfg.eta);
    const TwoQubitState mid(avg.matrix() + 0.5 * dt * k1);
    TwoQubitState out = TwoQubitState(avg.matrix() + dt * wiseman_milburn_drift(mid, p, cfg.k, cfg.eta)).normalized();
    require_physical(out, 1e-6, "average_continuous_step");
    return out;
}

struct SteadyState {
    TwoQubitState state;
    double time = 0.0;   // us integrated
    bool converged = false;
};

// Integrates the averaged fixed-P equation until the fidelity moves by less
// than `tol` over one relaxation window of 1/k, or until max_time.
inline SteadyState integrate_to_steady_state(const TwoQubitState& initial, double p, const MeasurementConfig& cfg,
                                             double dt, double max_time, double tol = 1e-12) {
    cfg.require_observed();
    if (!(dt > 0.0) || !(max_time > dt)) throw DomainError("steady-state integration needs 0 < dt < max_time");
    const auto per_window = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(1.0 / (cfg.k * dt))));
    SteadyState out{initial, 0.0, false};
    while (out.time < max_time) {
        const double before = fidelity_t0(out.state);
        for (std::size_t n = 0; n < per_window; ++n) out.state = average_continuous_step(out.state, p, cfg, dt);
        out.time += static_cast<double>(per_window) * dt;
        if (std::abs(fidelity_t0(out.state) - before) < tol) {
            out.converged = true;
            break;
        }
    }
    return out;
}

// Continuous-time average-sense optimal protocol: P is re-derived from the
// average state at both midpoint stages. Returns the coefficient used at the
// start of the step alongside the new state.
struct AsloContinuousStep {
    TwoQubitState state;
    double coefficient;
};

inline AsloContinuousStep average_continuous_aslo_step(const TwoQubitState& avg, const MeasurementConfig& cfg,
                                                       double dt) {
    const double p0 = p_opt_from_avg_state(avg, cfg);
    const Mat4 k1 = wiseman_milburn_drift(avg, p0, cfg.k, cfg.eta);
    const TwoQubitState mid(avg.matrix() + 0.5 * dt * k1);
    const double pm = p_opt_from_avg_state(mid, cfg);
    TwoQubitState out = TwoQubitState(avg.matrix() + dt * wiseman_milburn_drift(mid, pm, cfg.k, cfg.eta)).normalized();
    require_physical(out, 1e-6, "average_continuous_aslo_step");
    return {out, p0};
}

// Tabulates theta(V) per step while propagating the average state with the
// same rule. The voltage grid spans [-(1 + 6 sigma), 1 + 6 sigma].
inline FeedbackTable build_feedback_table(const TwoQubitState& initial, const ProtocolSpec& rule,
                                          const MeasurementConfig& cfg, std::size_t horizon, int voltage_points = 801,
                                          const QuadratureOptions& opts = {}) {
    if (!is_01_symmetric(initial, 1e-9)) throw DomainError("feedback tables are built from 01-symmetric states");
    if (voltage_points < 3) throw DomainError("feedback table needs at least 3 voltage points");
    FeedbackTable table;
    TwoQubitState avg = initial;
    double t = 0.0;
    for (std::size_t step = 0; step < horizon; ++step) {
        const MeasurementConfig c = step_config(rule, cfg, step);
        const double half = outcome_range(c, 6.0);
        if (step == 0) {
            table.voltages.resize(voltage_points);
            for (int i = 0; i < voltage_points; ++i) {
                table.voltages[i] = -half + 2.0 * half * i / (voltage_points - 1);
            }
        }
        std::vector<double> row(voltage_points);
        const double vt = std::holds_alternative<SemiclassicalThreshold>(rule)
                              ? semiclassical_threshold(std::get<SemiclassicalThreshold>(rule), avg, c, step)
                              : 0.0;
        for (int i = 0; i < voltage_points; ++i) {
            const double v = table.voltages[i];
            if (std::holds_alternative<SemiclassicalThreshold>(rule)) {
                row[i] = semiclassical_rule(v, vt);
            } else {
                const double log_shift = 4.0 * c.strength() * std::min({(v - 1) * (v - 1), v * v, (v + 1) * (v + 1)});
                const Mat4 a = unnormalized_update(avg, v, c, log_shift);
                row[i] = detail::theta_opt_scaled(a, a.trace());
            }
        }
        table.theta.push_back(std::move(row));
        table.times.push_back(t);
        avg = average_discrete_step(avg, rule, cfg, {step}, opts);
        t += c.duration;
    }
    return table;
}

struct AverageRun {
    std::vector<double> times;         // us; entry 0 is the initial state
    std::vector<double> fidelity;
    std::vector<double> threshold;     // semiclassical threshold used in the step ending here (NaN otherwise)
    std::vector<double> coefficient;   // proportional coefficient used in the step ending here (NaN otherwise)
    TwoQubitState final_state;
};

// Runs `steps` windows of the rule starting from `initial`. Proportional
// rules integrate the averaged continuous equation with dt = cfg.duration;
// every other rule uses discrete windows. Decoherence, when given, acts over
// each window before the measurement.
inline AverageRun run_average_protocol(const TwoQubitState& initial, const ProtocolSpec& protocol,
                                       const MeasurementConfig& cfg, std::size_t steps,
                                       const QuadratureOptions& opts = {},
                                       const std::optional<DecoherenceParams>& decoherence = std::nullopt) {
    cfg.validate();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    AverageRun run;
    run.times.push_back(0.0);
    run.fidelity.push_back(fidelity_t0(initial));
    run.threshold.push_back(nan);
    run.coefficient.push_back(nan);

    TwoQubitState avg = initial;
    double t = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        double threshold = nan;
        double coefficient = nan;
        double dt = cfg.duration;
        if (const auto* qp = std::get_if<QuantumProportional>(&protocol)) {
            if (qp->adaptive) {
                const AsloContinuousStep s = average_continuous_aslo_step(avg, cfg, dt);
                avg = s.state;
                coefficient = s.coefficient;
            } else {
                coefficient = qp->at(step);
                avg = average_continuous_step(avg, coefficient, cfg, dt);
            }
            if (decoherence) avg = lindblad_step(avg, *decoherence, dt);
        } else {
            const MeasurementConfig c = step_config(protocol, cfg, step);
            dt = c.duration;
            if (decoherence) avg = lindblad_step(avg, *decoherence, dt);
            if (const auto* sc = std::get_if<SemiclassicalThreshold>(&protocol)) {
                threshold = semiclassical_threshold(*sc, avg, c, step);
            }
            avg = average_discrete_step(avg, protocol, cfg, {step}, opts);
        }
        t += dt;
        run.times.push_back(t);
        run.fidelity.push_back(fidelity_t0(avg));
        run.threshold.push_back(threshold);
        run.coefficient.push_back(coefficient);
    }
    run.final_state = avg;
    return run;
}

}  // namespace entangle
