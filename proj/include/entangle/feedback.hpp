#pragma once

// Feedback laws: the locally optimal symmetric rotation, the semiclassical
// threshold rule, proportional (direct) feedback and its closed forms, and the
// Wiseman-Milburn feedback step.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <utility>
#include <variant>
#include <vector>

#include "entangle/error.hpp"
#include "entangle/measurement.hpp"
#include "entangle/state.hpp"

namespace entangle {

// Arguments of the optimal-angle arctan: y = sqrt8 (rho_{t-t0} - rho_{t0t+}),
// x = 3 rho_{t0t0} + rho_ss + 2 rho_{t-t+} - 1.
struct RotationDrive {
    double y;
    double x;
};

inline RotationDrive rotation_drive(const TwoQubitState& rho) {
    return {std::sqrt(8.0) * (rho(kTMinus, kT0) - rho(kT0, kTPlus)),
            3.0 * rho(kT0, kT0) + rho(kSinglet, kSinglet) + 2.0 * rho(kTMinus, kTPlus) - 1.0};
}

// Quadrant-aware arctan: y >= 0 with x < 0 maps to +pi (signed zero included),
// and the undefined point (0, 0) maps to 0.
inline double quadrant_atan2(double y, double x) {
    if (y == 0.0) {
        if (x < 0.0) return std::numbers::pi;
        return 0.0;
    }
    return std::atan2(y, x);
}

// Rotation angle maximizing fidelity_after_rotation. Lies in (-pi/2, pi/2].
inline double theta_opt(const TwoQubitState& rho) {
    const RotationDrive d = rotation_drive(rho);
    return 0.5 * quadrant_atan2(d.y, d.x);
}

// Optimal semiclassical threshold for prior t0 population f and window cfg.
// Returns 0 when the arccosh argument is below 1 (always rotate) and +inf
// for f >= 1 (never rotate).
inline double v_threshold_opt(double f, const MeasurementConfig& cfg) {
    cfg.require_observed();
    if (!(f >= 0.0 && f <= 1.0)) throw DomainError("prior fidelity must lie in [0, 1]");
    if (f >= 1.0) return std::numeric_limits<double>::infinity();
    if (f <= 0.0) return 0.0;
    const double s = cfg.strength();
    // log of the arccosh argument; evaluated in log space so large k dt does
    // not overflow the exponential.
    const double log_z = std::log(2.0 * f / (1.0 - f)) + 4.0 * s;
    if (log_z < 0.0) return 0.0;
    double acosh_z;
    if (log_z > 30.0) {
        acosh_z = log_z + std::log(2.0);
    } else {
        acosh_z = std::acosh(std::exp(log_z));
    }
    return acosh_z / (8.0 * s);
}

// +-pi/2 outside the dead band [-v_t, v_t], with the sign of the outcome.
inline double semiclassical_rule(double dv, double v_t) {
    if (std::abs(dv) <= v_t) return 0.0;
    return std::copysign(std::numbers::pi / 2.0, dv);
}

// Long-run fidelity of the fixed-threshold protocol with window cfg.
inline double steady_state_fidelity_threshold(double v_t, const MeasurementConfig& cfg) {
    cfg.require_observed();
    if (!(v_t >= 0.0)) throw DomainError("threshold voltage must be non-negative");
    const double sigma = erfc_sigma(cfg);
    const double core = 4.0 * std::erfc(v_t / sigma);
    const double denom = std::erfc((v_t + 1.0) / sigma) + core + std::erfc((v_t - 1.0) / sigma);
    return 1.0 - core / denom;
}

// Proportionality between feedback angle and dV for the continuous-time
// average-sense optimal protocol.
inline double p_opt_from_avg_state(const TwoQubitState& avg, const MeasurementConfig& cfg) {
    const double denom = rotation_drive(avg).x;
    if (!(denom > 0.0)) {
        std::ostringstream os;
        os << "proportional feedback undefined: 3 rho_t0t0 + rho_ss + 2 rho_t-t+ - 1 = " << denom
           << " <= 0; apply a pi/2 rotation to both qubits first";
        throw DomainError(os.str());
    }
    return 8.0 * std::numbers::sqrt2 * cfg.k * cfg.eta * avg(kTMinus, kT0) / denom;
}

struct AnalyticPoint {
    double fidelity;
    double coefficient;
};

// Closed-form unit-efficiency solution from a pure 01-symmetric start.
inline AnalyticPoint analytic_eta1(double t, double f0, double k) {
    if (!(f0 >= 0.0 && f0 <= 1.0)) throw DomainError("initial fidelity must lie in [0, 1]");
    if (t < 0.0) throw DomainError("time must be non-negative");
    if (f0 == 1.0) return {1.0, 0.0};
    const double decay = std::exp(-2.0 * k * t);
    const double fid = 1.0 - (1.0 - f0) * decay;
    // 4k(1-f0)/sqrt((1-f0)(f0-1+e^{2kt})), rewritten to stay finite at large t.
    const double coeff = 4.0 * k * std::sqrt((1.0 - f0) * decay / (1.0 - (1.0 - f0) * decay));
    return {fid, coeff};
}

inline double steady_state_fidelity_fixed_p(double p, double k, double eta) {
    if (p == 0.0) {
        throw DomainError("fixed-P steady state undefined at P = 0: any state commuting with X is stationary");
    }
    const double p2 = p * p;
    const double kk = 16.0 * k * k * eta;
    return (p2 + kk * (1.0 + 8.0 * eta)) / (3.0 * p2 + kk * (3.0 + 8.0 * eta));
}

// Deterministic part of the Wiseman-Milburn equation with H_F = P (sy1+sy2)/2:
//   D[M] rho + P [K, {M, rho}] / sqrt(8k) + P^2 D[K] rho / (8 k eta),
// where K is the real generator of the symmetric y rotation.
inline Mat4 wiseman_milburn_drift(const TwoQubitState& rho, double p, double k, double eta) {
    const Mat4& r = rho.matrix();
    const Mat4& g = rotation_generator();
    Mat4 out;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const double d = kXEigenvalues[i] - kXEigenvalues[j];
            out(i, j) = -k * d * d * r(i, j);
        }
    }
    if (p != 0.0) {
        const Vec4 x = Vec4(kXEigenvalues[0], kXEigenvalues[1], kXEigenvalues[2], kXEigenvalues[3]);
        const double root = std::sqrt(2.0 * k);
        // {M, rho}_ij = sqrt(2k) (x_i + x_j) rho_ij
        Mat4 anti;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) anti(i, j) = root * (x(i) + x(j)) * r(i, j);
        out += p / std::sqrt(8.0 * k) * (g * anti - anti * g);
        const Mat4 gg = g.transpose() * g;
        out += p * p / (8.0 * k * eta) * (g * r * g.transpose() - 0.5 * (gg * r + r * gg));
    }
    return 0.5 * (out + out.transpose());
}

// Literal Ito increment of the Wiseman-Milburn equation over (dt, dW).
// Reference form: its dW coefficient vanishes on pure 01-symmetric triplet
// states when P is the optimal coefficient.
inline Mat4 wiseman_milburn_increment(const TwoQubitState& rho, double p, const MeasurementConfig& cfg, double dt,
                                      double dw) {
    const MeasurementConfig step = cfg.with_duration(dt);
    Mat4 d = sme_increment(rho, step, dw);
    const Mat4& g = rotation_generator();
    d += p * dw / std::sqrt(8.0 * cfg.eta * cfg.k) * (g * rho.matrix() - rho.matrix() * g);
    Mat4 drift = wiseman_milburn_drift(rho, p, cfg.k, cfg.eta);
    // Measurement dissipator is already inside sme_increment.
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const double dd = kXEigenvalues[i] - kXEigenvalues[j];
            drift(i, j) += cfg.k * dd * dd * rho(i, j);
        }
    }
    return d + drift * dt;
}

struct FeedbackStepResult {
    TwoQubitState state;
    double dv;
};

// One stochastic step of measurement with direct feedback: the measurement
// window is integrated exactly (continuous_step) and the rotation P * dV is
// applied as an exact unitary. Expanding to O(dt) reproduces every term of
// the Wiseman-Milburn equation; the split form stays positive and, at
// eta = 1, pure.
inline FeedbackStepResult wiseman_milburn_step_full(const TwoQubitState& rho, double p, const MeasurementConfig& cfg,
                                                    double dt, double dw) {
    const ContinuousStepResult m = continuous_step(rho, cfg.with_duration(dt), dw);
    return {apply_symmetric_y_rotation(m.state, p * m.dv), m.dv};
}

inline TwoQubitState wiseman_milburn_step(const TwoQubitState& rho, double p, const MeasurementConfig& cfg, double dt,
                                          double dw) {
    return wiseman_milburn_step_full(rho, p, cfg, dt, dw).state;
}

// Tabulated feedback angle theta(V) per step. Voltages are a uniform grid;
// lookups interpolate linearly and clamp outside the grid.
struct FeedbackTable {
    std::vector<double> times;                // us, one per step
    std::vector<double> voltages;             // dimensionless outcome grid
    std::vector<std::vector<double>> theta;   // [step][voltage index]

    std::size_t steps() const { return theta.size(); }

    double lookup(std::size_t step, double v) const {
        if (theta.empty() || voltages.size() < 2) throw DomainError("empty feedback table");
        const auto& row = theta[std::min(step, theta.size() - 1)];
        const double lo = voltages.front();
        const double hi = voltages.back();
        if (v <= lo) return row.front();
        if (v >= hi) return row.back();
        const double pos = (v - lo) / (hi - lo) * static_cast<double>(voltages.size() - 1);
        const auto i = std::min(static_cast<std::size_t>(pos), voltages.size() - 2);
        const double w = pos - static_cast<double>(i);
        return (1.0 - w) * row[i] + w * row[i + 1];
    }
};

// Feedback law choices.
struct NoFeedback {};

// Threshold rule. Empty `thresholds` means the optimal threshold recomputed
// from the current average fidelity each step; one entry is a constant
// threshold; otherwise one entry per step (the last repeats).
struct SemiclassicalThreshold {
    std::vector<double> thresholds;

    bool optimal() const { return thresholds.empty(); }
    double at(std::size_t step) const { return thresholds[std::min(step, thresholds.size() - 1)]; }
};

// Direct feedback theta = P(t) dV. Empty `coefficients` with `adaptive` set
// means P is recomputed from the average state each step.
struct QuantumProportional {
    std::vector<double> coefficients;
    bool adaptive = false;

    double at(std::size_t step) const {
        if (coefficients.empty()) throw DomainError("proportional feedback without coefficients");
        return coefficients[std::min(step, coefficients.size() - 1)];
    }
};

struct LookupTable {
    FeedbackTable table;
};

// Average-sense optimal rule theta_opt(rho_bar_V) with per-step window
// lengths. Empty durations means a fixed window taken from the measurement
// configuration.
struct HybridSchedule {
    std::vector<double> durations;
};

// theta_opt applied to the true conditional state; needs state estimation.
struct LocallyOptimalEstimator {};

using ProtocolSpec = std::variant<NoFeedback, SemiclassicalThreshold, QuantumProportional, LookupTable, HybridSchedule,
                                  LocallyOptimalEstimator>;

}  // namespace entangle
