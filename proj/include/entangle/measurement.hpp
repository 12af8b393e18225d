#pragma once

// Finite-duration Gaussian POVM for the half-parity observable and the
// stochastic updates built on it.
//
// Voltage convention: dV = <X> dt + dW / sqrt(8 eta k) has units of time and
// dV/dt is the dimensionless outcome. For an X eigenstate the averaged outcome
// over a window dt is Gaussian with standard deviation 1/sqrt(8 eta k dt).

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <utility>

#include "entangle/error.hpp"
#include "entangle/state.hpp"

namespace entangle {

struct MeasurementConfig {
    double k = 2.0 * std::numbers::pi;  // angular measurement rate, rad/us
    double eta = 1.0;                   // detection efficiency
    double duration = 1.0;              // step length (discrete window or integrator dt), us

    void validate() const {
        std::ostringstream os;
        if (!(k > 0.0) || !std::isfinite(k)) os << "measurement rate k must be positive (got " << k << ")";
        else if (!(eta >= 0.0 && eta <= 1.0)) os << "efficiency eta must lie in [0, 1] (got " << eta << ")";
        else if (!(duration > 0.0) || !std::isfinite(duration)) os << "duration must be positive (got " << duration << ")";
        if (!os.str().empty()) throw DomainError(os.str());
    }

    void require_observed() const {
        validate();
        if (eta <= 0.0) throw DomainError("an observed outcome needs eta > 0");
    }

    MeasurementConfig with_duration(double dt) const { return {k, eta, dt}; }
    double strength() const { return eta * k * duration; }
};

// Standard deviation of the outcome for an X eigenstate: the POVM width.
inline double outcome_sigma(const MeasurementConfig& cfg) {
    return 1.0 / std::sqrt(8.0 * cfg.eta * cfg.k * cfg.duration);
}

// The width used inside erfc arguments, 1/sqrt(4 eta k dt) = sqrt2 * outcome_sigma.
// P(G > a) = erfc(a / erfc_sigma) / 2 for G ~ N(0, outcome_sigma^2).
inline double erfc_sigma(const MeasurementConfig& cfg) {
    return 1.0 / std::sqrt(4.0 * cfg.eta * cfg.k * cfg.duration);
}

// Diagonal of Omega_{dv, eta}: (4 eta k dt / pi)^(1/4) exp[-2 eta k dt (dv - x_i)^2].
inline Vec4 povm_operator(double dv, const MeasurementConfig& cfg) {
    cfg.require_observed();
    const double s = cfg.strength();
    const double norm = std::pow(4.0 * s / std::numbers::pi, 0.25);
    Vec4 d;
    for (int i = 0; i < 4; ++i) {
        const double r = dv - kXEigenvalues[i];
        d(i) = norm * std::exp(-2.0 * s * r * r);
    }
    return d;
}

// Tr[Omega rho Omega^T] as a density in dv.
inline double outcome_density(const TwoQubitState& rho, double dv, const MeasurementConfig& cfg) {
    const Vec4 w = povm_operator(dv, cfg);
    double p = 0.0;
    for (int i = 0; i < 4; ++i) p += rho(i, i) * w(i) * w(i);
    return std::max(0.0, p);
}

// Element-wise factor exp[-c (x_i - x_j)^2] on the off-diagonals.
inline Mat4 dephasing_factors(double c) {
    Mat4 f;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const double d = kXEigenvalues[i] - kXEigenvalues[j];
            f(i, j) = std::exp(-c * d * d);
        }
    }
    return f;
}

// Outcome-averaged measurement: coherences decay by exp[-k dt (x_i - x_j)^2]
// regardless of efficiency.
inline TwoQubitState dephase(const TwoQubitState& rho, const MeasurementConfig& cfg) {
    cfg.validate();
    return TwoQubitState(rho.matrix().cwiseProduct(dephasing_factors(cfg.k * cfg.duration)));
}

// Unnormalized post-measurement matrix for outcome dv: the observed channel
// Omega rho Omega^T followed by the unobserved-channel average, which is
// dephasing at rate k (1 - eta). `scale_log` subtracts a constant from the
// Gaussian exponents so that the relative weights never underflow; the
// normalized state does not depend on it.
inline Mat4 unnormalized_update(const TwoQubitState& rho, double dv, const MeasurementConfig& cfg,
                                double scale_log = 0.0) {
    const double s = cfg.strength();
    Vec4 w;
    for (int i = 0; i < 4; ++i) {
        const double r = dv - kXEigenvalues[i];
        w(i) = std::exp(-2.0 * s * r * r + 0.5 * scale_log);
    }
    const Mat4 lost = dephasing_factors(cfg.k * (1.0 - cfg.eta) * cfg.duration);
    return rho.matrix().cwiseProduct(w * w.transpose()).cwiseProduct(lost);
}

// Conditional state after observing outcome dv over cfg.duration.
inline TwoQubitState discrete_update(const TwoQubitState& rho, double dv, const MeasurementConfig& cfg) {
    cfg.require_observed();
    if (!std::isfinite(dv)) throw NumericalError("non-finite measurement outcome");
    if (outcome_density(rho, dv, cfg) < 1e-300) {
        std::ostringstream os;
        os << "outcome dv = " << dv << " has zero probability for this state (impossible record)";
        throw NumericalError(os.str());
    }
    // Shift exponents so the most likely populated branch has weight ~1.
    const double s = cfg.strength();
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 4; ++i) {
        if (rho(i, i) <= 0.0) continue;
        const double r = dv - kXEigenvalues[i];
        best = std::max(best, -4.0 * s * r * r);
    }
    const Mat4 a = unnormalized_update(rho, dv, cfg, -best);
    return TwoQubitState(a).normalized();
}

// Exact sampling from the outcome density: a branch i with probability
// rho_ii, then a Gaussian around x_i. `branch_u` is uniform on (0,1) and
// `gauss` standard normal.
inline double sample_outcome(const TwoQubitState& rho, const MeasurementConfig& cfg, double branch_u, double gauss) {
    cfg.require_observed();
    double acc = 0.0;
    int branch = 3;
    const double tr = rho.trace();
    for (int i = 0; i < 4; ++i) {
        acc += std::max(0.0, rho(i, i)) / tr;
        if (branch_u < acc) {
            branch = i;
            break;
        }
    }
    return kXEigenvalues[branch] + outcome_sigma(cfg) * gauss;
}

template <typename Source>
double sample_outcome(const TwoQubitState& rho, const MeasurementConfig& cfg, Source& rng) {
    const double u = rng.uniform();
    const double z = rng.normal();
    return sample_outcome(rho, cfg, u, z);
}

struct ContinuousStepResult {
    TwoQubitState state;
    double dv;  // voltage increment, units of time
};

// Homodyne increment dV = <X> dt + dW / sqrt(8 eta k).
inline double voltage_increment(const TwoQubitState& rho, const MeasurementConfig& cfg, double dw) {
    return rho.expect_x() * cfg.duration + dw / std::sqrt(8.0 * cfg.eta * cfg.k);
}

// One step of the conditional (stochastic) master equation
//   d rho = D[M] rho dt + H[M] rho sqrt(eta) dW,  M = sqrt(2k) X.
// X commutes with the (zero) Hamiltonian, so the step is integrated exactly:
// the record increment dV is formed from dW and the state, and the finite
// window POVM for dV/dt is applied. This keeps rho positive and, at eta = 1,
// pure; it agrees with the Ito increment `sme_increment` to first order.
inline ContinuousStepResult continuous_step(const TwoQubitState& rho, const MeasurementConfig& cfg, double dw) {
    cfg.require_observed();
    const double dv = voltage_increment(rho, cfg, dw);
    TwoQubitState next = discrete_update(rho, dv / cfg.duration, cfg);
    require_physical(next, 1e-6, "continuous_step");
    return {next, dv};
}

// Literal Ito increment D[M] rho dt + H[M] rho sqrt(eta) dW (no
// renormalization). Reference form for cross-checks; it is traceless but
// does not preserve positivity for finite dW.
inline Mat4 sme_increment(const TwoQubitState& rho, const MeasurementConfig& cfg, double dw) {
    const double mean_x = rho.expect_x();
    const double root = std::sqrt(2.0 * cfg.k);
    Mat4 d;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const double xi = kXEigenvalues[i];
            const double xj = kXEigenvalues[j];
            const double dissipative = -cfg.k * (xi - xj) * (xi - xj) * cfg.duration;
            const double innovation = root * (xi + xj - 2.0 * mean_x) * std::sqrt(cfg.eta) * dw;
            d(i, j) = (dissipative + innovation) * rho(i, j);
        }
    }
    return d;
}

}  // namespace entangle
