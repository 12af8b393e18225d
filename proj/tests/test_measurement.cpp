#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "entangle/measurement.hpp"
#include "entangle/rng.hpp"

using namespace entangle;

namespace {

const double kX[4] = {1.0, 0.0, -1.0, 0.0};

// Omega_i(v) for strength s, written out directly.
double kraus(double v, double x, double s) {
    return std::pow(4.0 * s / std::numbers::pi, 0.25) * std::exp(-2.0 * s * (v - x) * (v - x));
}

template <typename F>
double trapezoid(F f, double a, double b, int n) {
    const double h = (b - a) / n;
    double sum = 0.5 * (f(a) + f(b));
    for (int i = 1; i < n; ++i) sum += f(a + i * h);
    return sum * h;
}

TwoQubitState mixed_state() {
    Mat4 m;
    m << 0.20, 0.05, 0.02, 0.01,
         0.05, 0.40, 0.06, -0.03,
         0.02, 0.06, 0.25, 0.02,
         0.01, -0.03, 0.02, 0.15;
    return TwoQubitState(m);
}

}  // namespace

TEST(Measurement, PovmIsCompleteByTrapezoid) {
    for (double eta : {0.2, 1.0}) {
        for (double kdt : {0.1, 1.0, 10.0}) {
            const MeasurementConfig cfg{1.0, eta, kdt};
            const double s = eta * kdt;
            const double half = 1.0 + 12.0 / std::sqrt(8.0 * s);
            for (int i = 0; i < 3; ++i) {
                const double total = trapezoid([&](double v) { return std::pow(kraus(v, kX[i], s), 2); }, -half, half, 20000);
                const double lib = trapezoid([&](double v) { return std::pow(povm_operator(v, cfg)(i), 2); }, -half, half, 20000);
                EXPECT_NEAR(total, 1.0, 1e-10);
                EXPECT_NEAR(lib, 1.0, 1e-10);
            }
        }
    }
}

TEST(Measurement, DensityMomentsMatchState) {
    const TwoQubitState rho = mixed_state();
    const MeasurementConfig cfg{2.0 * std::numbers::pi, 0.6, 0.05};
    const double var0 = 1.0 / (8.0 * cfg.strength());
    EXPECT_NEAR(outcome_sigma(cfg), std::sqrt(var0), 1e-15);
    EXPECT_NEAR(erfc_sigma(cfg), std::sqrt(2.0 * var0), 1e-15);
    const double half = 1.0 + 12.0 * std::sqrt(var0);
    const double m0 = trapezoid([&](double v) { return outcome_density(rho, v, cfg); }, -half, half, 20000);
    const double m1 = trapezoid([&](double v) { return v * outcome_density(rho, v, cfg); }, -half, half, 20000);
    const double m2 = trapezoid([&](double v) { return v * v * outcome_density(rho, v, cfg); }, -half, half, 20000);
    const double ex = rho(0, 0) - rho(2, 2);
    const double ex2 = rho(0, 0) + rho(2, 2);
    EXPECT_NEAR(m0, 1.0, 1e-10);
    EXPECT_NEAR(m1, ex, 1e-10);
    EXPECT_NEAR(m2, ex2 + var0, 1e-10);
}

TEST(Measurement, InefficientUpdateEqualsObservedPlusHiddenMeasurement) {
    const TwoQubitState rho = mixed_state();
    const double k = 3.0, dt = 0.2, eta = 0.35;
    const MeasurementConfig cfg{k, eta, dt};
    const double s_obs = eta * k * dt;
    const double s_hid = (1.0 - eta) * k * dt;
    for (double v : {-1.3, -0.2, 0.0, 0.45, 1.1}) {
        Mat4 oracle;
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j) {
                const double hidden = trapezoid(
                    [&](double u) { return kraus(u, kX[i], s_hid) * kraus(u, kX[j], s_hid); }, -12.0, 12.0, 40000);
                oracle(i, j) = kraus(v, kX[i], s_obs) * kraus(v, kX[j], s_obs) * hidden * rho(i, j);
            }
        }
        const double p = oracle.trace();
        EXPECT_NEAR(outcome_density(rho, v, cfg), p, 1e-10);
        const TwoQubitState lib = discrete_update(rho, v, cfg);
        EXPECT_LT((lib.matrix() - oracle / p).cwiseAbs().maxCoeff(), 1e-10) << v;
    }
}

TEST(Measurement, OutcomeAveragedUpdateIsDephasing) {
    const TwoQubitState rho = mixed_state();
    const MeasurementConfig cfg{1.5, 0.7, 0.4};
    Mat4 avg = Mat4::Zero();
    const int n = 8000;
    const double a = -6.0, b = 6.0, h = (b - a) / n;
    for (int i = 0; i <= n; ++i) {
        const double v = a + i * h;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        avg += w * h * outcome_density(rho, v, cfg) * discrete_update(rho, v, cfg).matrix();
    }
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            const double d = kX[i] - kX[j];
            EXPECT_NEAR(avg(i, j), rho(i, j) * std::exp(-cfg.k * cfg.duration * d * d), 1e-9);
        }
    EXPECT_LT((dephase(rho, cfg).matrix() - avg).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Measurement, SamplingReproducesMoments) {
    const TwoQubitState rho = mixed_state();
    const MeasurementConfig cfg{1.0, 1.0, 0.5};
    const int n = 200000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const TrajectoryStream st(17, static_cast<std::uint64_t>(i));
        const double v = sample_outcome(rho, cfg, st.uniform_at(0), st.normal_at(0));
        s1 += v;
        s2 += v * v;
    }
    const double mean = s1 / n;
    const double var = s2 / n - mean * mean;
    const double ex = rho(0, 0) - rho(2, 2);
    const double exp_var = rho(0, 0) + rho(2, 2) - ex * ex + 1.0 / (8.0 * cfg.strength());
    EXPECT_NEAR(mean, ex, 4.0 * std::sqrt(exp_var / n));
    EXPECT_NEAR(var, exp_var, 0.01 * exp_var);
}

TEST(Measurement, ContinuousStepIsKrausUpdateOfVoltage) {
    const TwoQubitState rho = mixed_state();
    const MeasurementConfig cfg{2.0, 0.8, 1e-3};
    for (double z : {-2.0, 0.3, 1.7}) {
        const double dw = z * std::sqrt(cfg.duration);
        const double dv = rho.expect_x() * cfg.duration + dw / std::sqrt(8.0 * cfg.eta * cfg.k);
        const ContinuousStepResult r = continuous_step(rho, cfg, dw);
        EXPECT_NEAR(r.dv, dv, 1e-15);
        EXPECT_LT((r.state.matrix() - discrete_update(rho, dv / cfg.duration, cfg).matrix()).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(Measurement, ContinuousStepAgreesWithItoIncrementInMean) {
    // Gauss-Hermite average over dW ~ N(0, dt): the mean increment is the
    // Lindblad dephasing term to first order in dt.
    const TwoQubitState rho = mixed_state();
    const double nodes[] = {-2.0201828704560856, -0.9585724646138185, 0.0, 0.9585724646138185, 2.0201828704560856};
    const double weights[] = {0.019953242059045913, 0.3936193231522412, 0.9453087204829419, 0.3936193231522412,
                              0.019953242059045913};
    for (double dt : {1e-3, 1e-4}) {
        const MeasurementConfig cfg{2.0, 0.9, dt};
        Mat4 mean_kraus = Mat4::Zero();
        Mat4 mean_ito = Mat4::Zero();
        for (int q = 0; q < 5; ++q) {
            const double dw = std::sqrt(2.0 * dt) * nodes[q];
            const double w = weights[q] / std::sqrt(std::numbers::pi);
            mean_kraus += w * (continuous_step(rho, cfg, dw).state.matrix() - rho.matrix());
            mean_ito += w * sme_increment(rho, cfg, dw);
        }
        EXPECT_LT((mean_kraus - mean_ito).cwiseAbs().maxCoeff(), 40.0 * dt * dt) << dt;
    }
}

TEST(Measurement, RejectsBadInput) {
    EXPECT_THROW((MeasurementConfig{1.0, 1.2, 1.0}.validate()), DomainError);
    EXPECT_THROW((MeasurementConfig{-1.0, 0.5, 1.0}.validate()), DomainError);
    EXPECT_THROW(povm_operator(0.0, {1.0, 0.0, 1.0}), DomainError);
    EXPECT_THROW(discrete_update(TwoQubitState::psi0(), std::nan(""), {1.0, 1.0, 1.0}), NumericalError);
    EXPECT_THROW(discrete_update(TwoQubitState::basis_state(kTMinus), -60.0, {1.0, 1.0, 10.0}), NumericalError);
}
