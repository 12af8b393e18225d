#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "entangle/decoherence.hpp"

using namespace entangle;

namespace {

TwoQubitState random_state(std::mt19937_64& g) {
    std::normal_distribution<double> n;
    Mat4 a;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) a(i, j) = n(g);
    const Mat4 m = a * a.transpose();
    return TwoQubitState(m / m.trace());
}

Mat4 rk4(const TwoQubitState& start, const DecoherenceParams& p, double t, int steps) {
    Mat4 r = start.matrix();
    const double h = t / steps;
    auto f = [&](const Mat4& m) { return lindblad_generator(TwoQubitState(m), p); };
    for (int n = 0; n < steps; ++n) {
        const Mat4 a = f(r), b = f(r + 0.5 * h * a), c = f(r + 0.5 * h * b), d = f(r + h * c);
        r += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
    }
    return r;
}

}  // namespace

TEST(Decoherence, RelaxationAndDephasingRates) {
    DecoherenceParams p;
    p.t1 = {3.0, 5.0};
    const double t = 0.7;
    // |00> is the excited state; each qubit relaxes at 1/T1.
    const TwoQubitState up = lindblad_step(TwoQubitState::basis_state(kTMinus), p, t);
    EXPECT_NEAR(up(kTMinus, kTMinus), std::exp(-t / 3.0 - t / 5.0), 1e-14);
    EXPECT_NEAR(up(kTPlus, kTPlus), (1 - std::exp(-t / 3.0)) * (1 - std::exp(-t / 5.0)), 1e-14);
    EXPECT_NEAR(lindblad_step(TwoQubitState::basis_state(kTPlus), p, t)(kTPlus, kTPlus), 1.0, 1e-15);

    DecoherenceParams d;
    d.tphi = {2.0, 2.0};
    // t0 -> s mixing: |01> and |10> dephase relative to each other at 2/Tphi.
    const TwoQubitState bell = lindblad_step(TwoQubitState::basis_state(kT0), d, t);
    EXPECT_NEAR(bell(kT0, kT0), 0.5 * (1 + std::exp(-2.0 * t / 2.0)), 1e-14);
    EXPECT_NEAR(bell(kSinglet, kSinglet), 0.5 * (1 - std::exp(-2.0 * t / 2.0)), 1e-14);
    // A single-qubit coherence decays at 1/Tphi.
    const Mat4 comp = to_computational(lindblad_step(TwoQubitState::psi0(), d, t));
    EXPECT_NEAR(comp(0, 1), 0.25 * std::exp(-t / 2.0), 1e-14);
}

TEST(Decoherence, ExactChannelMatchesGeneratorIntegration) {
    std::mt19937_64 g(2);
    DecoherenceParams p;
    p.t1 = {20.0, 8.0};
    p.tphi = {6.9, 30.0};
    for (int i = 0; i < 5; ++i) {
        const TwoQubitState rho = random_state(g);
        for (double t : {0.01, 0.5, 4.0}) {
            const Mat4 oracle = rk4(rho, p, t, 400);
            EXPECT_LT((lindblad_step(rho, p, t).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-12) << t;
            const LindbladChannel ch(p, t);
            EXPECT_LT((ch.apply(rho).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-12) << t;
        }
    }
}

TEST(Decoherence, GeneratorIsTracelessAndChannelIsPositive) {
    std::mt19937_64 g(4);
    DecoherenceParams p;
    p.t1 = {1.0, 2.0};
    p.tphi = {0.5, DecoherenceParams::kNever};
    for (int i = 0; i < 50; ++i) {
        const TwoQubitState rho = random_state(g);
        EXPECT_NEAR(lindblad_generator(rho, p).trace(), 0.0, 1e-14);
        const TwoQubitState out = lindblad_step(rho, p, 10.0);
        EXPECT_NEAR(out.trace(), 1.0, 1e-14);
        EXPECT_GE(out.min_eigenvalue(), -1e-14);
    }
}

TEST(Decoherence, ScalingAndValidation) {
    DecoherenceParams p;
    p.t1 = {2.0, 4.0};
    p.tphi = {1.0, 3.0};
    const DecoherenceParams s = p.scaled(2.0);
    EXPECT_EQ(s.t1[1], 8.0);
    EXPECT_EQ(s.tphi[0], 2.0);
    const TwoQubitState rho = TwoQubitState::psi0();
    EXPECT_LT((lindblad_step(rho, p, 0.3).matrix() - lindblad_step(rho, s, 0.6).matrix()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_TRUE(DecoherenceParams{}.is_trivial());
    DecoherenceParams bad;
    bad.t1 = {-1.0, 1.0};
    EXPECT_THROW(bad.validate(), DomainError);
    EXPECT_THROW(lindblad_step(rho, p, -0.1), DomainError);
}
