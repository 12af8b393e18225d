#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "entangle/experiment.hpp"

using namespace entangle;

namespace {

EnsembleConfig small_config() {
    EnsembleConfig c;
    c.measurement = {2.0 * std::numbers::pi, 0.5, 1e-3};
    c.dt = 1e-3;
    c.steps = 200;
    c.n_traj = 64;
    c.seed = 42;
    c.workers = 1;
    c.record_every = 20;
    return c;
}

}  // namespace

TEST(FeedbackChain, DelayReturnsOldIncrements) {
    FeedbackChain c = FeedbackChain::make(0.3, 0.0, 0.1);
    ASSERT_EQ(c.delay_steps(), 3u);
    std::vector<double> out;
    for (int i = 1; i <= 6; ++i) out.push_back(c.push(i));
    EXPECT_EQ(out, (std::vector<double>{0, 0, 0, 1, 2, 3}));
    FeedbackChain none = FeedbackChain::make(0.0, 0.0, 0.1);
    EXPECT_EQ(none.push(5.0), 5.0);
    EXPECT_EQ(FeedbackChain::make(0.26, 0.0, 0.1).delay_steps(), 3u);
}

TEST(FeedbackChain, FilterFollowsExponentialResponse) {
    const double dt = 0.01, tau = 0.2;
    FeedbackChain c = FeedbackChain::make(0.0, tau, dt);
    for (int m = 1; m <= 100; ++m) {
        c.update(2.0 * dt);  // constant rate 2
        EXPECT_NEAR(c.filtered, 2.0 * (1.0 - std::exp(-m * dt / tau)), 1e-12) << m;
    }
    EXPECT_NEAR(c.angle(3.0), 3.0 * c.filtered * dt, 1e-15);
    EXPECT_THROW(FeedbackChain::make(-1.0, 0.0, 0.1), DomainError);
}

TEST(Experiment, MarkovianStepIsWisemanMilburnStep) {
    const MeasurementConfig cfg{2.0, 0.7, 1.0};
    FeedbackChain chain = FeedbackChain::make(0.0, 0.0, 1e-3);
    const TwoQubitState rho = TwoQubitState::psi0();
    for (double dw : {-0.05, 0.01, 0.03}) {
        const NonMarkovianStep s = trajectory_step_nonmarkovian(rho, chain, 4.0, cfg, std::nullopt, 1e-3, dw);
        EXPECT_LT((s.state.matrix() - wiseman_milburn_step(rho, 4.0, cfg, 1e-3, dw).matrix()).cwiseAbs().maxCoeff(),
                  1e-15);
    }
}

TEST(Experiment, DeterministicAcrossWorkerCounts) {
    EnsembleConfig c = small_config();
    c.n_traj = 50;
    const EnsembleResult a = run_ensemble(c, QuantumProportional{{}, true});
    c.workers = 3;
    const EnsembleResult b = run_ensemble(c, QuantumProportional{{}, true});
    EXPECT_EQ(a.mean_fidelity, b.mean_fidelity);
    EXPECT_EQ(a.sem_fidelity, b.sem_fidelity);
    EXPECT_EQ(a.concurrence, b.concurrence);
}

TEST(Experiment, SubsetReproducesTrajectories) {
    EnsembleConfig c = small_config();
    c.keep_records = true;
    const EnsembleResult full = run_ensemble(c, QuantumProportional{{}, true});
    c.subset = {5, 17};
    const EnsembleResult part = run_ensemble(c, QuantumProportional{{}, true});
    ASSERT_EQ(part.records.size(), 2u);
    EXPECT_EQ(part.records[0].index, 5u);
    EXPECT_EQ(part.records[0].fidelity, full.records[5].fidelity);
    EXPECT_EQ(part.records[1].signal, full.records[17].signal);
    const std::vector<TwoQubitState> states = simulate_trajectory_states(c, QuantumProportional{{}, true}, 17);
    EXPECT_EQ(states.size(), c.steps + 1);
    EXPECT_NEAR(fidelity_t0(states.back()), full.records[17].fidelity.back(), 1e-15);
}

TEST(Experiment, EnsembleMeanFollowsAverageEquation) {
    EnsembleConfig c = small_config();
    c.n_traj = 800;
    c.workers = 0;
    const EnsembleResult r = run_ensemble(c, QuantumProportional{{}, true});
    const AverageRun avg = run_average_protocol(c.initial, QuantumProportional{{}, true}, c.measurement.with_duration(c.dt),
                                                c.steps);
    for (std::size_t s = 0; s < r.times.size(); ++s) {
        const double expected = avg.fidelity[r.record_steps[s]];
        EXPECT_NEAR(r.mean_fidelity[s], expected, 4.0 * r.sem_fidelity[s] + 2e-3) << r.times[s];
    }
    // The schedule used is the averaged protocol's coefficient sequence.
    const std::vector<double> p = extract_p_schedule(c.initial, c.measurement, c.dt, c.steps);
    EXPECT_EQ(r.p_schedule, p);
    for (std::size_t n = 0; n < c.steps; ++n) EXPECT_NEAR(p[n], avg.coefficient[n + 1], 1e-12);
}

TEST(Experiment, NoFeedbackPreservesMeanFidelity) {
    EnsembleConfig c = small_config();
    c.n_traj = 400;
    const EnsembleResult r = run_ensemble(c, NoFeedback{});
    for (std::size_t s = 0; s < r.times.size(); ++s) {
        EXPECT_NEAR(fidelity_t0(r.mean_state[s]), 0.5, 4.0 * r.sem_fidelity[s] + 1e-12);
    }
    EXPECT_TRUE(r.p_schedule.empty());
}

TEST(Experiment, PostSelectionKeepsSmallestSignals) {
    EnsembleConfig c = small_config();
    c.n_traj = 40;
    c.keep_records = true;
    c.keep_states = true;
    const EnsembleResult r = run_ensemble(c, QuantumProportional{{}, true});
    const double window = r.times[5];
    const PostSelection p = post_select(r, window, 0.5);
    ASSERT_EQ(p.kept.size(), 20u);
    double largest_kept = 0.0, smallest_dropped = 1e300;
    for (const auto& rec : r.records) {
        const double m = std::abs(rec.signal[5]);
        const bool kept = std::find(p.kept.begin(), p.kept.end(), rec.index) != p.kept.end();
        (kept ? largest_kept : smallest_dropped) = kept ? std::max(largest_kept, m) : std::min(smallest_dropped, m);
    }
    EXPECT_LE(largest_kept, smallest_dropped);
    EXPECT_GE(p.median, largest_kept);
    EXPECT_LE(p.median, smallest_dropped);
    for (std::size_t s = 0; s < r.times.size(); ++s) {
        double sum = 0.0;
        Mat4 rho = Mat4::Zero();
        for (std::size_t id : p.kept) {
            sum += r.records[id].fidelity[s];
            rho += r.records[id].states[s];
        }
        EXPECT_NEAR(p.mean_fidelity[s], sum / 20.0, 1e-14);
        EXPECT_NEAR(p.concurrence[s], concurrence(TwoQubitState(rho / 20.0)), 1e-12);
    }
    EXPECT_THROW(post_select(r, 0.0123, 0.5), DomainError);
}

TEST(Experiment, DecoherenceDelayAndFilterLowerFidelity) {
    EnsembleConfig c = small_config();
    c.n_traj = 200;
    c.steps = 400;
    c.dt = 2e-3;
    const double ideal = run_ensemble(c, QuantumProportional{{}, true}).mean_fidelity.back();
    DecoherenceParams d;
    d.tphi = {1.0, 5.0};
    d.t1 = {3.0, 3.0};
    c.decoherence = d;
    c.delay = 0.1;
    c.tau = 0.1;
    const EnsembleResult r = run_ensemble(c, QuantumProportional{{}, true});
    EXPECT_LT(r.mean_fidelity.back(), ideal);
    EXPECT_GT(*std::max_element(r.mean_fidelity.begin(), r.mean_fidelity.end()), 0.5);
    c.tau = 0.01;
    EXPECT_THROW(run_ensemble(c, NoFeedback{}), DomainError);
    c.tau = 0.1;
    EXPECT_THROW(run_ensemble(c, LocallyOptimalEstimator{}), DomainError);
}

TEST(Experiment, LocallyOptimalBeatsNoFeedback) {
    EnsembleConfig c = small_config();
    c.n_traj = 100;
    const EnsembleResult lo = locally_optimal_trajectory(c);
    const EnsembleResult none = run_ensemble(c, NoFeedback{});
    EXPECT_GT(lo.mean_fidelity.back(), none.mean_fidelity.back() + 0.1);
}

TEST(Experiment, MeasurementOnlyReachesHighFidelityHalfTheTime) {
    DiscreteEnsembleConfig c;
    c.measurement = {1.0, 1.0, 10.0};
    c.rounds = 1;
    c.n_traj = 1000;
    c.seed = 9;
    const DiscreteEnsembleResult r = run_discrete_ensemble(c, NoFeedback{});
    const double frac =
        static_cast<double>(std::count_if(r.final_fidelity.begin(), r.final_fidelity.end(), [](double f) { return f > 0.99; })) /
        1000.0;
    EXPECT_NEAR(frac, 0.5, 0.05);
    EXPECT_NEAR(r.mean_fidelity[0], 0.5, 1e-15);
}

TEST(Experiment, ScalingInvarianceOfTrajectories) {
    EnsembleConfig a = small_config();
    a.steps = 150;
    DecoherenceParams d;
    d.tphi = {2.0, 4.0};
    d.t1 = {5.0, 5.0};
    a.decoherence = d;
    a.delay = 0.01;
    a.tau = 0.02;
    EnsembleConfig b = a;
    b.measurement.k = a.measurement.k / 2.0;
    b.dt = 2.0 * a.dt;
    b.delay = 2.0 * a.delay;
    b.tau = 2.0 * a.tau;
    b.decoherence = d.scaled(2.0);
    const auto sa = simulate_trajectory_states(a, QuantumProportional{{}, true}, 3);
    const auto sb = simulate_trajectory_states(b, QuantumProportional{{}, true}, 3);
    ASSERT_EQ(sa.size(), sb.size());
    double worst = 0.0;
    for (std::size_t n = 0; n < sa.size(); ++n) worst = std::max(worst, (sa[n].matrix() - sb[n].matrix()).cwiseAbs().maxCoeff());
    EXPECT_LT(worst, 1e-8);
}
