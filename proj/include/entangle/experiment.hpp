#pragma once

// Stochastic trajectory ensembles. Continuous-time runs integrate the
// conditional master equation with optional qubit decoherence and a delayed,
// low-pass filtered feedback signal; discrete runs alternate finite windows
// with feedback rotations. All randomness comes from the counter-based
// streams, and means are reduced over fixed blocks of trajectories, so results
// do not depend on the number of worker threads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <variant>
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

// Delay line plus one-pole low-pass filter acting on the voltage increments.
// `filtered` is a rate (dV per unit time); the feedback angle over a step is
// P * filtered * dt, which for zero delay and tau = 0 is exactly P dV.
struct FeedbackChain {
    double dt = 0.0;
    double tau = 0.0;
    std::vector<double> ring;  // past increments, zero-filled
    std::size_t head = 0;
    double filtered = 0.0;

    // The delay is rounded to the nearest whole number of steps.
    static FeedbackChain make(double delay, double tau, double dt) {
        if (!(dt > 0.0)) throw DomainError("feedback chain needs dt > 0");
        if (!(delay >= 0.0)) throw DomainError("feedback delay must be non-negative");
        if (!(tau >= 0.0)) throw DomainError("filter time constant must be non-negative");
        FeedbackChain c;
        c.dt = dt;
        c.tau = tau;
        c.ring.assign(static_cast<std::size_t>(std::llround(delay / dt)), 0.0);
        return c;
    }

    std::size_t delay_steps() const { return ring.size(); }

    // Pushes dv and returns the increment recorded delay_steps() steps ago.
    double push(double dv) {
        if (ring.empty()) return dv;
        const double out = ring[head];
        ring[head] = dv;
        head = (head + 1) % ring.size();
        return out;
    }

    // Pushes dv and advances the filter with its exact one-step solution.
    double update(double dv) {
        const double rate = push(dv) / dt;
        if (tau == 0.0) {
            filtered = rate;
        } else {
            const double keep = std::exp(-dt / tau);
            filtered = keep * filtered + (1.0 - keep) * rate;
        }
        return filtered;
    }

    double angle(double p) const { return p * filtered * dt; }
};

struct NonMarkovianStep {
    TwoQubitState state;
    double dv;
};

// Measurement over dt, decoherence over dt, then the rotation driven by the
// delayed and filtered signal.
inline NonMarkovianStep trajectory_step_nonmarkovian(const TwoQubitState& rho, FeedbackChain& chain, double p,
                                                     const MeasurementConfig& cfg, const LindbladChannel* decoherence,
                                                     double dt, double dw) {
    const ContinuousStepResult m = continuous_step(rho, cfg.with_duration(dt), dw);
    TwoQubitState next = decoherence ? decoherence->apply(m.state) : m.state;
    chain.update(m.dv);
    const double theta = chain.angle(p);
    if (theta != 0.0) next = apply_symmetric_y_rotation(next, theta);
    return {next, m.dv};
}

inline NonMarkovianStep trajectory_step_nonmarkovian(const TwoQubitState& rho, FeedbackChain& chain, double p,
                                                     const MeasurementConfig& cfg,
                                                     const std::optional<DecoherenceParams>& decoherence, double dt,
                                                     double dw) {
    if (!decoherence) return trajectory_step_nonmarkovian(rho, chain, p, cfg, nullptr, dt, dw);
    const LindbladChannel channel(*decoherence, dt);
    return trajectory_step_nonmarkovian(rho, chain, p, cfg, &channel, dt, dw);
}

// Coefficient schedule of the continuous average-sense optimal protocol,
// from an average run that includes decoherence but no delay or filtering.
// Entry n is the coefficient used during step n.
inline std::vector<double> extract_p_schedule(const TwoQubitState& initial, const MeasurementConfig& cfg, double dt,
                                              std::size_t steps,
                                              const std::optional<DecoherenceParams>& decoherence = std::nullopt) {
    cfg.require_observed();
    std::optional<LindbladChannel> channel;
    if (decoherence) channel.emplace(*decoherence, dt);
    std::vector<double> p(steps);
    TwoQubitState avg = initial;
    for (std::size_t n = 0; n < steps; ++n) {
        const AsloContinuousStep s = average_continuous_aslo_step(avg, cfg, dt);
        p[n] = s.coefficient;
        avg = channel ? channel->apply(s.state) : s.state;
    }
    return p;
}

struct EnsembleConfig {
    MeasurementConfig measurement;  // k and eta; the step is `dt`
    double dt = 1e-3;               // us
    std::size_t steps = 1000;
    std::size_t n_traj = 100;
    std::uint64_t seed = 1;
    unsigned workers = 0;
    std::size_t record_every = 1;
    std::optional<DecoherenceParams> decoherence;
    double delay = 0.0;             // us
    double tau = 0.0;               // us; 0 is an infinitely fast filter
    bool keep_records = false;
    bool keep_voltages = false;
    bool keep_states = false;       // store the conditional state at recorded times
    std::vector<std::size_t> subset;  // trajectory indices to run; empty means 0..n_traj-1
    TwoQubitState initial = TwoQubitState::psi0();

    void validate() const {
        measurement.require_observed();
        std::ostringstream os;
        if (!(dt > 0.0)) os << "dt must be positive";
        else if (steps == 0) os << "steps must be at least 1";
        else if (n_traj == 0 && subset.empty()) os << "n_traj must be at least 1";
        else if (record_every == 0) os << "record_every must be at least 1";
        else if (delay < 0.0) os << "delay must be non-negative";
        else if (tau < 0.0) os << "tau must be non-negative";
        else if (tau > 0.0 && dt > tau / 10.0) os << "dt must be at most tau / 10 (dt = " << dt << ", tau = " << tau << ")";
        else if (delay > 0.0 && dt > delay) os << "dt must not exceed the feedback delay";
        if (!os.str().empty()) throw DomainError(os.str());
        if (decoherence) decoherence->validate();
    }

    std::size_t trajectories() const { return subset.empty() ? n_traj : subset.size(); }
    std::size_t trajectory_id(std::size_t i) const { return subset.empty() ? i : subset[i]; }
};

struct TrajectoryRecord {
    std::size_t index = 0;            // trajectory id (RNG stream)
    std::vector<double> fidelity;     // at the recorded times
    std::vector<double> concurrence;
    std::vector<double> signal;       // integral of dV from 0 to each recorded time
    std::vector<double> voltages;     // every increment, when requested
    std::vector<Mat4> states;         // at the recorded times, when requested
};

struct EnsembleResult {
    std::vector<double> times;        // us
    std::vector<std::size_t> record_steps;
    std::vector<double> mean_fidelity;
    std::vector<double> sem_fidelity;
    std::vector<double> concurrence;  // of the ensemble-mean state
    std::vector<TwoQubitState> mean_state;
    std::vector<double> p_schedule;   // coefficients used (proportional rules only)
    std::size_t n_traj = 0;
    std::vector<TrajectoryRecord> records;
};

namespace detail {

inline std::vector<std::size_t> record_grid(std::size_t steps, std::size_t every) {
    std::vector<std::size_t> out;
    for (std::size_t n = 0; n <= steps; n += every) out.push_back(n);
    if (out.back() != steps) out.push_back(steps);
    return out;
}

struct BlockSums {
    std::vector<double> f;
    std::vector<double> f2;
    std::vector<Mat4> rho;

    explicit BlockSums(std::size_t slots = 0) : f(slots, 0.0), f2(slots, 0.0), rho(slots, Mat4::Zero()) {}

    void add(const BlockSums& o) {
        for (std::size_t i = 0; i < f.size(); ++i) {
            f[i] += o.f[i];
            f2[i] += o.f2[i];
            rho[i] += o.rho[i];
        }
    }
};

// Pairwise sum of blocks [lo, hi) in a fixed tree order.
inline BlockSums reduce_blocks(const std::vector<BlockSums>& blocks, std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return blocks[lo];
    const std::size_t mid = lo + (hi - lo) / 2;
    BlockSums left = reduce_blocks(blocks, lo, mid);
    left.add(reduce_blocks(blocks, mid, hi));
    return left;
}

inline double sem_from_sums(double sum, double sum2, std::size_t n) {
    if (n < 2) return 0.0;
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, (sum2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1));
    return std::sqrt(var / static_cast<double>(n));
}

constexpr std::size_t kBlock = 16;

// Feedback law of a continuous-time ensemble, resolved before any trajectory
// runs.
struct ContinuousLaw {
    enum class Kind { kNone, kProportional, kLocallyOptimal } kind = Kind::kNone;
    std::vector<double> coefficients;

    double coefficient(std::size_t step) const {
        if (coefficients.empty()) return 0.0;
        return coefficients[std::min(step, coefficients.size() - 1)];
    }
};

inline ContinuousLaw resolve_continuous_law(const EnsembleConfig& cfg, const ProtocolSpec& protocol) {
    ContinuousLaw law;
    std::visit(
        [&](const auto& r) {
            using R = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<R, NoFeedback>) {
                law.kind = ContinuousLaw::Kind::kNone;
            } else if constexpr (std::is_same_v<R, QuantumProportional>) {
                law.kind = ContinuousLaw::Kind::kProportional;
                law.coefficients = r.adaptive ? extract_p_schedule(cfg.initial, cfg.measurement, cfg.dt, cfg.steps,
                                                                   cfg.decoherence)
                                              : r.coefficients;
                if (law.coefficients.empty()) throw DomainError("proportional feedback without coefficients");
            } else if constexpr (std::is_same_v<R, LocallyOptimalEstimator>) {
                if (cfg.delay > 0.0 || cfg.tau > 0.0) {
                    throw DomainError("locally optimal estimation is only defined without delay or filtering");
                }
                law.kind = ContinuousLaw::Kind::kLocallyOptimal;
            } else {
                throw DomainError("continuous-time ensembles support none, proportional and locally optimal rules");
            }
        },
        protocol);
    return law;
}

// Runs one trajectory, calling on_step(step, state, dv) after every step
// (step counts from 1) and on_step(0, initial, 0) first.
template <typename OnStep>
void run_continuous_trajectory(const EnsembleConfig& cfg, const ContinuousLaw& law, const LindbladChannel* channel,
                               std::size_t traj, OnStep&& on_step) {
    const MeasurementConfig step_cfg = cfg.measurement.with_duration(cfg.dt);
    const double root_dt = std::sqrt(cfg.dt);
    FeedbackChain chain = FeedbackChain::make(cfg.delay, cfg.tau, cfg.dt);
    TwoQubitState rho = cfg.initial;
    on_step(std::size_t{0}, rho, 0.0);
    for (std::size_t n = 0; n < cfg.steps; ++n) {
        const double dw = counter_normal(cfg.seed, traj, n) * root_dt;
        double dv;
        if (law.kind == ContinuousLaw::Kind::kLocallyOptimal) {
            const ContinuousStepResult m = continuous_step(rho, step_cfg, dw);
            rho = channel ? channel->apply(m.state) : m.state;
            rho = apply_symmetric_y_rotation(rho, theta_opt(rho));
            dv = m.dv;
        } else {
            const NonMarkovianStep s =
                trajectory_step_nonmarkovian(rho, chain, law.coefficient(n), step_cfg, channel, cfg.dt, dw);
            rho = s.state;
            dv = s.dv;
        }
        on_step(n + 1, rho, dv);
    }
}

}  // namespace detail

// Every state of one trajectory, steps + 1 entries.
inline std::vector<TwoQubitState> simulate_trajectory_states(const EnsembleConfig& cfg, const ProtocolSpec& protocol,
                                                             std::size_t traj) {
    cfg.validate();
    const detail::ContinuousLaw law = detail::resolve_continuous_law(cfg, protocol);
    std::optional<LindbladChannel> channel;
    if (cfg.decoherence) channel.emplace(*cfg.decoherence, cfg.dt);
    std::vector<TwoQubitState> out;
    out.reserve(cfg.steps + 1);
    detail::run_continuous_trajectory(cfg, law, channel ? &*channel : nullptr, traj,
                                      [&](std::size_t, const TwoQubitState& rho, double) { out.push_back(rho); });
    return out;
}

inline EnsembleResult run_ensemble(const EnsembleConfig& cfg, const ProtocolSpec& protocol) {
    cfg.validate();
    const detail::ContinuousLaw law = detail::resolve_continuous_law(cfg, protocol);
    std::optional<LindbladChannel> channel;
    if (cfg.decoherence) channel.emplace(*cfg.decoherence, cfg.dt);

    EnsembleResult result;
    result.record_steps = detail::record_grid(cfg.steps, cfg.record_every);
    for (std::size_t n : result.record_steps) result.times.push_back(static_cast<double>(n) * cfg.dt);
    if (law.kind == detail::ContinuousLaw::Kind::kProportional) result.p_schedule = law.coefficients;
    const std::size_t slots = result.record_steps.size();
    const std::size_t count = cfg.trajectories();
    result.n_traj = count;
    if (cfg.keep_records) result.records.resize(count);

    // slot_of[step] = record slot or npos
    std::vector<std::size_t> slot_of(cfg.steps + 1, std::numeric_limits<std::size_t>::max());
    for (std::size_t s = 0; s < slots; ++s) slot_of[result.record_steps[s]] = s;

    const std::size_t n_blocks = (count + detail::kBlock - 1) / detail::kBlock;
    std::vector<detail::BlockSums> blocks(n_blocks);
    detail::parallel_for(n_blocks, detail::worker_count(cfg.workers), [&](std::size_t b) {
        detail::BlockSums sums(slots);
        const std::size_t end = std::min(count, (b + 1) * detail::kBlock);
        for (std::size_t i = b * detail::kBlock; i < end; ++i) {
            TrajectoryRecord* rec = cfg.keep_records ? &result.records[i] : nullptr;
            if (rec) {
                rec->index = cfg.trajectory_id(i);
                rec->fidelity.reserve(slots);
                rec->concurrence.reserve(slots);
                rec->signal.reserve(slots);
                if (cfg.keep_voltages) rec->voltages.reserve(cfg.steps);
                if (cfg.keep_states) rec->states.reserve(slots);
            }
            double signal = 0.0;
            detail::run_continuous_trajectory(
                cfg, law, channel ? &*channel : nullptr, cfg.trajectory_id(i),
                [&](std::size_t step, const TwoQubitState& rho, double dv) {
                    signal += dv;
                    if (rec && cfg.keep_voltages && step > 0) rec->voltages.push_back(dv);
                    const std::size_t slot = slot_of[step];
                    if (slot == std::numeric_limits<std::size_t>::max()) return;
                    const double f = fidelity_t0(rho);
                    sums.f[slot] += f;
                    sums.f2[slot] += f * f;
                    sums.rho[slot] += rho.matrix();
                    if (rec) {
                        rec->fidelity.push_back(f);
                        rec->concurrence.push_back(concurrence(rho));
                        rec->signal.push_back(signal);
                        if (cfg.keep_states) rec->states.push_back(rho.matrix());
                    }
                });
        }
        blocks[b] = std::move(sums);
    });

    const detail::BlockSums total = detail::reduce_blocks(blocks, 0, n_blocks);
    for (std::size_t s = 0; s < slots; ++s) {
        result.mean_fidelity.push_back(total.f[s] / static_cast<double>(count));
        result.sem_fidelity.push_back(detail::sem_from_sums(total.f[s], total.f2[s], count));
        const TwoQubitState mean(total.rho[s] / static_cast<double>(count));
        result.mean_state.push_back(mean);
        result.concurrence.push_back(concurrence(mean));
    }
    return result;
}

// Average fidelity of trajectories that track their own conditional state
// and apply theta_opt to it after every step.
inline EnsembleResult locally_optimal_trajectory(const EnsembleConfig& cfg) {
    return run_ensemble(cfg, LocallyOptimalEstimator{});
}

struct PostSelection {
    std::vector<std::size_t> kept;    // trajectory ids
    std::vector<double> mean_fidelity;
    std::vector<double> sem_fidelity;
    std::vector<double> concurrence;  // of the kept mean state; empty unless records hold states
    double median = 0.0;              // median |integrated signal| over the window
};

// Keeps the floor(n * keep_fraction) trajectories with the smallest
// |integral of dV| over [0, window_end]; ties go to the lower id.
inline PostSelection post_select(const EnsembleResult& ensemble, double window_end, double keep_fraction = 0.5) {
    const auto& records = ensemble.records;
    if (records.size() < 2) throw DomainError("post-selection needs at least 2 trajectory records");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw DomainError("keep_fraction must lie in (0, 1]");
    std::size_t slot = ensemble.times.size();
    for (std::size_t s = 0; s < ensemble.times.size(); ++s) {
        if (std::abs(ensemble.times[s] - window_end) <= 1e-9 * std::max(1.0, window_end)) slot = s;
    }
    if (slot == ensemble.times.size()) {
        std::ostringstream os;
        os << "post-selection window end " << window_end << " us is not on the recorded time grid";
        throw DomainError(os.str());
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    auto magnitude = [&](std::size_t i) { return std::abs(records[i].signal[slot]); };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = magnitude(a);
        const double mb = magnitude(b);
        return ma < mb || (ma == mb && records[a].index < records[b].index);
    });
    PostSelection out;
    const std::size_t n = records.size();
    out.median = n % 2 == 1 ? magnitude(order[n / 2]) : 0.5 * (magnitude(order[n / 2 - 1]) + magnitude(order[n / 2]));
    const auto keep = static_cast<std::size_t>(std::floor(static_cast<double>(n) * keep_fraction));
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(chosen.begin(), chosen.end());
    const std::size_t slots = ensemble.times.size();
    for (std::size_t s = 0; s < slots; ++s) {
        double sum = 0.0;
        double sum2 = 0.0;
        for (std::size_t i : chosen) {
            const double f = records[i].fidelity[s];
            sum += f;
            sum2 += f * f;
        }
        out.mean_fidelity.push_back(keep ? sum / static_cast<double>(keep) : 0.0);
        out.sem_fidelity.push_back(detail::sem_from_sums(sum, sum2, keep));
    }
    const bool have_states =
        keep > 0 && std::all_of(chosen.begin(), chosen.end(), [&](std::size_t i) { return records[i].states.size() == slots; });
    if (have_states) {
        for (std::size_t s = 0; s < slots; ++s) {
            Mat4 sum = Mat4::Zero();
            for (std::size_t i : chosen) sum += records[i].states[s];
            out.concurrence.push_back(concurrence(TwoQubitState(sum / static_cast<double>(keep))));
        }
    }
    for (std::size_t i : chosen) out.kept.push_back(records[i].index);
    return out;
}

// Finite-window rounds: sample an outcome from the conditional state, update,
// rotate by the rule.
struct DiscreteEnsembleConfig {
    MeasurementConfig measurement;  // duration is the window length
    std::size_t rounds = 1;
    std::size_t n_traj = 100;
    std::uint64_t seed = 1;
    unsigned workers = 0;
    std::size_t burn_in = 0;        // rounds excluded from the steady-state average
    TwoQubitState initial = TwoQubitState::psi0();

    void validate() const {
        measurement.require_observed();
        if (rounds == 0) throw DomainError("rounds must be at least 1");
        if (n_traj == 0) throw DomainError("n_traj must be at least 1");
        if (burn_in >= rounds) throw DomainError("burn_in must be smaller than rounds");
    }
};

struct DiscreteEnsembleResult {
    std::vector<double> mean_fidelity;   // rounds + 1 entries
    std::vector<double> sem_fidelity;
    double steady_mean = 0.0;            // mean over trajectories of the per-trajectory time average
    double steady_sem = 0.0;
    std::vector<double> final_fidelity;  // per trajectory
};

inline DiscreteEnsembleResult run_discrete_ensemble(const DiscreteEnsembleConfig& cfg, const ProtocolSpec& rule) {
    cfg.validate();
    const MeasurementConfig& m = cfg.measurement;
    // Average-state quantities some rules need, computed once.
    std::vector<double> thresholds;
    std::vector<TwoQubitState> averages;
    if (const auto* sc = std::get_if<SemiclassicalThreshold>(&rule); sc && sc->optimal()) {
        const AverageRun avg = run_average_protocol(cfg.initial, rule, m, cfg.rounds);
        thresholds.assign(avg.threshold.begin() + 1, avg.threshold.end());
    }
    if (const auto* h = std::get_if<HybridSchedule>(&rule)) {
        if (!h->durations.empty()) throw DomainError("discrete ensembles use a fixed window; give durations via measurement");
        averages.push_back(cfg.initial);
        for (std::size_t r = 0; r + 1 < cfg.rounds; ++r) {
            averages.push_back(average_discrete_step(averages.back(), rule, m, {r}));
        }
    }
    if (std::holds_alternative<HybridSchedule>(rule) && !is_01_symmetric(cfg.initial, 1e-9)) {
        throw DomainError("average-sense rules need a 01-symmetric initial state");
    }

    auto angle = [&](std::size_t round, double v, const TwoQubitState& post) -> double {
        return std::visit(
            [&](const auto& r) -> double {
                using R = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<R, NoFeedback>) {
                    return 0.0;
                } else if constexpr (std::is_same_v<R, SemiclassicalThreshold>) {
                    return semiclassical_rule(v, r.optimal() ? thresholds[round] : r.at(round));
                } else if constexpr (std::is_same_v<R, QuantumProportional>) {
                    return r.at(round) * v * m.duration;
                } else if constexpr (std::is_same_v<R, LookupTable>) {
                    return r.table.lookup(round, v);
                } else if constexpr (std::is_same_v<R, HybridSchedule>) {
                    const double shift =
                        4.0 * m.strength() * std::min({(v - 1) * (v - 1), v * v, (v + 1) * (v + 1)});
                    const Mat4 a = unnormalized_update(averages[round], v, m, shift);
                    return detail::theta_opt_scaled(a, a.trace());
                } else {
                    return theta_opt(post);
                }
            },
            rule);
    };

    const std::size_t slots = cfg.rounds + 1;
    const std::size_t n_blocks = (cfg.n_traj + detail::kBlock - 1) / detail::kBlock;
    std::vector<detail::BlockSums> blocks(n_blocks);
    std::vector<double> time_avg(cfg.n_traj);
    DiscreteEnsembleResult result;
    result.final_fidelity.resize(cfg.n_traj);
    detail::parallel_for(n_blocks, detail::worker_count(cfg.workers), [&](std::size_t b) {
        detail::BlockSums sums(slots);
        const std::size_t end = std::min(cfg.n_traj, (b + 1) * detail::kBlock);
        for (std::size_t i = b * detail::kBlock; i < end; ++i) {
            const TrajectoryStream stream(cfg.seed, i);
            TwoQubitState rho = cfg.initial;
            double f = fidelity_t0(rho);
            sums.f[0] += f;
            sums.f2[0] += f * f;
            double acc = 0.0;
            for (std::size_t r = 0; r < cfg.rounds; ++r) {
                const double v = sample_outcome(rho, m, stream.uniform_at(r), stream.normal_at(r, 1));
                rho = discrete_update(rho, v, m);
                const double theta = angle(r, v, rho);
                if (theta != 0.0) rho = apply_symmetric_y_rotation(rho, theta);
                f = fidelity_t0(rho);
                sums.f[r + 1] += f;
                sums.f2[r + 1] += f * f;
                if (r >= cfg.burn_in) acc += f;
            }
            time_avg[i] = acc / static_cast<double>(cfg.rounds - cfg.burn_in);
            result.final_fidelity[i] = f;
        }
        blocks[b] = std::move(sums);
    });

    const detail::BlockSums total = detail::reduce_blocks(blocks, 0, n_blocks);
    for (std::size_t s = 0; s < slots; ++s) {
        result.mean_fidelity.push_back(total.f[s] / static_cast<double>(cfg.n_traj));
        result.sem_fidelity.push_back(detail::sem_from_sums(total.f[s], total.f2[s], cfg.n_traj));
    }
    // Two passes: the spread can be tiny next to the mean.
    const double n = static_cast<double>(cfg.n_traj);
    result.steady_mean = std::accumulate(time_avg.begin(), time_avg.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : time_avg) ss += (a - result.steady_mean) * (a - result.steady_mean);
    result.steady_sem = cfg.n_traj > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    return result;
}

}  // namespace entangle
