#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (seed, trajectory, step, lane), so an ensemble produces the same numbers no
// matter how trajectories are split across workers or in which order they run.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace entangle {

namespace detail {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

inline std::uint64_t counter_bits(std::uint64_t seed, std::uint64_t traj, std::uint64_t step, std::uint64_t lane) {
    std::uint64_t h = detail::mix64(seed ^ 0x243f6a8885a308d3ULL);
    h = detail::mix64(h ^ (traj + 0x13198a2e03707344ULL));
    h = detail::mix64(h ^ (step + 0xa4093822299f31d0ULL));
    h = detail::mix64(h ^ (lane + 0x082efa98ec4e6c89ULL));
    return h;
}

// Uniform on the open interval (0, 1).
inline double counter_uniform(std::uint64_t seed, std::uint64_t traj, std::uint64_t step, std::uint64_t lane) {
    return (static_cast<double>(counter_bits(seed, traj, step, lane) >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal via Box-Muller on lanes (2*lane, 2*lane+1).
inline double counter_normal(std::uint64_t seed, std::uint64_t traj, std::uint64_t step, std::uint64_t lane = 0) {
    const double u1 = counter_uniform(seed, traj, step, 2 * lane);
    const double u2 = counter_uniform(seed, traj, step, 2 * lane + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// The stream for one trajectory. Draws are addressed by step index; the
// sequential interface (uniform()/normal()) walks its own counter for code
// that only needs "the next number".
class TrajectoryStream {
  public:
    TrajectoryStream(std::uint64_t seed, std::uint64_t traj) : seed_(seed), traj_(traj) {}

    double normal_at(std::uint64_t step, std::uint64_t lane = 0) const {
        return counter_normal(seed_, traj_, step, lane);
    }
    double uniform_at(std::uint64_t step, std::uint64_t lane = 0) const {
        return counter_uniform(seed_, traj_, step, lane + 1000);
    }

    double uniform() { return counter_uniform(seed_, traj_, next_++, 7); }
    double normal() { return counter_normal(seed_, traj_, next_++, 11); }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t trajectory() const { return traj_; }

  private:
    std::uint64_t seed_;
    std::uint64_t traj_;
    std::uint64_t next_ = 0;
};

}  // namespace entangle
