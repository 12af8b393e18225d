#pragma once

// Two-qubit density matrices restricted to real symmetric form, stored in the
// coupled basis (t-, t0, t+, s):
//
//   t- = |00>,  t0 = (|01> + |10>)/sqrt2,  t+ = |11>,  s = (|01> - |10>)/sqrt2
//
// |1> is the ground state of each qubit, so the half-parity observable
// X = (sz1 + sz2)/2 is diag(+1, 0, -1, 0) in this basis.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "entangle/error.hpp"

namespace entangle {

using Mat4 = Eigen::Matrix4d;
using Vec4 = Eigen::Vector4d;

enum Basis : int { kTMinus = 0, kT0 = 1, kTPlus = 2, kSinglet = 3 };

// Eigenvalues of X in basis order.
inline constexpr std::array<double, 4> kXEigenvalues{1.0, 0.0, -1.0, 0.0};

inline constexpr double kTraceTolerance = 1e-9;
inline constexpr double kPositivityTolerance = 1e-9;

class TwoQubitState {
  public:
    TwoQubitState() : m_(Mat4::Zero()) { m_(kT0, kT0) = 1.0; }

    // Symmetrizes the input; the stored matrix is exactly symmetric.
    explicit TwoQubitState(const Mat4& m) : m_(0.5 * (m + m.transpose())) {}

    static TwoQubitState from_pure(const Vec4& amplitudes) {
        const Vec4 psi = amplitudes.normalized();
        return TwoQubitState(psi * psi.transpose());
    }

    static TwoQubitState from_diagonal(double tm, double t0, double tp, double s) {
        Mat4 m = Mat4::Zero();
        m.diagonal() << tm, t0, tp, s;
        return TwoQubitState(m);
    }

    static TwoQubitState basis_state(Basis b) {
        Mat4 m = Mat4::Zero();
        m(b, b) = 1.0;
        return TwoQubitState(m);
    }

    // (|00> + |01> + |10> + |11>)/2: the separable starting point.
    static TwoQubitState psi0() {
        return from_pure(Vec4(0.5, std::numbers::sqrt2 / 2.0, 0.5, 0.0));
    }

    static TwoQubitState triplet_mixed() { return from_diagonal(1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0); }

    // Pure 01-symmetric triplet state with t0 population f.
    static TwoQubitState symmetric_pure(double f) {
        const double side = std::sqrt(std::max(0.0, (1.0 - f) / 2.0));
        return from_pure(Vec4(side, std::sqrt(std::max(0.0, f)), side, 0.0));
    }

    double operator()(int i, int j) const { return m_(i, j); }
    const Mat4& matrix() const { return m_; }

    double trace() const { return m_.trace(); }
    double purity() const { return (m_ * m_).trace(); }
    double expect_x() const { return m_(kTMinus, kTMinus) - m_(kTPlus, kTPlus); }

    double min_eigenvalue() const {
        Eigen::SelfAdjointEigenSolver<Mat4> es(m_, Eigen::EigenvaluesOnly);
        return es.eigenvalues()(0);
    }

    // Cheap positivity test: rho + tol*I admits a Cholesky factorization
    // iff every eigenvalue exceeds -tol.
    bool is_positive(double tol) const {
        Eigen::LLT<Mat4> llt(m_ + tol * Mat4::Identity());
        return llt.info() == Eigen::Success;
    }

    TwoQubitState normalized() const {
        const double tr = trace();
        if (!(tr > 0.0) || !std::isfinite(tr)) {
            throw NumericalError("cannot normalize a density matrix with trace " + std::to_string(tr));
        }
        return TwoQubitState(m_ / tr);
    }

  private:
    Mat4 m_;
};

// Throws NumericalError when rho has drifted outside the state space by more
// than tol. `context` names the operation for the message.
inline void require_physical(const TwoQubitState& rho, double tol, const char* context) {
    if (std::abs(rho.trace() - 1.0) > kTraceTolerance) {
        std::ostringstream os;
        os << context << ": trace drifted to " << rho.trace();
        throw NumericalError(os.str());
    }
    if (!rho.is_positive(tol)) {
        std::ostringstream os;
        os << context << ": positivity lost (min eigenvalue " << rho.min_eigenvalue()
           << "); reduce the integration step";
        throw NumericalError(os.str());
    }
}

// Columns are the coupled basis vectors written in the computational basis
// (|00>, |01>, |10>, |11>).
inline const Mat4& coupled_to_computational() {
    static const Mat4 b = [] {
        const double r = std::numbers::sqrt2 / 2.0;
        Mat4 m;
        m << 1, 0, 0, 0,
             0, r, 0, r,
             0, r, 0, -r,
             0, 0, 1, 0;
        return m;
    }();
    return b;
}

inline Mat4 to_computational(const TwoQubitState& rho) {
    const Mat4& b = coupled_to_computational();
    return b * rho.matrix() * b.transpose();
}

inline TwoQubitState from_computational(const Mat4& m) {
    const Mat4& b = coupled_to_computational();
    return TwoQubitState(b.transpose() * m * b);
}

// exp(-i theta (sy1 + sy2)/2) in the coupled basis. Real orthogonal; acts as a
// spin-1 rotation on the triplet block and trivially on the singlet.
inline Mat4 symmetric_y_rotation(double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta) / std::numbers::sqrt2;
    const double cc = 0.5 * (1.0 + c);
    const double ss = 0.5 * (1.0 - c);
    Mat4 u;
    u << cc, -s, ss, 0,
         s,   c, -s, 0,
         ss,  s, cc, 0,
         0,   0,  0, 1;
    return u;
}

// Real antisymmetric generator K with exp(theta K) = symmetric_y_rotation(theta).
inline const Mat4& rotation_generator() {
    static const Mat4 k = [] {
        const double r = std::numbers::sqrt2 / 2.0;
        Mat4 m;
        m << 0, -r, 0, 0,
             r,  0, -r, 0,
             0,  r, 0, 0,
             0,  0, 0, 0;
        return m;
    }();
    return k;
}

inline TwoQubitState apply_symmetric_y_rotation(const TwoQubitState& rho, double theta) {
    if (theta == 0.0) return rho;
    const Mat4 u = symmetric_y_rotation(theta);
    return TwoQubitState(u * rho.matrix() * u.transpose());
}

inline double fidelity_t0(const TwoQubitState& rho) { return rho(kT0, kT0); }

// Closed form of <t0| U rho U^T |t0> for the symmetric y rotation.
inline double fidelity_after_rotation(const TwoQubitState& rho, double theta) {
    const double drive = std::sqrt(8.0) * (rho(kTMinus, kT0) - rho(kT0, kTPlus));
    const double depth = 1.0 - 3.0 * rho(kT0, kT0) - 2.0 * rho(kTMinus, kTPlus) - rho(kSinglet, kSinglet);
    return rho(kT0, kT0) + 0.25 * (drive * std::sin(2.0 * theta) + (1.0 - std::cos(2.0 * theta)) * depth);
}

// Wootters concurrence. Uses the symmetric form sqrt(rho) rho~ sqrt(rho) so a
// self-adjoint solver suffices (rho is real, so rho* = rho).
inline double concurrence(const TwoQubitState& rho) {
    const Mat4 comp = to_computational(rho);
    Eigen::SelfAdjointEigenSolver<Mat4> es(comp);
    const Vec4 roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Mat4 sqrt_rho = es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();

    Mat4 yy = Mat4::Zero();
    yy(0, 3) = -1;
    yy(1, 2) = 1;
    yy(2, 1) = 1;
    yy(3, 0) = -1;
    const Mat4 flipped = yy * comp * yy;
    const Mat4 r = sqrt_rho * flipped * sqrt_rho;

    Eigen::SelfAdjointEigenSolver<Mat4> er(0.5 * (r + r.transpose()), Eigen::EigenvaluesOnly);
    std::array<double, 4> lam{};
    for (int i = 0; i < 4; ++i) lam[i] = std::sqrt(std::max(0.0, er.eigenvalues()(i)));
    std::sort(lam.begin(), lam.end(), std::greater<>());
    return std::max(0.0, lam[0] - lam[1] - lam[2] - lam[3]);
}

// Invariance under |0> <-> |1> on both qubits.
inline bool is_01_symmetric(const TwoQubitState& rho, double tol) {
    return std::abs(rho(kTMinus, kTMinus) - rho(kTPlus, kTPlus)) <= tol &&
           std::abs(rho(kTMinus, kT0) - rho(kT0, kTPlus)) <= tol &&
           std::abs(rho(kTMinus, kSinglet) + rho(kTPlus, kSinglet)) <= tol &&
           std::abs(rho(kT0, kSinglet)) <= tol;
}

}  // namespace entangle
