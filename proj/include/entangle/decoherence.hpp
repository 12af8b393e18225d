#pragma once

// Qubit relaxation and dephasing:
//   L rho = sum_i [ 1/(2 Tphi_i) D[sz_i] rho + 1/T1_i D[s-_i] rho ]
// with s- = |1><0| lowering toward the ground state |1>.

#include <array>
#include <cmath>
#include <limits>

#include "entangle/error.hpp"
#include "entangle/state.hpp"

namespace entangle {

struct DecoherenceParams {
    static constexpr double kNever = std::numeric_limits<double>::infinity();

    std::array<double, 2> t1{kNever, kNever};    // us
    std::array<double, 2> tphi{kNever, kNever};  // us

    void validate() const {
        for (int q = 0; q < 2; ++q) {
            if (!(t1[q] > 0.0) || !(tphi[q] > 0.0)) {
                throw DomainError("coherence times must be positive (or infinite)");
            }
        }
    }

    bool is_trivial() const {
        return std::isinf(t1[0]) && std::isinf(t1[1]) && std::isinf(tphi[0]) && std::isinf(tphi[1]);
    }

    DecoherenceParams scaled(double s) const {
        DecoherenceParams out = *this;
        for (int q = 0; q < 2; ++q) {
            out.t1[q] *= s;
            out.tphi[q] *= s;
        }
        return out;
    }
};

namespace detail {

inline Mat4 kron2(const Eigen::Matrix2d& a, const Eigen::Matrix2d& b) {
    Mat4 out;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                for (int l = 0; l < 2; ++l) out(2 * i + k, 2 * j + l) = a(i, j) * b(k, l);
    return out;
}

inline Mat4 on_qubit(int q, const Eigen::Matrix2d& op) {
    return q == 0 ? kron2(op, Eigen::Matrix2d::Identity()) : kron2(Eigen::Matrix2d::Identity(), op);
}

inline Mat4 dissipator(const Mat4& l, const Mat4& rho) {
    const Mat4 ll = l.transpose() * l;
    return l * rho * l.transpose() - 0.5 * (ll * rho + rho * ll);
}

inline Eigen::Matrix2d sigma_z() {
    Eigen::Matrix2d m;
    m << 1, 0, 0, -1;
    return m;
}

inline Eigen::Matrix2d sigma_lower() {
    Eigen::Matrix2d m;
    m << 0, 0, 1, 0;
    return m;
}

}  // namespace detail

// L rho, evaluated literally in the computational basis.
inline Mat4 lindblad_generator(const TwoQubitState& rho, const DecoherenceParams& params) {
    const Mat4 comp = to_computational(rho);
    Mat4 out = Mat4::Zero();
    for (int q = 0; q < 2; ++q) {
        if (std::isfinite(params.tphi[q])) {
            out += 1.0 / (2.0 * params.tphi[q]) * detail::dissipator(detail::on_qubit(q, detail::sigma_z()), comp);
        }
        if (std::isfinite(params.t1[q])) {
            out += 1.0 / params.t1[q] * detail::dissipator(detail::on_qubit(q, detail::sigma_lower()), comp);
        }
    }
    const Mat4& b = coupled_to_computational();
    return b.transpose() * out * b;
}

namespace detail {

// exp(L dt) applied to a coupled-basis matrix, without renormalization.
// Each qubit's relaxation and dephasing commute, so the flow is the product
// of the exact amplitude-damping and phase-damping channels.
inline Mat4 lindblad_map(const Mat4& coupled, const DecoherenceParams& params, double dt) {
    const Mat4& b = coupled_to_computational();
    Mat4 comp = b * coupled * b.transpose();
    for (int q = 0; q < 2; ++q) {
        if (std::isfinite(params.t1[q])) {
            const double p = -std::expm1(-dt / params.t1[q]);
            Eigen::Matrix2d a0;
            a0 << std::sqrt(1.0 - p), 0, 0, 1;
            Eigen::Matrix2d a1;
            a1 << 0, 0, std::sqrt(p), 0;
            const Mat4 k0 = on_qubit(q, a0);
            const Mat4 k1 = on_qubit(q, a1);
            comp = k0 * comp * k0.transpose() + k1 * comp * k1.transpose();
        }
        if (std::isfinite(params.tphi[q])) {
            const double lambda = std::exp(-dt / params.tphi[q]);
            const Mat4 z = on_qubit(q, sigma_z());
            comp = 0.5 * (1.0 + lambda) * comp + 0.5 * (1.0 - lambda) * z * comp * z;
        }
    }
    return b.transpose() * comp * b;
}

}  // namespace detail

// exp(L dt) rho.
inline TwoQubitState lindblad_step(const TwoQubitState& rho, const DecoherenceParams& params, double dt) {
    if (!(dt >= 0.0)) throw DomainError("lindblad_step needs dt >= 0");
    if (params.is_trivial() || dt == 0.0) return rho;
    return TwoQubitState(detail::lindblad_map(rho.matrix(), params, dt)).normalized();
}

// lindblad_step for a fixed dt, precomputed as a 16 x 16 superoperator.
class LindbladChannel {
  public:
    LindbladChannel(const DecoherenceParams& params, double dt) : trivial_(params.is_trivial() || dt == 0.0) {
        params.validate();
        if (!(dt >= 0.0)) throw DomainError("lindblad channel needs dt >= 0");
        for (int c = 0; c < 16; ++c) {
            Mat4 unit = Mat4::Zero();
            unit(c % 4, c / 4) = 1.0;
            const Mat4 image = detail::lindblad_map(unit, params, dt);
            super_.col(c) = Eigen::Map<const Eigen::Matrix<double, 16, 1>>(image.data());
        }
    }

    TwoQubitState apply(const TwoQubitState& rho) const {
        if (trivial_) return rho;
        const Eigen::Matrix<double, 16, 1> out =
            super_ * Eigen::Map<const Eigen::Matrix<double, 16, 1>>(rho.matrix().data());
        return TwoQubitState(Mat4(Eigen::Map<const Mat4>(out.data()))).normalized();
    }

  private:
    bool trivial_;
    Eigen::Matrix<double, 16, 16> super_;
};

}  // namespace entangle
