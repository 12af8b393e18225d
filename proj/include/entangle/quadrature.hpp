#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "entangle/error.hpp"

namespace entangle {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

// Composite Simpson on [a, b] with an odd node count.
inline QuadratureRule simpson_rule(double a, double b, int nodes) {
    if (nodes < 3) throw DomainError("Simpson rule needs at least 3 nodes");
    if (nodes % 2 == 0) ++nodes;
    QuadratureRule r;
    r.nodes.resize(nodes);
    r.weights.resize(nodes);
    const double h = (b - a) / (nodes - 1);
    for (int i = 0; i < nodes; ++i) {
        r.nodes[i] = a + h * i;
        const double w = (i == 0 || i == nodes - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        r.weights[i] = w * h / 3.0;
    }
    return r;
}

// Gauss-Legendre on [a, b] via Golub-Welsch.
inline QuadratureRule gauss_legendre_rule(double a, double b, int nodes) {
    if (nodes < 1) throw DomainError("Gauss-Legendre rule needs at least one node");
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(nodes, nodes);
    for (int i = 1; i < nodes; ++i) {
        const double beta = i / std::sqrt(4.0 * i * i - 1.0);
        jacobi(i, i - 1) = beta;
        jacobi(i - 1, i) = beta;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
    QuadratureRule r;
    r.nodes.resize(nodes);
    r.weights.resize(nodes);
    const double half = 0.5 * (b - a);
    const double mid = 0.5 * (a + b);
    for (int i = 0; i < nodes; ++i) {
        const double v0 = es.eigenvectors()(0, i);
        r.nodes[i] = mid + half * es.eigenvalues()(i);
        r.weights[i] = 2.0 * v0 * v0 * half;
    }
    return r;
}

// Composite Gauss-Legendre: `panels` equal panels of `per_panel` nodes each.
inline QuadratureRule composite_gauss_legendre(double a, double b, int panels, int per_panel) {
    const QuadratureRule unit = gauss_legendre_rule(-1.0, 1.0, per_panel);
    QuadratureRule r;
    const double width = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
        const double lo = a + p * width;
        for (int i = 0; i < per_panel; ++i) {
            r.nodes.push_back(lo + 0.5 * width * (unit.nodes[i] + 1.0));
            r.weights.push_back(0.5 * width * unit.weights[i]);
        }
    }
    return r;
}

}  // namespace entangle
