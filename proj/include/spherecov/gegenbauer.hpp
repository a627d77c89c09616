#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "spherecov/geometry.hpp"
#include "spherecov/radial_models.hpp"

namespace spherecov {

// Ultraspherical basis on the sphere S^dim: index lambda = (dim - 1) / 2.
// lambda = 0 uses the cosine convention P_k(cos t) = cos(k t); lambda > 0
// follows the three-term recurrence
//   k P_k = 2 mu (k + lambda - 1) P_{k-1} - (k + 2 lambda - 2) P_{k-2},
// started from P_0 = 1, P_1 = 2 lambda mu.
struct UltrasphericalBasis {
  int dim;
  double lambda;

  explicit UltrasphericalBasis(int d) : dim(d), lambda((d - 1) / 2.0) {
    if (d != 1 && d != 2) throw std::invalid_argument("basis supports spheres of dimension 1 or 2");
  }
};

// Fills values[0..kmax] with P_k at mu = cos(theta).
inline void ultraspherical_all(const UltrasphericalBasis& basis, int kmax, double mu,
                               std::vector<double>& values) {
  values.resize(static_cast<std::size_t>(kmax) + 1);
  if (basis.lambda == 0.0) {
    const double theta = std::acos(std::clamp(mu, -1.0, 1.0));
    for (int k = 0; k <= kmax; ++k) values[static_cast<std::size_t>(k)] = std::cos(k * theta);
    return;
  }
  values[0] = 1.0;
  if (kmax == 0) return;
  values[1] = 2.0 * basis.lambda * mu;
  for (int k = 2; k <= kmax; ++k)
    values[static_cast<std::size_t>(k)] =
        (2.0 * mu * (k + basis.lambda - 1.0) * values[static_cast<std::size_t>(k - 1)] -
         (k + 2.0 * basis.lambda - 2.0) * values[static_cast<std::size_t>(k - 2)]) /
        k;
}

[[nodiscard]] inline double ultraspherical_eval(const UltrasphericalBasis& basis, int k, double mu) {
  std::vector<double> values;
  ultraspherical_all(basis, k, mu, values);
  return values[static_cast<std::size_t>(k)];
}

// Squared norm of P_k under the surface weight sin(theta)^(dim - 1) on [0, pi].
[[nodiscard]] inline double basis_norm(const UltrasphericalBasis& basis, int k) {
  if (basis.dim == 1) return k == 0 ? pi : pi / 2.0;
  return 2.0 / (2.0 * k + 1.0);
}

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
[[nodiscard]] inline QuadratureRule gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("quadrature needs at least one node");
  QuadratureRule rule;
  rule.nodes.resize(static_cast<std::size_t>(n));
  rule.weights.resize(static_cast<std::size_t>(n));
  const auto value_and_slope = [n](double x) {
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    return std::pair{p1, n * (x * p1 - p0) / (x * x - 1.0)};
  };
  for (int i = 0; i < n; ++i) {
    double x = n == 1 ? 0.0 : std::cos(pi * (i + 0.75) / (n + 0.5));
    for (int iter = 0; iter < 100; ++iter) {
      const auto [p, dp] = value_and_slope(x);
      const double step = p / dp;
      x -= step;
      if (std::abs(step) < 1e-15) break;
    }
    const double dp = n == 1 ? 1.0 : value_and_slope(x).second;
    rule.nodes[static_cast<std::size_t>(i)] = x;
    rule.weights[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return rule;
}

// The same rule mapped onto [lo, hi].
[[nodiscard]] inline QuadratureRule gauss_legendre_on(int n, double lo, double hi) {
  QuadratureRule rule = gauss_legendre(n);
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    rule.nodes[i] = mid + half * rule.nodes[i];
    rule.weights[i] *= half;
  }
  return rule;
}

// Expansion of a matrix covariance over the ultraspherical basis: coefficient
// matrices for degrees 0..kmax plus the worst reconstruction error seen on a
// check grid.
struct SchoenbergSequence {
  int dim = 2;
  int kmax = 0;
  std::vector<Eigen::MatrixXd> coeff;
  double residual = 0.0;
};

// Projects the covariance onto the basis with composite Gauss-Legendre
// quadrature (16-node panels covering [0, pi] with n_quad nodes in total).
[[nodiscard]] inline SchoenbergSequence extract_schoenberg(const RadialModelSpec& spec, int dim,
                                                           int kmax = 50, int n_quad = 400) {
  detail::check_structure(spec);
  if (kmax < 0) throw std::invalid_argument("kmax must be nonnegative");
  if (n_quad < 16) throw std::invalid_argument("n_quad must be at least 16");
  const UltrasphericalBasis basis(dim);

  // Panels never straddle a support edge, where compactly supported
  // correlations lose smoothness.
  std::vector<double> cuts{0.0, pi};
  if (spec.family == "wendland")
    for (int i = 0; i < spec.p; ++i)
      for (int j = 0; j < spec.p; ++j)
        if (spec.c_cross(i, j) > 0.0 && spec.c_cross(i, j) < pi) cuts.push_back(spec.c_cross(i, j));
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  const int panels = (n_quad + 15) / 16;
  QuadratureRule rule;
  for (std::size_t seg = 0; seg + 1 < cuts.size(); ++seg) {
    const double lo = cuts[seg], hi = cuts[seg + 1];
    const int local_panels =
        std::max(1, static_cast<int>(std::lround(panels * (hi - lo) / pi)));
    for (int panel = 0; panel < local_panels; ++panel) {
      const QuadratureRule local = gauss_legendre_on(
          16, lo + (hi - lo) * panel / local_panels, lo + (hi - lo) * (panel + 1) / local_panels);
      rule.nodes.insert(rule.nodes.end(), local.nodes.begin(), local.nodes.end());
      rule.weights.insert(rule.weights.end(), local.weights.begin(), local.weights.end());
    }
  }

  SchoenbergSequence seq;
  seq.dim = dim;
  seq.kmax = kmax;
  seq.coeff.assign(static_cast<std::size_t>(kmax) + 1, Eigen::MatrixXd::Zero(spec.p, spec.p));

  std::vector<double> poly;
  for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
    const double theta = rule.nodes[q];
    const double weight =
        rule.weights[q] * (dim == 2 ? std::sin(theta) : 1.0);
    ultraspherical_all(basis, kmax, std::cos(theta), poly);
    Eigen::MatrixXd cov(spec.p, spec.p);
    for (int i = 0; i < spec.p; ++i)
      for (int j = i; j < spec.p; ++j) cov(i, j) = cov(j, i) = radial_eval(spec, i, j, theta);
    for (int k = 0; k <= kmax; ++k)
      seq.coeff[static_cast<std::size_t>(k)] += weight * poly[static_cast<std::size_t>(k)] * cov;
  }
  for (int k = 0; k <= kmax; ++k) seq.coeff[static_cast<std::size_t>(k)] /= basis_norm(basis, k);

  const int checks = 181;
  for (int t = 0; t < checks; ++t) {
    const double theta = pi * t / (checks - 1.0);
    ultraspherical_all(basis, kmax, std::cos(theta), poly);
    for (int i = 0; i < spec.p; ++i)
      for (int j = i; j < spec.p; ++j) {
        double rebuilt = 0.0;
        for (int k = 0; k <= kmax; ++k)
          rebuilt += seq.coeff[static_cast<std::size_t>(k)](i, j) * poly[static_cast<std::size_t>(k)];
        seq.residual = std::max(seq.residual, std::abs(rebuilt - radial_eval(spec, i, j, theta)));
      }
  }
  return seq;
}

// Reconstructs C(i, j)(theta) from the expansion.
[[nodiscard]] inline double schoenberg_reconstruct(const SchoenbergSequence& seq, int i, int j,
                                                   double theta) {
  const UltrasphericalBasis basis(seq.dim);
  std::vector<double> poly;
  ultraspherical_all(basis, seq.kmax, std::cos(theta), poly);
  double value = 0.0;
  for (int k = 0; k <= seq.kmax; ++k)
    value += seq.coeff[static_cast<std::size_t>(k)](i, j) * poly[static_cast<std::size_t>(k)];
  return value;
}

struct PsdCheckResult {
  bool ok = true;
  double tolerance = 1e-6;
  double min_eigenvalue = 0.0;  // most negative eigenvalue across all degrees
  int worst_degree = 0;
  std::vector<double> min_eig_per_degree;
};

// A covariance is admissible exactly when every coefficient matrix is
// positive semidefinite; eigenvalues below -tolerance fail the check.
[[nodiscard]] inline PsdCheckResult check_psd_sequence(const SchoenbergSequence& seq,
                                                       double tolerance = 1e-6) {
  PsdCheckResult result;
  result.tolerance = tolerance;
  result.min_eigenvalue = std::numeric_limits<double>::infinity();
  result.min_eig_per_degree.reserve(seq.coeff.size());
  for (std::size_t k = 0; k < seq.coeff.size(); ++k) {
    const Eigen::MatrixXd sym = 0.5 * (seq.coeff[k] + seq.coeff[k].transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    result.min_eig_per_degree.push_back(lo);
    if (lo < result.min_eigenvalue) {
      result.min_eigenvalue = lo;
      result.worst_degree = static_cast<int>(k);
    }
  }
  result.ok = result.min_eigenvalue >= -tolerance;
  return result;
}

}  // namespace spherecov
