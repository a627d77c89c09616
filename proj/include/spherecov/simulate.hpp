#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "spherecov/asymmetry.hpp"
#include "spherecov/detail/parallel.hpp"
#include "spherecov/observation.hpp"
#include "spherecov/rng.hpp"

namespace spherecov {

inline constexpr double jitter_ladder[] = {0.0, 1e-10, 1e-8, 1e-6};

// Cholesky factor of the matrix after climbing the jitter ladder: each rung
// adds rung * (trace / n) to the diagonal until the factorization succeeds.
// jitter_used reports the absolute amount added.
[[nodiscard]] inline Eigen::LLT<Eigen::MatrixXd> jittered_llt(const Eigen::MatrixXd& cov,
                                                              double& jitter_used) {
  const double scale = cov.trace() / static_cast<double>(cov.rows());
  for (const double rung : jitter_ladder) {
    const double jitter = rung * scale;
    Eigen::LLT<Eigen::MatrixXd> llt(
        jitter == 0.0
            ? cov
            : Eigen::MatrixXd(cov + jitter * Eigen::MatrixXd::Identity(cov.rows(), cov.cols())));
    if (llt.info() == Eigen::Success) {
      jitter_used = jitter;
      return llt;
    }
  }
  throw std::runtime_error("covariance is not positive definite even with maximal jitter");
}

struct SimulationResult {
  ObservationSet obs;
  double jitter_used = 0.0;
};

// Exact simulation of the field at the design: values = L e with L the
// (jittered) Cholesky factor and e standard normal draws from the counter
// generator, one counter per observation.
[[nodiscard]] inline SimulationResult simulate_field(const AsymmetricCovariance& cov,
                                                     const ObservationSet& design,
                                                     std::uint64_t seed, std::uint64_t stream = 0) {
  const BlockCov block = build_block_cov(cov, design);
  SimulationResult result;
  result.obs = design;
  const Eigen::LLT<Eigen::MatrixXd> llt = jittered_llt(block.matrix, result.jitter_used);

  const CounterRng rng(seed, stream);
  const auto n = static_cast<Eigen::Index>(design.size());
  Eigen::VectorXd noise(n);
  for (Eigen::Index i = 0; i < n; ++i) noise[i] = rng.normal(static_cast<std::uint64_t>(i));
  result.obs.values = llt.matrixL() * noise;
  return result;
}

struct MomentCheck {
  Eigen::MatrixXd expected;
  Eigen::MatrixXd empirical;
  Eigen::MatrixXd standard_error;
  double max_z = 0.0;  // worst |empirical - expected| in standard-error units
};

// Compares the replicate-averaged second moments of simulated fields against
// the model covariance. Replicate r uses stream r, so the set of draws is
// independent of the evaluation schedule.
[[nodiscard]] inline MomentCheck simulate_moment_check(const AsymmetricCovariance& cov,
                                                       const ObservationSet& design, int reps,
                                                       std::uint64_t seed, int threads = 1) {
  if (reps < 2) throw std::invalid_argument("moment check needs at least two replicates");
  const auto n = static_cast<Eigen::Index>(design.size());
  MomentCheck check;
  check.expected = build_block_cov(cov, design).matrix;

  std::vector<Eigen::MatrixXd> partial(static_cast<std::size_t>(reps));
  detail::parallel_for(static_cast<std::size_t>(reps), threads, [&](std::size_t r) {
    const Eigen::VectorXd z = simulate_field(cov, design, seed, r).obs.values;
    partial[r] = z * z.transpose();
  });
  check.empirical = Eigen::MatrixXd::Zero(n, n);
  for (const auto& m : partial) check.empirical += m;
  check.empirical /= static_cast<double>(reps);

  check.standard_error.resize(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) {
      const double var_ab = check.expected(a, a) * check.expected(b, b) +
                            check.expected(a, b) * check.expected(a, b);
      check.standard_error(a, b) = std::sqrt(var_ab / static_cast<double>(reps));
      const double gap = std::abs(check.empirical(a, b) - check.expected(a, b));
      if (check.standard_error(a, b) > 0.0)
        check.max_z = std::max(check.max_z, gap / check.standard_error(a, b));
    }
  return check;
}

}  // namespace spherecov
