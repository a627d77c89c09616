#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

#include "spherecov/asymmetry.hpp"
#include "spherecov/detail/json.hpp"
#include "spherecov/detail/parallel.hpp"
#include "spherecov/observation.hpp"
#include "spherecov/simulate.hpp"

namespace spherecov {

// Simple (zero-mean) co-kriging of one variable at one site.
struct PredictionResult {
  SpherePoint site = SpherePoint::UnitZ();
  int var = 0;
  double mean = 0.0;
  double variance = 0.0;
  double jitter_used = 0.0;
};

struct VariableScores {
  int var = 0;
  double mspe = 0.0;
  double lscore = 0.0;
  std::size_t n = 0;
};

struct CvScores {
  double mspe = 0.0;
  double lscore = 0.0;
  std::size_t n = 0;
  std::vector<VariableScores> per_variable;
};

struct CvRow {
  std::size_t index = 0;
  int var = 0;
  double observed = 0.0;
  double predicted = 0.0;
  double variance = 0.0;
  double error = 0.0;
};

struct CvResult {
  CvScores scores;
  std::vector<CvRow> rows;
  std::size_t variance_clamps = 0;
  double max_jitter = 0.0;
};

inline void to_json(Json& j, const VariableScores& v) {
  j = Json{{"var", v.var}, {"mspe", v.mspe}, {"lscore", v.lscore}, {"n", v.n}};
}

inline void to_json(Json& j, const CvScores& s) {
  j = Json{{"mspe", s.mspe}, {"lscore", s.lscore}, {"n", s.n}, {"per_variable", s.per_variable}};
}

inline void to_json(Json& j, const CvResult& r) {
  j = Json{{"scores", r.scores},
           {"variance_clamps", r.variance_clamps},
           {"max_jitter", r.max_jitter}};
}

[[nodiscard]] inline PredictionResult cokrige(const AsymmetricCovariance& cov,
                                              const ObservationSet& obs,
                                              const SpherePoint& target_site, int target_var) {
  obs.check_consistent();
  if (obs.size() == 0 || obs.values.size() == 0)
    throw std::invalid_argument("prediction needs observed values");
  if (target_var < 0 || target_var >= cov.base().p)
    throw std::invalid_argument("target variable out of range");

  const auto n = static_cast<Eigen::Index>(obs.size());
  PredictionResult out;
  out.site = target_site;
  out.var = target_var;

  const Eigen::MatrixXd sigma = build_block_cov(cov, obs).matrix;
  const Eigen::LLT<Eigen::MatrixXd> llt = jittered_llt(sigma, out.jitter_used);

  Eigen::MatrixXd rhs(n, 2);
  rhs.col(0) = obs.values;
  for (Eigen::Index r = 0; r < n; ++r)
    rhs(r, 1) = cov.cross_cov(target_var, obs.vars[static_cast<std::size_t>(r)], target_site,
                              obs.sites[static_cast<std::size_t>(r)]);
  const Eigen::MatrixXd sol = llt.solve(rhs);
  out.mean = rhs.col(1).dot(sol.col(0));
  const double prior = cov.cross_cov(target_var, target_var, target_site, target_site);
  out.variance = std::max(0.0, prior - rhs.col(1).dot(sol.col(1)));
  return out;
}

// Drop-one cross-validation: each observation is predicted from all remaining
// ones, with a fresh factorization per held-out point. Variances below 1e-12
// are clamped for the log score and counted.
[[nodiscard]] inline CvResult drop_one_cv(const AsymmetricCovariance& cov,
                                          const ObservationSet& obs, int threads = 1) {
  obs.check_consistent();
  if (obs.size() < 2) throw std::invalid_argument("drop-one needs at least two observations");
  if (obs.values.size() == 0) throw std::invalid_argument("drop-one needs observed values");

  const auto n = static_cast<Eigen::Index>(obs.size());
  // full matrix once; its entries are exactly what a per-point rebuild yields
  const Eigen::MatrixXd sigma = build_block_cov(cov, obs).matrix;

  CvResult result;
  result.rows.resize(static_cast<std::size_t>(n));
  std::vector<double> jitters(static_cast<std::size_t>(n), 0.0);

  detail::parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t held) {
    const auto m = static_cast<Eigen::Index>(held);
    Eigen::MatrixXd sub(n - 1, n - 1);
    Eigen::MatrixXd rhs(n - 1, 2);
    Eigen::Index at_r = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == m) continue;
      Eigen::Index at_c = 0;
      for (Eigen::Index c = 0; c < n; ++c) {
        if (c == m) continue;
        sub(at_r, at_c) = sigma(r, c);
        ++at_c;
      }
      rhs(at_r, 0) = obs.values[r];
      rhs(at_r, 1) = sigma(r, m);
      ++at_r;
    }
    const Eigen::LLT<Eigen::MatrixXd> llt = jittered_llt(sub, jitters[held]);
    const Eigen::MatrixXd sol = llt.solve(rhs);

    CvRow& row = result.rows[held];
    row.index = held;
    row.var = obs.vars[held];
    row.observed = obs.values[m];
    row.predicted = rhs.col(1).dot(sol.col(0));
    row.variance = std::max(0.0, sigma(m, m) - rhs.col(1).dot(sol.col(1)));
    row.error = row.observed - row.predicted;
  });

  constexpr double variance_floor = 1e-12;
  const int p = cov.base().p;
  std::vector<VariableScores> per(static_cast<std::size_t>(p));
  for (int v = 0; v < p; ++v) per[static_cast<std::size_t>(v)].var = v;
  for (const CvRow& row : result.rows) {
    double v = row.variance;
    if (v <= variance_floor) {
      v = variance_floor;
      ++result.variance_clamps;
    }
    const double sq = row.error * row.error;
    const double ls = 0.5 * std::log(2.0 * pi * v) + sq / (2.0 * v);
    result.scores.mspe += sq;
    result.scores.lscore += ls;
    ++result.scores.n;
    VariableScores& vs = per[static_cast<std::size_t>(row.var)];
    vs.mspe += sq;
    vs.lscore += ls;
    ++vs.n;
  }
  result.scores.mspe /= static_cast<double>(result.scores.n);
  result.scores.lscore /= static_cast<double>(result.scores.n);
  for (VariableScores& vs : per) {
    if (vs.n == 0) continue;
    vs.mspe /= static_cast<double>(vs.n);
    vs.lscore /= static_cast<double>(vs.n);
    result.scores.per_variable.push_back(vs);
  }
  result.max_jitter = *std::max_element(jitters.begin(), jitters.end());
  return result;
}

// Per-point detail table; variable ids are 1-based in files, as in the
// observation format.
inline void write_cv_csv(const CvResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(17);
  out << "index,var,observed,predicted,variance,error\n";
  for (const CvRow& row : result.rows)
    out << row.index << ',' << row.var + 1 << ',' << row.observed << ',' << row.predicted << ','
        << row.variance << ',' << row.error << '\n';
  if (!out) throw std::runtime_error("failed while writing " + path);
}

}  // namespace spherecov
