#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spherecov/detail/json.hpp"
#include "spherecov/detail/parallel.hpp"
#include "spherecov/estimate.hpp"
#include "spherecov/observation.hpp"
#include "spherecov/predict.hpp"
#include "spherecov/radial_models.hpp"
#include "spherecov/simulate.hpp"

namespace spherecov {

// Settings shared by the study drivers: which presets and variants to run,
// the true-parameter table (one entry per scenario cell), the design grid,
// replicate count, seeds, and fitting controls. An empty out_dir keeps
// everything in memory; otherwise per-replicate results land under out_dir
// and later runs reuse them.
struct ExperimentConfig {
  std::vector<std::string> models = {"M1"};
  std::vector<Variant> variants = {Variant::sym_sep, Variant::sym_nonsep, Variant::asym_sep,
                                   Variant::asym_nonsep};
  std::vector<ParameterVector> truths;
  int grid_n = 15;
  bool pole_safe = true;
  int dim = 2;
  int replicates = 100;
  std::uint64_t sim_seed = 500;
  std::uint64_t fit_seed = 100;
  double cutoff_rad = 1.0;
  int starts = 5;
  int sym_starts = 3;
  int budget = 1500;
  int threads = 1;
  std::string out_dir;

  void check(bool need_truths = true) const {
    if (replicates < 1) throw std::invalid_argument("config needs at least one replicate");
    if (models.empty()) throw std::invalid_argument("config needs at least one model preset");
    if (dim != 1 && dim != 2) throw std::invalid_argument("config dim must be 1 or 2");
    if (grid_n < 2) throw std::invalid_argument("config needs grid_n >= 2");
    if (!(cutoff_rad > 0.0)) throw std::invalid_argument("config needs a positive cutoff");
    if (starts < 1 || sym_starts < 1) throw std::invalid_argument("config needs starts >= 1");
    if (budget < 0) throw std::invalid_argument("config needs a nonnegative budget");
    if (need_truths && truths.empty())
      throw std::invalid_argument("config needs a true-parameter table");
    for (const std::string& m : models) {
      const RadialModelSpec tmpl = make_preset(m);
      for (const ParameterVector& pv : truths) {
        if (pv.dim != dim) throw std::invalid_argument("truth entry dimension differs from config");
        const ValidityReport report = validate_params(realize_model(tmpl, pv));
        if (!report.ok)
          throw std::invalid_argument("truth entry invalid for " + m + ": " + report.summary());
      }
    }
  }
};

inline void to_json(Json& j, const ExperimentConfig& cfg) {
  std::vector<std::string> variant_names;
  variant_names.reserve(cfg.variants.size());
  for (Variant v : cfg.variants) variant_names.push_back(variant_name(v));
  j = Json{{"models", cfg.models},
           {"variants", variant_names},
           {"truths", cfg.truths},
           {"grid_n", cfg.grid_n},
           {"pole_safe", cfg.pole_safe},
           {"dim", cfg.dim},
           {"replicates", cfg.replicates},
           {"sim_seed", cfg.sim_seed},
           {"fit_seed", cfg.fit_seed},
           {"cutoff_rad", cfg.cutoff_rad},
           {"starts", cfg.starts},
           {"sym_starts", cfg.sym_starts},
           {"budget", cfg.budget},
           {"threads", cfg.threads},
           {"out_dir", cfg.out_dir}};
}

inline void from_json(const Json& j, ExperimentConfig& cfg) {
  cfg = ExperimentConfig{};
  cfg.models = j.value("models", cfg.models);
  if (j.contains("variants")) {
    cfg.variants.clear();
    for (const auto& name : j.at("variants"))
      cfg.variants.push_back(variant_from_name(name.get<std::string>()));
  }
  if (j.contains("truths")) cfg.truths = j.at("truths").get<std::vector<ParameterVector>>();
  cfg.grid_n = j.value("grid_n", cfg.grid_n);
  cfg.pole_safe = j.value("pole_safe", cfg.pole_safe);
  cfg.dim = j.value("dim", cfg.dim);
  cfg.replicates = j.value("replicates", cfg.replicates);
  cfg.sim_seed = j.value("sim_seed", cfg.sim_seed);
  cfg.fit_seed = j.value("fit_seed", cfg.fit_seed);
  cfg.cutoff_rad = j.value("cutoff_rad", cfg.cutoff_rad);
  cfg.starts = j.value("starts", cfg.starts);
  cfg.sym_starts = j.value("sym_starts", cfg.sym_starts);
  cfg.budget = j.value("budget", cfg.budget);
  cfg.threads = j.value("threads", cfg.threads);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
}

// Scenario cell at the standard study setting: unit variances, scales 0.1 and
// 0.2 (a single 0.1 for separable variants), displacement about the y axis.
[[nodiscard]] inline ParameterVector standard_truth(Variant variant, double eta, double rho12,
                                                    int dim = 2) {
  ParameterVector pv;
  pv.variant = variant;
  pv.dim = dim;
  pv.sigma2_1 = pv.sigma2_2 = 1.0;
  pv.rho12 = rho12;
  pv.c11 = 0.1;
  pv.c22 = variant_separable(variant) ? 0.1 : 0.2;
  if (variant_asymmetric(variant)) pv.asym.eta = eta;
  return pv;
}

[[nodiscard]] inline ExperimentConfig default_bias_config() {
  ExperimentConfig cfg;
  cfg.models = {"M1"};
  cfg.truths = {standard_truth(Variant::asym_nonsep, 0.1, 0.5)};
  return cfg;
}

[[nodiscard]] inline ExperimentConfig default_score_config() {
  ExperimentConfig cfg;
  cfg.models = {"M1", "M2", "M3"};
  for (double rho : {0.25, 0.5})
    for (double eta : {0.1, 0.6})
      cfg.truths.push_back(standard_truth(Variant::asym_nonsep, eta, rho));
  return cfg;
}

[[nodiscard]] inline ObservationSet experiment_design(const ExperimentConfig& cfg) {
  const std::vector<SpherePoint> sites =
      cfg.dim == 2 ? (cfg.pole_safe ? grid_s2_polesafe(cfg.grid_n) : grid_s2_literal(cfg.grid_n))
                   : grid_s1(cfg.grid_n);
  return collocated_design(sites, 2, cfg.dim);
}

// Named free parameters of a fit, in a fixed reporting order.
[[nodiscard]] inline std::vector<std::pair<std::string, double>> named_parameters(
    const ParameterVector& pv) {
  std::vector<std::pair<std::string, double>> out = {{"sigma2_1", pv.sigma2_1},
                                                     {"sigma2_2", pv.sigma2_2},
                                                     {"rho12", pv.rho12},
                                                     {"c11", pv.c11}};
  if (!variant_separable(pv.variant)) out.emplace_back("c22", pv.c22);
  if (variant_asymmetric(pv.variant)) {
    out.emplace_back("eta", pv.asym.eta);
    if (pv.dim == 2) {
      out.emplace_back("alpha1", pv.asym.alpha1);
      out.emplace_back("alpha2", pv.asym.alpha2);
    }
  }
  return out;
}

namespace detail {

// Linear-interpolation quantile of a sorted sample.
[[nodiscard]] inline double quantile_sorted(const std::vector<double>& x, double q) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (x.size() == 1) return x.front();
  const double pos = q * static_cast<double>(x.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, x.size() - 1);
  const double frac = pos - std::floor(pos);
  return x[lo] + frac * (x[hi] - x[lo]);
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

[[nodiscard]] inline MeanSe mean_se(const std::vector<double>& x) {
  MeanSe out;
  if (x.empty()) return out;
  for (double v : x) out.mean += v;
  out.mean /= static_cast<double>(x.size());
  if (x.size() < 2) return out;
  double ss = 0.0;
  for (double v : x) ss += (v - out.mean) * (v - out.mean);
  out.se = std::sqrt(ss / static_cast<double>(x.size() - 1) / static_cast<double>(x.size()));
  return out;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("failed while writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

[[nodiscard]] inline std::optional<Json> try_load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  return j;
}

}  // namespace detail

// Distribution summary of one parameter across replicates: the recorded
// quantity is estimate minus truth; the middle-95% interval is reported on
// the estimate scale. The axis azimuth is unwrapped around the truth before
// summarizing so a circular seam cannot split the sample.
struct ParameterSummary {
  std::string name;
  double truth = 0.0;
  std::size_t n = 0;
  double mean_bias = 0.0;
  double bias_median = 0.0;
  double est_lo95 = 0.0;
  double est_q25 = 0.0;
  double est_median = 0.0;
  double est_q75 = 0.0;
  double est_hi95 = 0.0;
};

inline void to_json(Json& j, const ParameterSummary& s) {
  j = Json{{"name", s.name},           {"truth", s.truth},   {"n", s.n},
           {"mean_bias", s.mean_bias}, {"bias_median", s.bias_median},
           {"est_lo95", s.est_lo95},   {"est_q25", s.est_q25},
           {"est_median", s.est_median}, {"est_q75", s.est_q75},
           {"est_hi95", s.est_hi95}};
}

struct BiasCell {
  std::string model;
  ParameterVector truth;
  std::size_t replicates = 0;
  std::size_t failures = 0;
  bool valid = true;
  std::vector<ParameterSummary> parameters;
};

inline void to_json(Json& j, const BiasCell& c) {
  j = Json{{"model", c.model},           {"truth", c.truth},   {"replicates", c.replicates},
           {"failures", c.failures},     {"valid", c.valid},   {"parameters", c.parameters}};
}

struct BiasStudyResult {
  std::vector<BiasCell> cells;
  bool valid = true;
};

inline void to_json(Json& j, const BiasStudyResult& r) {
  j = Json{{"cells", r.cells}, {"valid", r.valid}};
}

namespace detail {

struct RepOutcome {
  bool done = false;
  bool ok = false;
  std::string error;
  Json payload;
};

// Runs one task per (cell, replicate), reusing any per-replicate file whose
// key matches, and writes fresh results atomically. compute(cell, rep) must
// return the payload Json; key(cell) identifies the settings the file depends
// on.
template <class KeyFn, class ComputeFn>
[[nodiscard]] inline std::vector<std::vector<RepOutcome>> run_replicates(
    std::size_t n_cells, int replicates, int threads, const std::string& dir,
    const std::string& prefix, KeyFn&& key, ComputeFn&& compute) {
  const auto reps = static_cast<std::size_t>(replicates);
  std::vector<std::vector<RepOutcome>> out(n_cells, std::vector<RepOutcome>(reps));
  const bool persist = !dir.empty();
  if (persist) std::filesystem::create_directories(dir);

  auto rep_path = [&](std::size_t c, std::size_t r) {
    return dir + "/" + prefix + "_cell" + std::to_string(c) + "_rep" + std::to_string(r) + ".json";
  };

  if (persist) {
    for (std::size_t c = 0; c < n_cells; ++c) {
      const Json k = key(c);
      for (std::size_t r = 0; r < reps; ++r) {
        const std::optional<Json> j = try_load_json(rep_path(c, r));
        if (!j || !j->is_object() || j->value("cell", -1) != static_cast<int>(c) ||
            j->value("rep", -1) != static_cast<int>(r) || j->value("key", Json{}) != k)
          continue;
        RepOutcome& slot = out[c][r];
        slot.done = true;
        slot.ok = j->value("ok", false);
        slot.error = j->value("error", std::string{});
        slot.payload = j->value("payload", Json{});
      }
    }
  }

  parallel_for(n_cells * reps, threads, [&](std::size_t idx) {
    const std::size_t c = idx / reps;
    const std::size_t r = idx % reps;
    RepOutcome& slot = out[c][r];
    if (slot.done) return;
    try {
      slot.payload = compute(c, r);
      slot.ok = true;
    } catch (const std::exception& e) {
      slot.error = e.what();
    }
    slot.done = true;
    if (persist) {
      Json j{{"cell", c}, {"rep", r},         {"key", key(c)},
             {"ok", slot.ok}, {"error", slot.error}, {"payload", slot.payload}};
      write_text_atomic(rep_path(c, r), j.dump(2) + "\n");
    }
  });
  return out;
}

}  // namespace detail

// Simulates each scenario cell under its true parameters, fits the matching
// variant initialized at the truth, and summarizes estimate minus truth per
// parameter. Replicate failures are recorded; a cell with more than 20%
// failures is marked invalid, as is the whole run.
[[nodiscard]] inline BiasStudyResult run_bias_study(const ExperimentConfig& cfg) {
  cfg.check();
  const ObservationSet design = experiment_design(cfg);
  const std::size_t n_cells = cfg.models.size() * cfg.truths.size();
  const auto reps = static_cast<std::size_t>(cfg.replicates);

  auto cell_model = [&](std::size_t c) { return cfg.models[c / cfg.truths.size()]; };
  auto cell_truth = [&](std::size_t c) -> const ParameterVector& {
    return cfg.truths[c % cfg.truths.size()];
  };
  auto key = [&](std::size_t c) {
    return Json{{"study", "bias"},        {"model", cell_model(c)},
                {"truth", cell_truth(c)}, {"grid_n", cfg.grid_n},
                {"pole_safe", cfg.pole_safe}, {"dim", cfg.dim},
                {"sim_seed", cfg.sim_seed},   {"fit_seed", cfg.fit_seed},
                {"cutoff_rad", cfg.cutoff_rad}, {"starts", cfg.starts},
                {"budget", cfg.budget}};
  };
  auto compute = [&](std::size_t c, std::size_t r) {
    const RadialModelSpec tmpl = make_preset(cell_model(c));
    const ParameterVector& truth = cell_truth(c);
    const SimulationResult sim =
        simulate_field(realize_covariance(tmpl, truth), design, cfg.sim_seed, r);
    FitOptions fo;
    fo.starts = cfg.starts;
    fo.budget = cfg.budget;
    fo.cutoff_rad = cfg.cutoff_rad;
    fo.seed = cfg.fit_seed + r;
    fo.init = truth;
    const FitResult fit = two_stage_fit(sim.obs, tmpl, truth.variant, fo);
    return Json{{"params", fit.params},
                {"objective", fit.objective},
                {"converged", fit.converged},
                {"evals", fit.evals}};
  };

  const std::string dir = cfg.out_dir.empty() ? std::string{} : cfg.out_dir + "/bias";
  const auto outcomes =
      detail::run_replicates(n_cells, cfg.replicates, cfg.threads, dir, "bias", key, compute);

  BiasStudyResult result;
  for (std::size_t c = 0; c < n_cells; ++c) {
    BiasCell cell;
    cell.model = cell_model(c);
    cell.truth = cell_truth(c);
    cell.replicates = reps;

    std::vector<ParameterVector> estimates;
    for (const auto& slot : outcomes[c]) {
      if (!slot.ok) {
        ++cell.failures;
        continue;
      }
      ParameterVector pv = slot.payload.at("params").get<ParameterVector>();
      estimates.push_back(pv);
    }
    cell.valid = 5 * cell.failures <= reps;

    for (const auto& [name, truth_value] : named_parameters(cell.truth)) {
      ParameterSummary s;
      s.name = name;
      s.truth = truth_value;
      std::vector<double> est;
      est.reserve(estimates.size());
      for (const ParameterVector& pv : estimates)
        for (const auto& [ename, evalue] : named_parameters(pv))
          if (ename == name) {
            const double used = name == "alpha1"
                                    ? truth_value + std::remainder(evalue - truth_value, 2.0 * pi)
                                    : evalue;
            est.push_back(used);
          }
      std::sort(est.begin(), est.end());
      s.n = est.size();
      if (!est.empty()) {
        double sum = 0.0;
        for (double v : est) sum += v - truth_value;
        s.mean_bias = sum / static_cast<double>(est.size());
        s.bias_median = detail::quantile_sorted(est, 0.5) - truth_value;
        s.est_lo95 = detail::quantile_sorted(est, 0.025);
        s.est_q25 = detail::quantile_sorted(est, 0.25);
        s.est_median = detail::quantile_sorted(est, 0.5);
        s.est_q75 = detail::quantile_sorted(est, 0.75);
        s.est_hi95 = detail::quantile_sorted(est, 0.975);
      }
      cell.parameters.push_back(std::move(s));
    }
    result.valid = result.valid && cell.valid;
    result.cells.push_back(std::move(cell));
  }

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const Json manifest{{"config", cfg}, {"result", result}};
    detail::write_text_atomic(cfg.out_dir + "/bias_manifest.json", manifest.dump(2) + "\n");
  }
  return result;
}

struct ScoreRow {
  std::string model;
  bool separable = false;
  double eta = 0.0;
  double rho12 = 0.0;
  std::string variant;  // "S" or "A"
  double mspe = 0.0;
  double mspe_se = 0.0;
  double lscore = 0.0;
  double lscore_se = 0.0;
  std::size_t replicates = 0;
};

inline void to_json(Json& j, const ScoreRow& r) {
  j = Json{{"model", r.model},       {"separable", r.separable}, {"eta", r.eta},
           {"rho12", r.rho12},       {"variant", r.variant},     {"mspe", r.mspe},
           {"mspe_se", r.mspe_se},   {"lscore", r.lscore},       {"lscore_se", r.lscore_se},
           {"replicates", r.replicates}};
}

// Paired symmetric-minus-asymmetric score differences for one cell; positive
// gaps favor the displaced fit.
struct ScoreGap {
  std::string model;
  bool separable = false;
  double eta = 0.0;
  double rho12 = 0.0;
  double mspe_gap = 0.0;
  double mspe_gap_se = 0.0;
  double lscore_gap = 0.0;
  double lscore_gap_se = 0.0;
  std::size_t replicates = 0;
};

inline void to_json(Json& j, const ScoreGap& g) {
  j = Json{{"model", g.model},           {"separable", g.separable},
           {"eta", g.eta},               {"rho12", g.rho12},
           {"mspe_gap", g.mspe_gap},     {"mspe_gap_se", g.mspe_gap_se},
           {"lscore_gap", g.lscore_gap}, {"lscore_gap_se", g.lscore_gap_se},
           {"replicates", g.replicates}};
}

struct ScoreTable {
  std::vector<ScoreRow> rows;
  std::vector<ScoreGap> gaps;
  std::size_t replicates = 0;
  std::size_t failures = 0;
  bool valid = true;
};

inline void to_json(Json& j, const ScoreTable& t) {
  j = Json{{"replicates", t.replicates},
           {"failures", t.failures},
           {"valid", t.valid},
           {"rows", t.rows},
           {"gaps", t.gaps}};
}

[[nodiscard]] inline std::string score_table_csv(const ScoreTable& t) {
  std::ostringstream out;
  out.precision(17);
  out << "model,separable,eta,rho12,variant,mspe,mspe_se,lscore,lscore_se,replicates\n";
  for (const ScoreRow& r : t.rows)
    out << r.model << ',' << (r.separable ? 1 : 0) << ',' << r.eta << ',' << r.rho12 << ','
        << r.variant << ',' << r.mspe << ',' << r.mspe_se << ',' << r.lscore << ','
        << r.lscore_se << ',' << r.replicates << '\n';
  return out.str();
}

[[nodiscard]] inline std::string render_score_table(const ScoreTable& t) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(6) << "model" << std::setw(5) << "sep" << std::right
      << std::setw(6) << "eta" << std::setw(7) << "rho12" << std::setw(10) << "MSPE S"
      << std::setw(10) << "MSPE A" << std::setw(18) << "gap (se)" << std::setw(10) << "LSCORE S"
      << std::setw(10) << "LSCORE A" << std::setw(18) << "gap (se)" << '\n';
  for (const ScoreGap& g : t.gaps) {
    const ScoreRow* s = nullptr;
    const ScoreRow* a = nullptr;
    for (const ScoreRow& r : t.rows) {
      if (r.model != g.model || r.separable != g.separable || r.eta != g.eta ||
          r.rho12 != g.rho12)
        continue;
      (r.variant == "S" ? s : a) = &r;
    }
    if (s == nullptr || a == nullptr) continue;
    std::ostringstream mspe_gap, ls_gap;
    mspe_gap << std::fixed << std::setprecision(4) << g.mspe_gap << " (" << g.mspe_gap_se << ")";
    ls_gap << std::fixed << std::setprecision(4) << g.lscore_gap << " (" << g.lscore_gap_se << ")";
    out << std::left << std::setw(6) << g.model << std::setw(5) << (g.separable ? "yes" : "no")
        << std::right << std::setw(6) << g.eta << std::setw(7) << g.rho12 << std::setw(10)
        << s->mspe << std::setw(10) << a->mspe << std::setw(18) << mspe_gap.str() << std::setw(10)
        << s->lscore << std::setw(10) << a->lscore << std::setw(18) << ls_gap.str() << '\n';
  }
  out << "replicates per cell: " << t.replicates << ", failures: " << t.failures
      << (t.valid ? "" : " (run invalid)") << '\n';
  return out.str();
}

// Simulates each scenario cell from its displaced truth, fits the symmetric
// and displaced variants without informed starts, scores both by drop-one
// cross-validation, and aggregates means with Monte Carlo standard errors.
// A replicate enters the table only if both fits and both validations
// succeed, keeping every cell paired over the same replicates.
[[nodiscard]] inline ScoreTable run_score_study(const ExperimentConfig& cfg) {
  cfg.check();
  for (const ParameterVector& pv : cfg.truths)
    if (!variant_asymmetric(pv.variant))
      throw std::invalid_argument("score study truths must use displaced variants");
  const ObservationSet design = experiment_design(cfg);
  const std::size_t n_cells = cfg.models.size() * cfg.truths.size();
  const auto reps = static_cast<std::size_t>(cfg.replicates);

  auto cell_model = [&](std::size_t c) { return cfg.models[c / cfg.truths.size()]; };
  auto cell_truth = [&](std::size_t c) -> const ParameterVector& {
    return cfg.truths[c % cfg.truths.size()];
  };
  auto key = [&](std::size_t c) {
    return Json{{"study", "score"},       {"model", cell_model(c)},
                {"truth", cell_truth(c)}, {"grid_n", cfg.grid_n},
                {"pole_safe", cfg.pole_safe}, {"dim", cfg.dim},
                {"sim_seed", cfg.sim_seed},   {"fit_seed", cfg.fit_seed},
                {"cutoff_rad", cfg.cutoff_rad}, {"starts", cfg.starts},
                {"sym_starts", cfg.sym_starts}, {"budget", cfg.budget}};
  };
  auto compute = [&](std::size_t c, std::size_t r) {
    const RadialModelSpec tmpl = make_preset(cell_model(c));
    const ParameterVector& truth = cell_truth(c);
    const SimulationResult sim =
        simulate_field(realize_covariance(tmpl, truth), design, cfg.sim_seed, r);

    FitOptions fo;
    fo.budget = cfg.budget;
    fo.cutoff_rad = cfg.cutoff_rad;
    fo.seed = cfg.fit_seed + r;

    fo.starts = cfg.sym_starts;
    const FitResult sym = fit_composite(sim.obs, tmpl, symmetric_counterpart(truth.variant), fo);
    fo.starts = cfg.starts;
    const FitResult asym = two_stage_fit(sim.obs, tmpl, truth.variant, fo);

    const CvResult cv_s = drop_one_cv(realize_covariance(tmpl, sym.params), sim.obs);
    const CvResult cv_a = drop_one_cv(realize_covariance(tmpl, asym.params), sim.obs);
    return Json{{"sym", Json{{"params", sym.params},
                             {"objective", sym.objective},
                             {"mspe", cv_s.scores.mspe},
                             {"lscore", cv_s.scores.lscore}}},
                {"asym", Json{{"params", asym.params},
                              {"objective", asym.objective},
                              {"mspe", cv_a.scores.mspe},
                              {"lscore", cv_a.scores.lscore}}}};
  };

  const std::string dir = cfg.out_dir.empty() ? std::string{} : cfg.out_dir + "/score";
  const auto outcomes =
      detail::run_replicates(n_cells, cfg.replicates, cfg.threads, dir, "score", key, compute);

  ScoreTable table;
  table.replicates = reps;
  std::size_t uniform_n = 0;
  bool first_cell = true;
  for (std::size_t c = 0; c < n_cells; ++c) {
    const ParameterVector& truth = cell_truth(c);
    std::vector<double> mspe_s, mspe_a, ls_s, ls_a, mspe_diff, ls_diff;
    for (const auto& slot : outcomes[c]) {
      if (!slot.ok) {
        ++table.failures;
        continue;
      }
      const Json& s = slot.payload.at("sym");
      const Json& a = slot.payload.at("asym");
      mspe_s.push_back(s.at("mspe").get<double>());
      ls_s.push_back(s.at("lscore").get<double>());
      mspe_a.push_back(a.at("mspe").get<double>());
      ls_a.push_back(a.at("lscore").get<double>());
      mspe_diff.push_back(mspe_s.back() - mspe_a.back());
      ls_diff.push_back(ls_s.back() - ls_a.back());
    }
    if (5 * (reps - mspe_s.size()) > reps) table.valid = false;
    if (first_cell) {
      uniform_n = mspe_s.size();
      first_cell = false;
    } else if (mspe_s.size() != uniform_n) {
      table.valid = false;
    }

    auto push_row = [&](const std::string& label, const std::vector<double>& mspe,
                        const std::vector<double>& lscore) {
      ScoreRow row;
      row.model = cell_model(c);
      row.separable = variant_separable(truth.variant);
      row.eta = truth.asym.eta;
      row.rho12 = truth.rho12;
      row.variant = label;
      const detail::MeanSe m = detail::mean_se(mspe);
      const detail::MeanSe l = detail::mean_se(lscore);
      row.mspe = m.mean;
      row.mspe_se = m.se;
      row.lscore = l.mean;
      row.lscore_se = l.se;
      row.replicates = mspe.size();
      table.rows.push_back(std::move(row));
    };
    push_row("S", mspe_s, ls_s);
    push_row("A", mspe_a, ls_a);

    ScoreGap gap;
    gap.model = cell_model(c);
    gap.separable = variant_separable(truth.variant);
    gap.eta = truth.asym.eta;
    gap.rho12 = truth.rho12;
    const detail::MeanSe md = detail::mean_se(mspe_diff);
    const detail::MeanSe ld = detail::mean_se(ls_diff);
    gap.mspe_gap = md.mean;
    gap.mspe_gap_se = md.se;
    gap.lscore_gap = ld.mean;
    gap.lscore_gap_se = ld.se;
    gap.replicates = mspe_diff.size();
    table.gaps.push_back(std::move(gap));
  }

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const Json manifest{{"config", cfg}, {"table", table}};
    detail::write_text_atomic(cfg.out_dir + "/score_manifest.json", manifest.dump(2) + "\n");
    detail::write_text_atomic(cfg.out_dir + "/score_table.json", Json(table).dump(2) + "\n");
    detail::write_text_atomic(cfg.out_dir + "/score_table.csv", score_table_csv(table));
  }
  return table;
}

struct PipelineRow {
  Variant variant = Variant::sym_sep;
  int n_params = 0;
  ParameterVector params;
  double objective = 0.0;
  bool converged = false;
  double mspe = 0.0;
  double lscore = 0.0;
  std::vector<VariableScores> per_variable;
};

inline void to_json(Json& j, const PipelineRow& r) {
  j = Json{{"variant", variant_name(r.variant)},
           {"n_params", r.n_params},
           {"params", r.params},
           {"objective", r.objective},
           {"converged", r.converged},
           {"mspe", r.mspe},
           {"lscore", r.lscore},
           {"per_variable", r.per_variable}};
}

struct PipelineReport {
  std::size_t n_obs = 0;
  std::size_t n_pairs = 0;
  std::vector<PipelineRow> rows;
  std::string best_objective;
  std::string best_mspe;
};

inline void to_json(Json& j, const PipelineReport& r) {
  j = Json{{"n_obs", r.n_obs},
           {"n_pairs", r.n_pairs},
           {"rows", r.rows},
           {"best_objective", r.best_objective},
           {"best_mspe", r.best_mspe}};
}

[[nodiscard]] inline std::string pipeline_report_csv(const PipelineReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "variant,n_params,objective,converged,mspe,lscore\n";
  for (const PipelineRow& row : r.rows)
    out << variant_name(row.variant) << ',' << row.n_params << ',' << row.objective << ','
        << (row.converged ? 1 : 0) << ',' << row.mspe << ',' << row.lscore << '\n';
  return out.str();
}

[[nodiscard]] inline std::string render_pipeline_report(const PipelineReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(14) << "variant" << std::right << std::setw(9) << "n_params"
      << std::setw(14) << "log-CL" << std::setw(10) << "MSPE" << std::setw(10) << "LSCORE"
      << '\n';
  for (const PipelineRow& row : r.rows)
    out << std::left << std::setw(14) << variant_name(row.variant) << std::right << std::setw(9)
        << row.n_params << std::setw(14) << row.objective << std::setw(10) << row.mspe
        << std::setw(10) << row.lscore << '\n';
  out << "best log-CL: " << r.best_objective << ", best MSPE: " << r.best_mspe << '\n';
  return out.str();
}

// Fits every requested exponential-family variant to a residual CSV and
// scores each fit by drop-one cross-validation. The input must carry at
// least 10 observations of both variables.
[[nodiscard]] inline PipelineReport run_data_pipeline(const std::string& data_csv,
                                                      const ExperimentConfig& cfg) {
  cfg.check(false);
  if (cfg.variants.empty()) throw std::invalid_argument("pipeline needs at least one variant");
  const ObservationSet obs = read_observations_csv(data_csv, cfg.dim);
  if (obs.size() < 10)
    throw std::runtime_error(data_csv + ": needs at least 10 observations, found " +
                             std::to_string(obs.size()));
  if (obs.p != 2)
    throw std::runtime_error(data_csv + ": pipeline fits are bivariate, found " +
                             std::to_string(obs.p) + " variable(s)");
  if (obs.values.size() == 0) throw std::runtime_error(data_csv + ": no observed values");

  const RadialModelSpec tmpl = make_preset("M1");
  PipelineReport report;
  report.n_obs = obs.size();
  report.n_pairs = PairwiseLikelihood(obs, cfg.cutoff_rad, true).pair_count();

  std::vector<PipelineRow> rows(cfg.variants.size());
  detail::parallel_for(cfg.variants.size(), cfg.threads, [&](std::size_t i) {
    const Variant variant = cfg.variants[i];
    FitOptions fo;
    fo.budget = cfg.budget;
    fo.cutoff_rad = cfg.cutoff_rad;
    fo.seed = cfg.fit_seed + i;
    fo.starts = variant_asymmetric(variant) ? cfg.starts : cfg.sym_starts;
    const FitResult fit = variant_asymmetric(variant)
                              ? two_stage_fit(obs, tmpl, variant, fo)
                              : fit_composite(obs, tmpl, variant, fo);
    const CvResult cv = drop_one_cv(realize_covariance(tmpl, fit.params), obs);
    PipelineRow row;
    row.variant = variant;
    row.n_params = transformed_size(variant, obs.dim);
    row.params = fit.params;
    row.objective = fit.objective;
    row.converged = fit.converged;
    row.mspe = cv.scores.mspe;
    row.lscore = cv.scores.lscore;
    row.per_variable = cv.scores.per_variable;
    rows[i] = std::move(row);
  });
  report.rows = std::move(rows);

  std::size_t best_obj = 0;
  std::size_t best_mspe = 0;
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    if (report.rows[i].objective > report.rows[best_obj].objective) best_obj = i;
    if (report.rows[i].mspe < report.rows[best_mspe].mspe) best_mspe = i;
  }
  report.best_objective = variant_name(report.rows[best_obj].variant);
  report.best_mspe = variant_name(report.rows[best_mspe].variant);

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    detail::write_text_atomic(cfg.out_dir + "/pipeline_report.json", Json(report).dump(2) + "\n");
    detail::write_text_atomic(cfg.out_dir + "/pipeline_report.csv", pipeline_report_csv(report));
  }
  return report;
}

}  // namespace spherecov
