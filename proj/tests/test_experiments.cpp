#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spherecov/experiments.hpp"

using namespace spherecov;
using Catch::Matchers::WithinAbs;

namespace {

ExperimentConfig tiny_bias_config() {
  ExperimentConfig cfg;
  cfg.models = {"M1"};
  cfg.truths = {standard_truth(Variant::asym_nonsep, 0.3, 0.5)};
  cfg.grid_n = 6;
  cfg.replicates = 3;
  cfg.budget = 250;
  cfg.starts = 2;
  cfg.sym_starts = 1;
  cfg.threads = 2;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

const ParameterSummary& summary_for(const BiasCell& cell, const std::string& name) {
  for (const ParameterSummary& s : cell.parameters)
    if (s.name == name) return s;
  FAIL("no summary named " + name);
  return cell.parameters.front();
}

}  // namespace

TEST_CASE("config validation rejects broken settings", "[experiments]") {
  ExperimentConfig cfg = tiny_bias_config();

  SECTION("zero replicates") {
    cfg.replicates = 0;
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  }
  SECTION("empty truth table") {
    cfg.truths.clear();
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
    CHECK_NOTHROW(cfg.check(false));
  }
  SECTION("unknown preset") {
    cfg.models = {"M9"};
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  }
  SECTION("truth violating the validity conditions") {
    cfg.truths[0].rho12 = 0.99;
    cfg.truths[0].c11 = 0.05;
    cfg.truths[0].c22 = 0.5;
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  }
  SECTION("truth dimension mismatch") {
    cfg.truths[0].dim = 1;
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  }
  SECTION("bad grid and cutoff") {
    cfg.grid_n = 1;
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
    cfg.grid_n = 6;
    cfg.cutoff_rad = 0.0;
    CHECK_THROWS_AS(cfg.check(), std::invalid_argument);
  }
}

TEST_CASE("config round-trips through json", "[experiments]") {
  ExperimentConfig cfg = tiny_bias_config();
  cfg.models = {"M2", "M3"};
  cfg.variants = {Variant::sym_nonsep, Variant::asym_nonsep};
  cfg.pole_safe = false;
  cfg.sim_seed = 42;
  cfg.out_dir = "somewhere";

  const Json j = cfg;
  const auto back = j.get<ExperimentConfig>();
  CHECK(back.models == cfg.models);
  CHECK(back.variants == cfg.variants);
  REQUIRE(back.truths.size() == cfg.truths.size());
  CHECK(back.truths[0].rho12 == cfg.truths[0].rho12);
  CHECK(back.truths[0].asym.eta == cfg.truths[0].asym.eta);
  CHECK(back.grid_n == cfg.grid_n);
  CHECK(back.pole_safe == cfg.pole_safe);
  CHECK(back.sim_seed == cfg.sim_seed);
  CHECK(back.out_dir == cfg.out_dir);

  const auto defaults = Json::object().get<ExperimentConfig>();
  CHECK(defaults.grid_n == 15);
  CHECK(defaults.replicates == 100);
  CHECK(defaults.variants.size() == 4);
}

TEST_CASE("experiment design matches the grid spec", "[experiments]") {
  ExperimentConfig cfg = tiny_bias_config();
  cfg.grid_n = 15;
  CHECK(experiment_design(cfg).size() == 450);

  cfg.dim = 1;
  cfg.truths[0].dim = 1;
  CHECK(experiment_design(cfg).size() == 30);
}

TEST_CASE("truth-initialized fits with zero budget report zero bias", "[experiments]") {
  ExperimentConfig cfg = tiny_bias_config();
  cfg.budget = 0;

  const BiasStudyResult result = run_bias_study(cfg);
  REQUIRE(result.valid);
  REQUIRE(result.cells.size() == 1);
  const BiasCell& cell = result.cells[0];
  CHECK(cell.failures == 0);
  REQUIRE(cell.parameters.size() == 8);
  for (const ParameterSummary& s : cell.parameters) {
    CHECK(s.n == 3);
    CHECK(s.mean_bias == 0.0);
    CHECK(s.bias_median == 0.0);
    CHECK(s.est_lo95 == s.truth);
    CHECK(s.est_hi95 == s.truth);
  }
}

TEST_CASE("bias study summarizes estimates around the truth", "[experiments]") {
  const ExperimentConfig cfg = tiny_bias_config();
  const BiasStudyResult result = run_bias_study(cfg);

  REQUIRE(result.valid);
  REQUIRE(result.cells.size() == 1);
  const BiasCell& cell = result.cells[0];
  CHECK(cell.model == "M1");
  CHECK(cell.replicates == 3);
  CHECK(cell.failures == 0);

  const std::vector<std::string> expected = {"sigma2_1", "sigma2_2", "rho12", "c11",
                                             "c22",      "eta",      "alpha1", "alpha2"};
  REQUIRE(cell.parameters.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const ParameterSummary& s = cell.parameters[i];
    CHECK(s.name == expected[i]);
    CHECK(s.n == 3);
    CHECK(std::isfinite(s.mean_bias));
    CHECK(s.est_lo95 <= s.est_q25);
    CHECK(s.est_q25 <= s.est_median);
    CHECK(s.est_median <= s.est_q75);
    CHECK(s.est_q75 <= s.est_hi95);
    CHECK_THAT(s.est_median - s.truth, WithinAbs(s.bias_median, 1e-12));
  }

  const ParameterSummary& eta = summary_for(cell, "eta");
  CHECK(eta.est_median > 0.0);
  CHECK(eta.est_median < pi / 2.0);
}

TEST_CASE("bias study resumes from per-replicate files", "[experiments]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "spherecov_bias_resume";
  fs::remove_all(dir);

  ExperimentConfig cfg = tiny_bias_config();
  cfg.out_dir = dir.string();

  const BiasStudyResult first = run_bias_study(cfg);
  REQUIRE(first.valid);
  const std::string manifest_path = (dir / "bias_manifest.json").string();
  const std::string first_manifest = read_file(manifest_path);
  CHECK(fs::exists(dir / "bias" / "bias_cell0_rep0.json"));

  // A second run reuses every replicate file; dropping one forces exactly
  // that replicate to be recomputed, reproducing the same bytes.
  fs::remove(dir / "bias" / "bias_cell0_rep1.json");
  const BiasStudyResult second = run_bias_study(cfg);
  REQUIRE(second.valid);
  CHECK(read_file(manifest_path) == first_manifest);
  CHECK(fs::exists(dir / "bias" / "bias_cell0_rep1.json"));

  // A replicate file from different settings is ignored, not trusted.
  ExperimentConfig changed = cfg;
  changed.sim_seed += 1;
  const BiasStudyResult third = run_bias_study(changed);
  REQUIRE(third.valid);
  CHECK(read_file(manifest_path) != first_manifest);

  fs::remove_all(dir);
}

TEST_CASE("score study pairs symmetric and displaced fits", "[experiments]") {
  ExperimentConfig cfg;
  cfg.models = {"M1"};
  cfg.truths = {standard_truth(Variant::asym_nonsep, 0.6, 0.5)};
  cfg.grid_n = 7;
  cfg.replicates = 4;
  cfg.budget = 250;
  cfg.starts = 3;
  cfg.sym_starts = 1;
  cfg.threads = 2;

  const ScoreTable table = run_score_study(cfg);
  REQUIRE(table.valid);
  CHECK(table.failures == 0);
  REQUIRE(table.rows.size() == 2);
  REQUIRE(table.gaps.size() == 1);

  const ScoreRow& s = table.rows[0];
  const ScoreRow& a = table.rows[1];
  CHECK(s.variant == "S");
  CHECK(a.variant == "A");
  CHECK(s.replicates == 4);
  CHECK(a.replicates == 4);
  for (const ScoreRow& row : table.rows) {
    CHECK(row.model == "M1");
    CHECK_FALSE(row.separable);
    CHECK(row.eta == 0.6);
    CHECK(row.rho12 == 0.5);
    CHECK(std::isfinite(row.mspe));
    CHECK(std::isfinite(row.lscore));
    CHECK(row.mspe_se > 0.0);
  }

  // Strong displacement and correlation: the displaced fit predicts better.
  const ScoreGap& gap = table.gaps[0];
  CHECK(gap.mspe_gap > 0.0);
  CHECK_THAT(gap.mspe_gap, WithinAbs(s.mspe - a.mspe, 1e-12));

  // Same config and seeds reproduce the table byte for byte.
  const ScoreTable again = run_score_study(cfg);
  CHECK(Json(again).dump() == Json(table).dump());

  const std::string csv = score_table_csv(table);
  CHECK(csv.rfind("model,separable,eta,rho12,variant", 0) == 0);
  CHECK(csv.find("M1,0,") != std::string::npos);
  const std::string rendered = render_score_table(table);
  CHECK(rendered.find("MSPE S") != std::string::npos);
  CHECK(rendered.find("M1") != std::string::npos);
}

TEST_CASE("score study shows no advantage without displacement", "[experiments]") {
  ExperimentConfig cfg;
  cfg.models = {"M1"};
  cfg.truths = {standard_truth(Variant::asym_nonsep, 0.0, 0.5)};
  cfg.grid_n = 9;
  cfg.replicates = 3;
  cfg.budget = 250;
  cfg.starts = 3;
  cfg.sym_starts = 1;
  cfg.threads = 2;

  const ScoreTable table = run_score_study(cfg);
  REQUIRE(table.valid);
  const ScoreGap& gap = table.gaps[0];
  CHECK(std::abs(gap.mspe_gap) <= std::max(3.0 * gap.mspe_gap_se, 0.02));
  CHECK(std::abs(gap.lscore_gap) <= std::max(3.0 * gap.lscore_gap_se, 0.03));
}

TEST_CASE("score study rejects symmetric truths", "[experiments]") {
  ExperimentConfig cfg = tiny_bias_config();
  cfg.truths = {standard_truth(Variant::sym_nonsep, 0.0, 0.5)};
  CHECK_THROWS_AS(run_score_study(cfg), std::invalid_argument);
}

TEST_CASE("pipeline fits every variant and reports coherent scores", "[experiments]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "spherecov_pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string csv_path = (dir / "residuals.csv").string();

  ExperimentConfig cfg;
  cfg.grid_n = 7;
  cfg.budget = 300;
  cfg.starts = 3;
  cfg.sym_starts = 2;
  cfg.threads = 2;
  cfg.out_dir = dir.string();

  const ParameterVector truth = standard_truth(Variant::asym_nonsep, 0.6, 0.5);
  const ObservationSet design = experiment_design(cfg);
  const SimulationResult sim =
      simulate_field(realize_covariance(make_preset("M1"), truth), design, 7, 0);
  write_observations_csv(sim.obs, csv_path);

  const PipelineReport report = run_data_pipeline(csv_path, cfg);
  CHECK(report.n_obs == sim.obs.size());
  CHECK(report.n_pairs > 0);
  REQUIRE(report.rows.size() == 4);

  const std::vector<int> expected_counts = {4, 5, 7, 8};
  std::size_t best_obj = 0;
  std::size_t best_mspe = 0;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const PipelineRow& row = report.rows[i];
    CHECK(row.variant == cfg.variants[i]);
    CHECK(row.n_params == expected_counts[i]);
    CHECK(std::isfinite(row.objective));
    CHECK(std::isfinite(row.mspe));
    CHECK(std::isfinite(row.lscore));
    REQUIRE(row.per_variable.size() == 2);
    if (row.objective > report.rows[best_obj].objective) best_obj = i;
    if (row.mspe < report.rows[best_mspe].mspe) best_mspe = i;
  }
  CHECK(report.best_objective == variant_name(report.rows[best_obj].variant));
  CHECK(report.best_mspe == variant_name(report.rows[best_mspe].variant));

  // The displaced non-separable fit nests the symmetric one, so its optimum
  // cannot fall meaningfully below on the same data.
  CHECK(report.rows[3].objective >= report.rows[1].objective - 1.0);

  CHECK(fs::exists(dir / "pipeline_report.json"));
  CHECK(fs::exists(dir / "pipeline_report.csv"));
  const std::string csv = pipeline_report_csv(report);
  CHECK(csv.rfind("variant,n_params,objective", 0) == 0);
  CHECK(render_pipeline_report(report).find("log-CL") != std::string::npos);

  fs::remove_all(dir);
}

TEST_CASE("pipeline rejects defective input", "[experiments]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "spherecov_pipeline_bad";
  fs::remove_all(dir);
  fs::create_directories(dir);
  ExperimentConfig cfg;
  cfg.out_dir.clear();

  SECTION("missing file") {
    CHECK_THROWS_AS(run_data_pipeline((dir / "absent.csv").string(), cfg), std::runtime_error);
  }
  SECTION("too few observations") {
    const std::string path = (dir / "short.csv").string();
    std::ofstream out(path);
    out << "lon_deg,lat_deg,var,value\n";
    for (int k = 0; k < 4; ++k) out << 10.0 * k << ",5.0," << 1 + k % 2 << ",0.1\n";
    out.close();
    CHECK_THROWS_WITH(run_data_pipeline(path, cfg),
                      Catch::Matchers::ContainsSubstring("at least 10"));
  }
  SECTION("non-finite value names the row") {
    const std::string path = (dir / "nan.csv").string();
    std::ofstream out(path);
    out << "lon_deg,lat_deg,var,value\n";
    for (int k = 0; k < 12; ++k) out << 10.0 * k << ",5.0," << 1 + k % 2 << ",0.1\n";
    out << "130.0,5.0,1,nan\n";
    out.close();
    CHECK_THROWS_WITH(run_data_pipeline(path, cfg), Catch::Matchers::ContainsSubstring(":14"));
  }
  SECTION("univariate input") {
    const std::string path = (dir / "uni.csv").string();
    std::ofstream out(path);
    out << "lon_deg,lat_deg,var,value\n";
    for (int k = 0; k < 12; ++k) out << 10.0 * k << ",5.0,1,0.1\n";
    out.close();
    CHECK_THROWS_WITH(run_data_pipeline(path, cfg),
                      Catch::Matchers::ContainsSubstring("bivariate"));
  }

  fs::remove_all(dir);
}

TEST_CASE("simulated values round-trip through the csv format bit-equal", "[experiments]") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "spherecov_roundtrip.csv").string();

  ExperimentConfig cfg;
  cfg.grid_n = 5;
  const ObservationSet design = experiment_design(cfg);
  const ParameterVector truth = standard_truth(Variant::asym_nonsep, 0.4, 0.3);
  const SimulationResult sim =
      simulate_field(realize_covariance(make_preset("M2"), truth), design, 11, 2);
  write_observations_csv(sim.obs, path);
  const ObservationSet back = read_observations_csv(path, 2);

  REQUIRE(back.size() == sim.obs.size());
  for (Eigen::Index i = 0; i < sim.obs.values.size(); ++i)
    CHECK(back.values[i] == sim.obs.values[i]);

  fs::remove(path);
}
