#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "spherecov/asymmetry.hpp"
#include "spherecov/rng.hpp"

using namespace spherecov;
using Catch::Matchers::WithinAbs;

namespace {

SpherePoint random_point(const CounterRng& rng, std::uint64_t i) {
  const double colat = std::acos(2.0 * rng.uniform(2 * i) - 1.0);
  const double azim = 2.0 * pi * rng.uniform(2 * i + 1);
  return make_point_s2(colat, azim);
}

}  // namespace

TEST_CASE("circle asymmetry matches its closed form", "[asymmetry]") {
  // on the circle the rotated distance satisfies
  //   cos(theta') = x.y cos(eta) - (x1 y2 - x2 y1) sin(eta)
  const RadialModelSpec base = make_preset("M1");
  const CounterRng rng(41, 0);
  for (std::uint64_t t = 0; t < 300; ++t) {
    const double eta = 2.0 * pi * rng.uniform(4 * t) - pi;
    const AsymmetricCovariance cov(base, 1, AsymmetrySpec{eta});
    const SpherePoint x = make_point_s1(2.0 * pi * rng.uniform(4 * t + 1));
    const SpherePoint y = make_point_s1(2.0 * pi * rng.uniform(4 * t + 2));
    const double mu =
        std::clamp(x.dot(y) * std::cos(eta) - (x.x() * y.y() - x.y() * y.x()) * std::sin(eta),
                   -1.0, 1.0);
    const double expected = radial_eval(base, 0, 1, std::acos(mu));
    CHECK_THAT(cov.cross_cov(0, 1, x, y), WithinAbs(expected, 1e-12));
  }
}

TEST_CASE("marginals are untouched by the component rotations", "[asymmetry]") {
  const RadialModelSpec base = make_preset("M2");
  const AsymmetricCovariance sym(base, 2);
  const AsymmetricCovariance asym(base, 2, AsymmetrySpec{0.6, 1.0, 2.0});
  const CounterRng rng(42, 0);
  for (std::uint64_t t = 0; t < 200; ++t) {
    const SpherePoint x = random_point(rng, 2 * t);
    const SpherePoint y = random_point(rng, 2 * t + 1);
    for (int i = 0; i < 2; ++i) {
      CHECK_THAT(asym.cross_cov(i, i, x, y), WithinAbs(sym.cross_cov(i, i, x, y), 1e-13));
      CHECK(asym.cross_cov(i, i, x, x) == base.sigma2[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("exchanging variables and sites gives the identical value", "[asymmetry]") {
  const AsymmetricCovariance cov(make_preset("M1"), 2, AsymmetrySpec{0.8, 0.7, 1.9});
  const CounterRng rng(43, 0);
  for (std::uint64_t t = 0; t < 200; ++t) {
    const SpherePoint x = random_point(rng, 2 * t);
    const SpherePoint y = random_point(rng, 2 * t + 1);
    CHECK(cov.cross_cov(0, 1, x, y) == cov.cross_cov(1, 0, y, x));
  }
}

TEST_CASE("nonzero rotation angle produces genuine asymmetry", "[asymmetry]") {
  const AsymmetricCovariance cov(make_preset("M1"), 2, AsymmetrySpec{0.6});
  const SpherePoint x = make_point_s2(pi / 2.0, 0.0);
  const SpherePoint y = make_point_s2(pi / 2.0 - 0.3, 0.2);
  CHECK(std::abs(cov.cross_cov(0, 1, x, y) - cov.cross_cov(0, 1, y, x)) > 1e-4);

  const AsymmetricCovariance circle(make_preset("M1"), 1, AsymmetrySpec{0.4});
  const SpherePoint a = make_point_s1(0.1);
  const SpherePoint b = make_point_s1(0.5);
  CHECK(std::abs(circle.cross_cov(0, 1, a, b) - circle.cross_cov(0, 1, b, a)) > 1e-4);
}

TEST_CASE("zero rotation angle reproduces the symmetric model bitwise", "[asymmetry]") {
  const RadialModelSpec base = make_preset("M3");
  const AsymmetricCovariance sym(base, 2);
  const AsymmetricCovariance zero(base, 2, AsymmetrySpec{0.0, 1.3, 0.4});
  CHECK(zero.symmetric());
  const CounterRng rng(44, 0);
  for (std::uint64_t t = 0; t < 500; ++t) {
    const SpherePoint x = random_point(rng, 2 * t);
    const SpherePoint y = random_point(rng, 2 * t + 1);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(zero.cross_cov(i, j, x, y) == sym.cross_cov(i, j, x, y));
  }
}

TEST_CASE("component rotations must multiply to the identity", "[asymmetry]") {
  const RadialModelSpec base = make_preset("M1");
  std::vector<Eigen::Matrix3d> bad{rotation_s2(axis_from_angles(0.3, 0.9), 0.2),
                                   rotation_s2(axis_from_angles(0.3, 0.9), -0.1)};
  CHECK_THROWS_AS(AsymmetricCovariance(base, 2, bad), std::invalid_argument);

  std::vector<Eigen::Matrix3d> not_rotation{Eigen::Matrix3d::Identity() * 2.0,
                                            Eigen::Matrix3d::Identity() * 0.5};
  CHECK_THROWS_AS(AsymmetricCovariance(base, 2, not_rotation), std::invalid_argument);

  // three components whose displacements cancel around one axis
  RadialModelSpec tri = base;
  tri.p = 3;
  tri.sigma2 = {1.0, 1.0, 1.0};
  tri.rho = Eigen::MatrixXd::Identity(3, 3);
  tri.c = {0.1, 0.2, 0.3};
  apply_cross_scale_rule(tri);
  const Eigen::Vector3d axis = axis_from_angles(1.0, 1.2);
  std::vector<Eigen::Matrix3d> good{rotation_s2(axis, 0.2), rotation_s2(axis, 0.3),
                                    rotation_s2(axis, -0.5)};
  CHECK_NOTHROW(AsymmetricCovariance(tri, 2, good));
}

TEST_CASE("rotations about the displacement axis leave the covariance unchanged", "[asymmetry]") {
  const AsymmetrySpec spec{0.7, 1.1, 0.8};
  const AsymmetricCovariance cov(make_preset("M1"), 2, spec);
  const Eigen::Vector3d axis = axis_from_angles(spec.alpha1, spec.alpha2);
  const CounterRng rng(45, 0);
  for (std::uint64_t t = 0; t < 100; ++t) {
    const SpherePoint x = random_point(rng, 3 * t);
    const SpherePoint y = random_point(rng, 3 * t + 1);
    const Eigen::Matrix3d q = rotation_s2(axis, 2.0 * pi * rng.uniform(3 * t + 2));
    CHECK_THAT(cov.cross_cov(0, 1, q * x, q * y), WithinAbs(cov.cross_cov(0, 1, x, y), 1e-13));
  }
}

TEST_CASE("asymmetric covariance specs round-trip through json", "[asymmetry]") {
  const AsymmetricCovariance cov(make_preset("M2"), 2, AsymmetrySpec{0.35, 0.9, 1.4});
  const Json j = cov;
  const AsymmetricCovariance back = asymmetric_covariance_from_json(j);
  CHECK(back.dim() == 2);
  CHECK(back.asymmetry().has_value());
  CHECK(back.asymmetry()->eta == 0.35);
  CHECK(back.asymmetry()->alpha1 == 0.9);
  CHECK(back.asymmetry()->alpha2 == 1.4);
  CHECK(back.base().family == "cauchy");
  const SpherePoint x = make_point_s2(1.0, 2.0), y = make_point_s2(1.2, 2.3);
  CHECK(back.cross_cov(0, 1, x, y) == cov.cross_cov(0, 1, x, y));

  const AsymmetricCovariance sym(make_preset("M1"), 1);
  const AsymmetricCovariance sym_back = asymmetric_covariance_from_json(Json(sym));
  CHECK(sym_back.symmetric());
  CHECK(sym_back.dim() == 1);
}

TEST_CASE("block covariance mirrors pairwise evaluations and flags duplicates", "[asymmetry]") {
  const AsymmetricCovariance cov(make_preset("M1"), 2, AsymmetrySpec{0.5});
  ObservationSet obs = collocated_design(grid_s2_polesafe(3), 2, 2);
  const BlockCov block = build_block_cov(cov, obs);
  CHECK(block.matrix.rows() == 18);
  CHECK_FALSE(block.duplicate_observations);
  CHECK(block.matrix == block.matrix.transpose());
  for (std::size_t a = 0; a < obs.size(); ++a)
    for (std::size_t b = 0; b < obs.size(); ++b)
      CHECK(block.matrix(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) ==
            cov.cross_cov(obs.vars[a], obs.vars[b], obs.sites[a], obs.sites[b]));

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block.matrix, Eigen::EigenvaluesOnly);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-8);

  obs.sites.push_back(obs.sites[0]);
  obs.vars.push_back(obs.vars[0]);
  CHECK(build_block_cov(cov, obs).duplicate_observations);
}

TEST_CASE("observation sets round-trip through csv on both geometries", "[asymmetry]") {
  const auto tmp = std::filesystem::temp_directory_path();
  ObservationSet obs = collocated_design(grid_s2_polesafe(3), 2, 2);
  obs.values = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(obs.size()), -1.0, 2.5);
  const std::string path = (tmp / "test_obs_s2.csv").string();
  write_observations_csv(obs, path);
  const ObservationSet back = read_observations_csv(path, 2);
  REQUIRE(back.size() == obs.size());
  CHECK(back.p == 2);
  for (std::size_t k = 0; k < obs.size(); ++k) {
    CHECK((back.sites[k] - obs.sites[k]).norm() < 1e-12);
    CHECK(back.vars[k] == obs.vars[k]);
  }
  CHECK((back.values - obs.values).cwiseAbs().maxCoeff() == 0.0);

  ObservationSet circle = collocated_design(grid_s1(7), 2, 1);
  circle.values = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(circle.size()), 0.25);
  const std::string s1_path = (tmp / "test_obs_s1.csv").string();
  write_observations_csv(circle, s1_path);
  const ObservationSet circle_back = read_observations_csv(s1_path, 1);
  REQUIRE(circle_back.size() == circle.size());
  for (std::size_t k = 0; k < circle.size(); ++k)
    CHECK((circle_back.sites[k] - circle.sites[k]).norm() < 1e-12);
}

TEST_CASE("malformed observation inputs are rejected", "[asymmetry]") {
  ObservationSet obs;
  obs.sites = {make_point_s2(1.0, 1.0)};
  obs.vars = {0, 1};
  CHECK_THROWS_AS(obs.check_consistent(), std::invalid_argument);

  obs.vars = {5};
  CHECK_THROWS_AS(obs.check_consistent(), std::invalid_argument);

  CHECK_THROWS_AS(read_observations_csv("does_not_exist.csv", 2), std::runtime_error);

  const auto tmp = std::filesystem::temp_directory_path();
  const std::string bad_path = (tmp / "test_obs_bad.csv").string();
  {
    std::ofstream bad(bad_path);
    bad << "lon_deg,lat_deg,var,value\n1.0,2.0,1\n";
  }
  CHECK_THROWS_AS(read_observations_csv(bad_path, 2), std::runtime_error);

  const std::string bad2_path = (tmp / "test_obs_bad2.csv").string();
  {
    std::ofstream bad(bad2_path);
    bad << "10.0,20.0,abc,1.5\n";
  }
  CHECK_THROWS_AS(read_observations_csv(bad2_path, 2), std::runtime_error);
}
