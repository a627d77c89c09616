#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "spherecov/detail/json.hpp"
#include "spherecov/geometry.hpp"
#include "spherecov/observation.hpp"
#include "spherecov/radial_models.hpp"

namespace spherecov {

// Rotation-induced asymmetry for a bivariate field: component 1 is displaced
// by eta/2 and component 2 by -eta/2 about a common axis, so the rotations
// multiply to the identity. On the sphere the axis has spherical angles
// (alpha1, alpha2); on the circle only eta matters.
struct AsymmetrySpec {
  double eta = 0.0;
  double alpha1 = pi / 2.0;
  double alpha2 = pi / 2.0;
};

inline void to_json(Json& j, const AsymmetrySpec& a) {
  j = Json{{"eta", a.eta}, {"alpha1", a.alpha1}, {"alpha2", a.alpha2}};
}

inline void from_json(const Json& j, AsymmetrySpec& a) {
  a.eta = j.at("eta").get<double>();
  a.alpha1 = j.value("alpha1", pi / 2.0);
  a.alpha2 = j.value("alpha2", pi / 2.0);
}

// Matrix covariance evaluated between rotated copies of the components:
// cov{Z_i(x), Z_j(y)} = C(i, j)(distance(R_i x, R_j y)). Identity rotations
// reproduce the symmetric model exactly.
class AsymmetricCovariance {
 public:
  AsymmetricCovariance(RadialModelSpec base, int dim)
      : AsymmetricCovariance(std::move(base), dim,
                             std::vector<Eigen::Matrix3d>(0, Eigen::Matrix3d::Identity())) {}

  AsymmetricCovariance(RadialModelSpec base, int dim, const AsymmetrySpec& asym)
      : AsymmetricCovariance(std::move(base), dim, bivariate_rotations(asym, dim)) {
    asym_ = asym;
  }

  AsymmetricCovariance(RadialModelSpec base, int dim, std::vector<Eigen::Matrix3d> rotations)
      : base_(std::move(base)), dim_(dim), rotations_(std::move(rotations)) {
    detail::check_structure(base_);
    if (dim_ != 1 && dim_ != 2) throw std::invalid_argument("fields live on a circle or a sphere");
    if (rotations_.empty())
      rotations_.assign(static_cast<std::size_t>(base_.p), Eigen::Matrix3d::Identity());
    if (rotations_.size() != static_cast<std::size_t>(base_.p))
      throw std::invalid_argument("one rotation per component required");
    Eigen::Matrix3d product = Eigen::Matrix3d::Identity();
    for (const auto& r : rotations_) {
      if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-10 ||
          r.determinant() < 0.0)
        throw std::invalid_argument("component displacements must be rotations");
      product = product * r;
    }
    if ((product - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-10)
      throw std::invalid_argument("component rotations must multiply to the identity");
    symmetric_ = true;
    for (const auto& r : rotations_) symmetric_ = symmetric_ && r == Eigen::Matrix3d::Identity();
  }

  [[nodiscard]] double cross_cov(int i, int j, const SpherePoint& x, const SpherePoint& y) const {
    if (symmetric_) return radial_eval(base_, i, j, geodesic_distance(x, y));
    return radial_eval(base_, i, j,
                       geodesic_distance(rotations_[static_cast<std::size_t>(i)] * x,
                                         rotations_[static_cast<std::size_t>(j)] * y));
  }

  [[nodiscard]] const RadialModelSpec& base() const { return base_; }
  [[nodiscard]] int dim() const { return dim_; }
  [[nodiscard]] bool symmetric() const { return symmetric_; }
  [[nodiscard]] const std::vector<Eigen::Matrix3d>& rotations() const { return rotations_; }
  [[nodiscard]] const std::optional<AsymmetrySpec>& asymmetry() const { return asym_; }

  [[nodiscard]] static std::vector<Eigen::Matrix3d> bivariate_rotations(const AsymmetrySpec& asym,
                                                                        int dim) {
    if (dim == 1)
      return {rotation_s1_embedded(asym.eta / 2.0), rotation_s1_embedded(-asym.eta / 2.0)};
    const Eigen::Vector3d axis = axis_from_angles(asym.alpha1, asym.alpha2);
    return {rotation_s2(axis, asym.eta / 2.0), rotation_s2(axis, -asym.eta / 2.0)};
  }

 private:
  RadialModelSpec base_;
  int dim_;
  std::vector<Eigen::Matrix3d> rotations_;
  bool symmetric_ = false;
  std::optional<AsymmetrySpec> asym_;
};

inline void to_json(Json& j, const AsymmetricCovariance& cov) {
  j = Json{{"model", cov.base()}, {"dim", cov.dim()}};
  if (cov.asymmetry()) {
    j["asymmetry"] = *cov.asymmetry();
  } else if (!cov.symmetric()) {
    j["rotations"] = Json::array();
    for (const auto& r : cov.rotations()) {
      std::vector<std::vector<double>> rows(3, std::vector<double>(3));
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) rows[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = r(a, b);
      j["rotations"].push_back(rows);
    }
  }
}

[[nodiscard]] inline AsymmetricCovariance asymmetric_covariance_from_json(const Json& j) {
  const auto base = j.at("model").get<RadialModelSpec>();
  const int dim = j.value("dim", 2);
  if (j.contains("asymmetry") && !j.at("asymmetry").is_null()) {
    if (base.p != 2)
      throw std::invalid_argument("angle-parameterized asymmetry is bivariate");
    return {base, dim, j.at("asymmetry").get<AsymmetrySpec>()};
  }
  if (j.contains("rotations")) {
    std::vector<Eigen::Matrix3d> rots;
    for (const auto& rj : j.at("rotations")) {
      Eigen::Matrix3d r;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) r(a, b) = rj.at(static_cast<std::size_t>(a)).at(static_cast<std::size_t>(b)).get<double>();
      rots.push_back(r);
    }
    return {base, dim, std::move(rots)};
  }
  return {base, dim};
}

struct BlockCov {
  Eigen::MatrixXd matrix;
  bool duplicate_observations = false;  // repeated (site, variable) rows make it singular
};

// Dense covariance of an observation set under the model; entry (a, b) is
// cov{Z_{var a}(site a), Z_{var b}(site b)}.
[[nodiscard]] inline BlockCov build_block_cov(const AsymmetricCovariance& cov,
                                              const ObservationSet& obs) {
  obs.check_consistent();
  if (obs.p != cov.base().p)
    throw std::invalid_argument("observation set and model disagree on the number of variables");
  const auto n = static_cast<Eigen::Index>(obs.size());
  BlockCov block;
  block.matrix.resize(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = a; b < n; ++b) {
      // the exchange identity cov{Z_i(x), Z_j(y)} = cov{Z_j(y), Z_i(x)} makes
      // the mirrored entry identical, so it is filled without re-evaluating
      const double value =
          cov.cross_cov(obs.vars[static_cast<std::size_t>(a)], obs.vars[static_cast<std::size_t>(b)],
                        obs.sites[static_cast<std::size_t>(a)], obs.sites[static_cast<std::size_t>(b)]);
      block.matrix(a, b) = value;
      block.matrix(b, a) = value;
      if (a != b && !block.duplicate_observations &&
          obs.vars[static_cast<std::size_t>(a)] == obs.vars[static_cast<std::size_t>(b)] &&
          obs.sites[static_cast<std::size_t>(a)] == obs.sites[static_cast<std::size_t>(b)])
        block.duplicate_observations = true;
    }
  }
  return block;
}

}  // namespace spherecov
