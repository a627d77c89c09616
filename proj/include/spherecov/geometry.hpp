#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace spherecov {

// Points live on the unit sphere as unit 3-vectors; the circle embeds in the
// z = 0 plane so every routine downstream works on one representation.
using SpherePoint = Eigen::Vector3d;

inline constexpr double pi = std::numbers::pi;
inline constexpr double earth_radius_km = 6378.0;

[[nodiscard]] inline SpherePoint make_point_s1(double angle) {
  return {std::cos(angle), std::sin(angle), 0.0};
}

// Colatitude measured from the north pole, azimuth from the x axis.
[[nodiscard]] inline SpherePoint make_point_s2(double colat, double azim) {
  const double s = std::sin(colat);
  return {s * std::cos(azim), s * std::sin(azim), std::cos(colat)};
}

[[nodiscard]] inline double angle_of_s1(const SpherePoint& x) {
  double a = std::atan2(x.y(), x.x());
  if (a < 0.0) a += 2.0 * pi;
  return a;
}

// Great-circle distance in radians. The two-argument arctangent form stays
// fully accurate near 0 and pi, where acos of a clamped dot product loses
// half its digits.
[[nodiscard]] inline double geodesic_distance(const SpherePoint& x, const SpherePoint& y) {
  return std::atan2(x.cross(y).norm(), x.dot(y));
}

[[nodiscard]] inline SpherePoint lonlat_to_point(double lon_deg, double lat_deg) {
  const double colat = pi / 2.0 - lat_deg * pi / 180.0;
  const double azim = lon_deg * pi / 180.0;
  return make_point_s2(colat, azim);
}

[[nodiscard]] inline std::pair<double, double> point_to_lonlat(const SpherePoint& x) {
  const double lat = 90.0 - std::acos(std::clamp(x.z(), -1.0, 1.0)) * 180.0 / pi;
  double lon = std::atan2(x.y(), x.x()) * 180.0 / pi;
  return {lon, lat};
}

[[nodiscard]] inline double km_to_rad(double km, double radius_km = earth_radius_km) {
  return km / radius_km;
}

[[nodiscard]] inline double rad_to_km(double rad, double radius_km = earth_radius_km) {
  return rad * radius_km;
}

// Planar rotation by delta acting on circle points, as a 2x2 matrix.
[[nodiscard]] inline Eigen::Matrix2d rotation_s1(double delta) {
  Eigen::Matrix2d r;
  r << std::cos(delta), std::sin(delta), -std::sin(delta), std::cos(delta);
  return r;
}

// The same rotation acting on embedded circle points (z stays fixed).
[[nodiscard]] inline Eigen::Matrix3d rotation_s1_embedded(double delta) {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  r(0, 0) = std::cos(delta);
  r(0, 1) = std::sin(delta);
  r(1, 0) = -std::sin(delta);
  r(1, 1) = std::cos(delta);
  return r;
}

// Unit rotation axis from its spherical angles.
[[nodiscard]] inline Eigen::Vector3d axis_from_angles(double alpha1, double alpha2) {
  return {std::cos(alpha1) * std::sin(alpha2), std::sin(alpha1) * std::sin(alpha2),
          std::cos(alpha2)};
}

// Rodrigues formula: rotation by delta about the unit axis omega.
[[nodiscard]] inline Eigen::Matrix3d rotation_s2(const Eigen::Vector3d& omega, double delta) {
  Eigen::Matrix3d cross;
  cross << 0.0, -omega.z(), omega.y(), omega.z(), 0.0, -omega.x(), -omega.y(), omega.x(), 0.0;
  return Eigen::Matrix3d::Identity() + std::sin(delta) * cross +
         (1.0 - std::cos(delta)) * (cross * cross);
}

[[nodiscard]] inline std::vector<SpherePoint> grid_s1(int n) {
  if (n < 1) throw std::invalid_argument("grid_s1: n must be positive");
  std::vector<SpherePoint> pts;
  pts.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) pts.push_back(make_point_s1(2.0 * pi * k / n));
  return pts;
}

namespace detail {

inline void dedupe_exact(std::vector<SpherePoint>& pts) {
  std::vector<SpherePoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    bool seen = false;
    for (const auto& q : out) {
      if (p.x() == q.x() && p.y() == q.y() && p.z() == q.z()) {
        seen = true;
        break;
      }
    }
    if (!seen) out.push_back(p);
  }
  pts = std::move(out);
}

}  // namespace detail

// n x n grid with longitudes 2*pi*(k-1)/n and colatitudes pi*(k-1)/n,
// k = 1..n, coincident points (the pole row) removed by exact match.
[[nodiscard]] inline std::vector<SpherePoint> grid_s2_literal(int n) {
  if (n < 1) throw std::invalid_argument("grid_s2_literal: n must be positive");
  std::vector<SpherePoint> pts;
  pts.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) pts.push_back(make_point_s2(pi * i / n, 2.0 * pi * j / n));
  detail::dedupe_exact(pts);
  return pts;
}

// n x n grid with colatitudes pi*(2k-1)/(2n): no poles, all n*n points distinct.
[[nodiscard]] inline std::vector<SpherePoint> grid_s2_polesafe(int n) {
  if (n < 1) throw std::invalid_argument("grid_s2_polesafe: n must be positive");
  std::vector<SpherePoint> pts;
  pts.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 1; i <= n; ++i)
    for (int j = 0; j < n; ++j)
      pts.push_back(make_point_s2(pi * (2.0 * i - 1.0) / (2.0 * n), 2.0 * pi * j / n));
  return pts;
}

}  // namespace spherecov
