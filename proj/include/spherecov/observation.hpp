#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spherecov/geometry.hpp"

namespace spherecov {

// Multivariate observations on a sphere: site k carries variable vars[k]
// (0-based) with value values[k]. A design-only set has an empty value vector.
struct ObservationSet {
  int dim = 2;
  int p = 2;
  std::vector<SpherePoint> sites;
  std::vector<int> vars;
  Eigen::VectorXd values;

  [[nodiscard]] std::size_t size() const { return sites.size(); }

  void check_consistent() const {
    if (vars.size() != sites.size())
      throw std::invalid_argument("observation set needs one variable index per site");
    if (values.size() != 0 && static_cast<std::size_t>(values.size()) != sites.size())
      throw std::invalid_argument("observation values must be empty or match the site count");
    if (dim != 1 && dim != 2) throw std::invalid_argument("sites must live on a circle or a sphere");
    for (int v : vars)
      if (v < 0 || v >= p) throw std::invalid_argument("variable index out of range");
  }
};

// Expands a site list to the fully collocated design: every variable observed
// at every site, values left empty.
[[nodiscard]] inline ObservationSet collocated_design(const std::vector<SpherePoint>& sites, int p,
                                                      int dim) {
  ObservationSet obs;
  obs.dim = dim;
  obs.p = p;
  for (int v = 0; v < p; ++v)
    for (const auto& s : sites) {
      obs.sites.push_back(s);
      obs.vars.push_back(v);
    }
  return obs;
}

// CSV layout: "lon_deg,lat_deg,var,value" on the sphere and "angle_rad,var,value"
// on the circle, with a header row and 1-based variable ids.
inline void write_observations_csv(const ObservationSet& obs, const std::string& path) {
  obs.check_consistent();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  const bool with_values = obs.values.size() != 0;
  if (obs.dim == 2) {
    out << "lon_deg,lat_deg,var,value\n";
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const auto [lon, lat] = point_to_lonlat(obs.sites[k]);
      out << lon << ',' << lat << ',' << obs.vars[k] + 1 << ','
          << (with_values ? obs.values[static_cast<Eigen::Index>(k)] : 0.0) << '\n';
    }
  } else {
    out << "angle_rad,var,value\n";
    for (std::size_t k = 0; k < obs.size(); ++k)
      out << angle_of_s1(obs.sites[k]) << ',' << obs.vars[k] + 1 << ','
          << (with_values ? obs.values[static_cast<Eigen::Index>(k)] : 0.0) << '\n';
  }
  if (!out) throw std::runtime_error("failed while writing " + path);
}

[[nodiscard]] inline ObservationSet read_observations_csv(const std::string& path, int dim,
                                                          int p = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  ObservationSet obs;
  obs.dim = dim;
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  int max_var = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (lineno == 1 && (line.rfind("lon_deg", 0) == 0 || line.rfind("angle_rad", 0) == 0))
      continue;  // header
    std::istringstream row(line);
    std::vector<double> fields;
    std::string cell;
    while (std::getline(row, cell, ',')) {
      try {
        fields.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    const std::size_t expected = dim == 2 ? 4 : 3;
    if (fields.size() != expected)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(expected) + " columns");
    for (double f : fields)
      if (!std::isfinite(f))
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-finite value");
    int var;
    if (dim == 2) {
      obs.sites.push_back(lonlat_to_point(fields[0], fields[1]));
      var = static_cast<int>(fields[2]);
      values.push_back(fields[3]);
    } else {
      obs.sites.push_back(make_point_s1(fields[0]));
      var = static_cast<int>(fields[1]);
      values.push_back(fields[2]);
    }
    if (var < 1)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": variable ids are 1-based");
    obs.vars.push_back(var - 1);
    max_var = std::max(max_var, var);
  }
  obs.p = p > 0 ? p : std::max(max_var, 1);
  obs.values = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  obs.check_consistent();
  return obs;
}

}  // namespace spherecov
