#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spherecov/detail/json.hpp"
#include "spherecov/geometry.hpp"

namespace spherecov {

// Matrix-valued geodesically isotropic covariance: entry (i, j) at angle theta
// is sigma_i * sigma_j * rho(i, j) * r(theta; c(i, j)) with r the family
// correlation. range_factor folds an effective-range constant into the
// argument of r so scales are expressed on the same footing as the presets.
struct RadialModelSpec {
  std::string family;           // "matern", "cauchy", or "wendland"
  int p = 2;
  std::vector<double> sigma2;   // marginal variances
  Eigen::MatrixXd rho;          // collocated correlations, unit diagonal
  std::vector<double> c;        // marginal scales c(i, i)
  Eigen::MatrixXd c_cross;      // full scale matrix, filled by the family rule
  double nu = 0.5;
  double gamma = 1.0;           // cauchy shape exponent
  bool separable = false;
  double range_factor = 1.0;

  [[nodiscard]] double sigma(int i) const { return std::sqrt(sigma2.at(static_cast<std::size_t>(i))); }
};

struct ValidityIssue {
  std::string message;
  double margin;  // bound minus attained value; negative means violated
};

struct ValidityReport {
  bool ok = true;
  std::vector<ValidityIssue> issues;  // every checked constraint, worst first

  [[nodiscard]] double min_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& v : issues) m = std::min(m, v.margin);
    return m;
  }

  [[nodiscard]] std::string summary() const {
    std::ostringstream out;
    for (const auto& v : issues)
      if (v.margin < 0.0) out << v.message << "; ";
    return out.str();
  }
};

namespace detail {

inline void check_structure(const RadialModelSpec& s) {
  if (s.family != "matern" && s.family != "cauchy" && s.family != "wendland")
    throw std::invalid_argument("unknown covariance family: " + s.family);
  if (s.p < 1) throw std::invalid_argument("model needs at least one variable");
  const auto p = static_cast<std::size_t>(s.p);
  if (s.sigma2.size() != p || s.c.size() != p)
    throw std::invalid_argument("sigma2 and c must have one entry per variable");
  if (s.rho.rows() != s.p || s.rho.cols() != s.p)
    throw std::invalid_argument("rho must be p x p");
  if (s.c_cross.rows() != s.p || s.c_cross.cols() != s.p)
    throw std::invalid_argument("c_cross must be p x p");
}

// Degree-zero spherical-harmonic coefficient of the wendland correlation on
// the 2-sphere, b0(c) = integral of (1 - t)^nu (1 + nu t) sin(c t) c dt over
// [0, 1], by fixed Gauss-Legendre quadrature.
[[nodiscard]] inline double wendland_b0(double c, double nu) {
  static constexpr int n_nodes = 32;
  struct Rule {
    double x[n_nodes];
    double w[n_nodes];
    Rule() {
      for (int i = 0; i < n_nodes; ++i) {
        double t = std::cos(pi * (i + 0.75) / (n_nodes + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
          double p0 = 1.0, p1 = t;
          for (int k = 2; k <= n_nodes; ++k) {
            const double p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
          }
          dp = n_nodes * (t * p1 - p0) / (t * t - 1.0);
          const double step = p1 / dp;
          t -= step;
          if (std::abs(step) < 1e-15) break;
        }
        x[i] = 0.5 * (1.0 + t);
        w[i] = 1.0 / ((1.0 - t * t) * dp * dp);
      }
    }
  };
  static const Rule rule;
  double sum = 0.0;
  for (int i = 0; i < n_nodes; ++i) {
    const double t = rule.x[i];
    sum += rule.w[i] * std::pow(1.0 - t, nu) * (1.0 + nu * t) * std::sin(c * t);
  }
  return c * sum;
}

// Margin of the degree-zero spectral bound for a wendland cross pair:
// rho_ij^2 b0(c_ij)^2 <= b0(c_ii) b0(c_jj) is necessary for positive
// definiteness on the 2-sphere and empirically binding for nu >= 4, where the
// summation condition alone admits indefinite models at unequal scales.
[[nodiscard]] inline double wendland_b0_margin(const RadialModelSpec& s, int i, int j) {
  const double b0i = wendland_b0(s.c[static_cast<std::size_t>(i)], s.nu);
  const double b0j = wendland_b0(s.c[static_cast<std::size_t>(j)], s.nu);
  const double b0ij = wendland_b0(s.c_cross(i, j), s.nu);
  return std::sqrt(b0i * b0j) / b0ij - std::abs(s.rho(i, j));
}

}  // namespace detail

// Fills the cross scales from the marginals: arithmetic mean for the cauchy
// family, pairwise maximum otherwise.
inline void apply_cross_scale_rule(RadialModelSpec& s) {
  s.c_cross.resize(s.p, s.p);
  for (int i = 0; i < s.p; ++i)
    for (int j = 0; j < s.p; ++j) {
      const double ci = s.c[static_cast<std::size_t>(i)];
      const double cj = s.c[static_cast<std::size_t>(j)];
      s.c_cross(i, j) = s.family == "cauchy" ? 0.5 * (ci + cj) : std::max(ci, cj);
    }
}

// Family correlation r(theta) with r(0) = 1, at scale c.
[[nodiscard]] inline double radial_correlation(const RadialModelSpec& s, double c, double theta) {
  if (theta < 0.0) throw std::invalid_argument("theta must be nonnegative");
  if (theta == 0.0) return 1.0;
  if (s.family == "matern") {
    const double arg = s.range_factor * theta / c;
    if (s.nu == 0.5) return std::exp(-arg);
    return std::pow(2.0, 1.0 - s.nu) / std::tgamma(s.nu) * std::pow(arg, s.nu) *
           std::cyl_bessel_k(s.nu, arg);
  }
  if (s.family == "cauchy")
    return std::pow(1.0 + s.range_factor * std::pow(theta, s.gamma) / c, -s.nu);
  const double t = theta / c;  // wendland
  if (t >= 1.0) return 0.0;
  return std::pow(1.0 - t, s.nu) * (1.0 + s.nu * t);
}

// Covariance entry C(i, j)(theta).
[[nodiscard]] inline double radial_eval(const RadialModelSpec& s, int i, int j, double theta) {
  return s.sigma(i) * s.sigma(j) * s.rho(i, j) *
         radial_correlation(s, s.c_cross(i, j), theta);
}

// Applies the family correlation elementwise at a single scale; thetas must be
// nonnegative. Vector form so tight loops can use Eigen's packet math.
inline void radial_correlation_inplace(const RadialModelSpec& s, double c, Eigen::ArrayXd& theta) {
  if (s.family == "matern") {
    if (s.nu == 0.5) {
      theta = (-s.range_factor / c * theta).exp();
    } else {
      const double norm = std::pow(2.0, 1.0 - s.nu) / std::tgamma(s.nu);
      for (auto& t : theta) {
        const double arg = s.range_factor * t / c;
        t = arg == 0.0 ? 1.0 : norm * std::pow(arg, s.nu) * std::cyl_bessel_k(s.nu, arg);
      }
    }
    return;
  }
  if (s.family == "cauchy") {
    if (s.gamma == 1.0 && s.nu == 1.0) {
      theta = (1.0 + s.range_factor / c * theta).inverse();
    } else {
      for (auto& t : theta)
        t = std::pow(1.0 + s.range_factor * std::pow(t, s.gamma) / c, -s.nu);
    }
    return;
  }
  if (s.nu == 4.0) {  // wendland fast path used by the standard presets
    theta = (1.0 - theta / c).max(0.0);
    theta = theta.square().square() * (5.0 - 4.0 * theta);
    return;
  }
  for (auto& t : theta) {
    const double u = 1.0 - t / c;
    t = u <= 0.0 ? 0.0 : std::pow(u, s.nu) * (1.0 + s.nu * (1.0 - u));
  }
}

// Allocation-free validity test used inside optimizer loops; must agree with
// validate_params on every input.
[[nodiscard]] inline bool params_valid(const RadialModelSpec& s) {
  for (int i = 0; i < s.p; ++i) {
    if (!(s.sigma2[static_cast<std::size_t>(i)] > 0.0)) return false;
    if (!(s.c[static_cast<std::size_t>(i)] > 0.0)) return false;
    if (s.rho(i, i) != 1.0) return false;
  }
  for (int i = 0; i < s.p; ++i)
    for (int j = i + 1; j < s.p; ++j) {
      if (!(s.c_cross(i, j) > 0.0) || !(s.c_cross(j, i) > 0.0)) return false;
      if (s.rho(i, j) != s.rho(j, i)) return false;
      if (!(std::abs(s.rho(i, j)) <= 1.0)) return false;
    }
  if (s.family == "matern") {
    if (!(s.nu > 0.0 && s.nu <= 0.5)) return false;
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j) {
        const double cii = s.c[static_cast<std::size_t>(i)], cjj = s.c[static_cast<std::size_t>(j)];
        if (!(std::abs(s.rho(i, j)) <=
              std::pow(cii * cjj / (s.c_cross(i, j) * s.c_cross(i, j)), s.nu)))
          return false;
      }
  } else if (s.family == "cauchy") {
    if (!(s.nu > 0.0) || !(s.gamma > 0.0 && s.gamma <= 1.0)) return false;
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j) {
        const double cii = s.c[static_cast<std::size_t>(i)], cjj = s.c[static_cast<std::size_t>(j)];
        if (!(s.rho(i, j) * s.rho(i, j) <=
              std::pow(cii * cjj / (s.c_cross(i, j) * s.c_cross(i, j)), s.nu)))
          return false;
      }
  } else {
    if (!(s.nu >= 2.0)) return false;
    for (int i = 0; i < s.p; ++i)
      if (!(s.c[static_cast<std::size_t>(i)] <= pi)) return false;
    double total = 0.0;
    for (int i = 0; i < s.p; ++i)
      for (int j = 0; j < s.p; ++j)
        if (i != j) {
          if (!(s.c_cross(i, j) <= pi)) return false;
          total += std::abs(s.rho(i, j)) *
                   std::pow(s.c[static_cast<std::size_t>(i)] / s.c_cross(i, j), s.nu + 1.0);
        }
    if (!(total <= 1.0)) return false;
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j)
        if (!(detail::wendland_b0_margin(s, i, j) >= 0.0)) return false;
  }
  return true;
}

// Checks parameter ranges and the sufficient cross-correlation bounds for each
// family. Returns every constraint with its margin instead of throwing, so
// optimizers can treat invalid proposals as rejected states.
[[nodiscard]] inline ValidityReport validate_params(const RadialModelSpec& s) {
  detail::check_structure(s);
  ValidityReport report;
  auto add = [&](double margin, const std::string& msg) {
    report.issues.push_back({msg, margin});
    if (margin < 0.0) report.ok = false;
  };

  for (int i = 0; i < s.p; ++i) {
    const double v = s.sigma2[static_cast<std::size_t>(i)];
    add(v, "sigma2[" + std::to_string(i) + "] must be positive");
    const double ci = s.c[static_cast<std::size_t>(i)];
    add(ci, "c[" + std::to_string(i) + "] must be positive");
    if (s.rho(i, i) != 1.0) add(-std::abs(s.rho(i, i) - 1.0), "rho diagonal must be 1");
  }
  for (int i = 0; i < s.p; ++i)
    for (int j = i + 1; j < s.p; ++j) {
      add(std::min(s.c_cross(i, j), s.c_cross(j, i)),
          "cross scale (" + std::to_string(i) + "," + std::to_string(j) + ") must be positive");
      if (s.rho(i, j) != s.rho(j, i)) add(-std::abs(s.rho(i, j) - s.rho(j, i)), "rho must be symmetric");
      add(1.0 - std::abs(s.rho(i, j)), "collocated correlation magnitude at most 1");
    }

  if (s.family == "matern") {
    add(s.nu, "matern smoothness must be positive");
    add(0.5 - s.nu, "matern smoothness at most 1/2 on the sphere");
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j) {
        const double cii = s.c[static_cast<std::size_t>(i)];
        const double cjj = s.c[static_cast<std::size_t>(j)];
        const double bound = std::pow(cii * cjj / (s.c_cross(i, j) * s.c_cross(i, j)), s.nu);
        add(bound - std::abs(s.rho(i, j)),
            "matern cross correlation bound |rho| <= (c_ii c_jj / c_ij^2)^nu for pair (" +
                std::to_string(i) + "," + std::to_string(j) + ")");
      }
  } else if (s.family == "cauchy") {
    add(s.nu, "cauchy exponent must be positive");
    add(s.gamma, "cauchy shape must be positive");
    add(1.0 - s.gamma, "cauchy shape at most 1");
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j) {
        const double cii = s.c[static_cast<std::size_t>(i)];
        const double cjj = s.c[static_cast<std::size_t>(j)];
        const double bound = std::pow(cii * cjj / (s.c_cross(i, j) * s.c_cross(i, j)), s.nu);
        add(bound - s.rho(i, j) * s.rho(i, j),
            "cauchy cross correlation bound rho^2 <= (c_ii c_jj / c_ij^2)^nu for pair (" +
                std::to_string(i) + "," + std::to_string(j) + ")");
      }
  } else {
    add(s.nu - 2.0, "wendland exponent at least 2");
    for (int i = 0; i < s.p; ++i)
      add(pi - s.c[static_cast<std::size_t>(i)], "wendland scale at most pi");
    for (int i = 0; i < s.p; ++i)
      for (int j = 0; j < s.p; ++j)
        if (i != j) add(pi - s.c_cross(i, j), "wendland cross scale at most pi");
    double total = 0.0;
    for (int i = 0; i < s.p; ++i)
      for (int j = 0; j < s.p; ++j)
        if (i != j)
          total += std::abs(s.rho(i, j)) *
                   std::pow(s.c[static_cast<std::size_t>(i)] / s.c_cross(i, j), s.nu + 1.0);
    add(1.0 - total, "wendland cross correlation budget sum |rho_ij| (c_ii/c_ij)^(nu+1) <= 1");
    for (int i = 0; i < s.p; ++i)
      for (int j = i + 1; j < s.p; ++j)
        add(detail::wendland_b0_margin(s, i, j),
            "wendland degree-zero spectral bound |rho_ij| <= sqrt(b0(c_ii) b0(c_jj)) / b0(c_ij) for pair (" +
                std::to_string(i) + "," + std::to_string(j) + ")");
  }
  return report;
}

// Bivariate study presets at the standard setting: unit variances,
// rho = 0.5, scales 0.1 and 0.2, cross scale by the family rule.
[[nodiscard]] inline RadialModelSpec make_preset(const std::string& name) {
  RadialModelSpec s;
  s.p = 2;
  s.sigma2 = {1.0, 1.0};
  s.rho = Eigen::MatrixXd::Identity(2, 2);
  s.rho(0, 1) = s.rho(1, 0) = 0.5;
  s.c = {0.1, 0.2};
  s.separable = false;
  if (name == "M1") {
    s.family = "matern";
    s.nu = 0.5;
    s.range_factor = 3.0;
  } else if (name == "M2") {
    s.family = "cauchy";
    s.nu = 1.0;
    s.gamma = 1.0;
    s.range_factor = 19.0;
  } else if (name == "M3") {
    s.family = "wendland";
    s.nu = 4.0;
    s.range_factor = 1.0;
  } else {
    throw std::invalid_argument("unknown preset: " + name);
  }
  apply_cross_scale_rule(s);
  return s;
}

inline void to_json(Json& j, const RadialModelSpec& s) {
  j = Json{{"family", s.family},
           {"p", s.p},
           {"sigma2", s.sigma2},
           {"rho", std::vector<std::vector<double>>{}},
           {"c", s.c},
           {"c_cross", std::vector<std::vector<double>>{}},
           {"nu", s.nu},
           {"gamma", s.gamma},
           {"separable", s.separable},
           {"range_factor", s.range_factor}};
  for (int i = 0; i < s.p; ++i) {
    std::vector<double> row(static_cast<std::size_t>(s.p)), crow(static_cast<std::size_t>(s.p));
    for (int k = 0; k < s.p; ++k) {
      row[static_cast<std::size_t>(k)] = s.rho(i, k);
      crow[static_cast<std::size_t>(k)] = s.c_cross(i, k);
    }
    j["rho"].push_back(row);
    j["c_cross"].push_back(crow);
  }
}

inline void from_json(const Json& j, RadialModelSpec& s) {
  s.family = j.at("family").get<std::string>();
  s.p = j.at("p").get<int>();
  if (s.p < 1) throw std::invalid_argument("model needs at least one variable");
  s.sigma2 = j.at("sigma2").get<std::vector<double>>();
  if (j.at("c").is_number()) {
    s.c.assign(static_cast<std::size_t>(s.p), j.at("c").get<double>());
  } else {
    s.c = j.at("c").get<std::vector<double>>();
  }
  const auto rho_rows = j.at("rho").get<std::vector<std::vector<double>>>();
  s.rho.resize(s.p, s.p);
  for (int i = 0; i < s.p; ++i)
    for (int k = 0; k < s.p; ++k)
      s.rho(i, k) = rho_rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k));
  s.nu = j.value("nu", 0.5);
  s.gamma = j.value("gamma", 1.0);
  s.separable = j.value("separable", false);
  s.range_factor = j.value("range_factor", 1.0);
  if (j.contains("c_cross")) {
    const auto rows = j.at("c_cross").get<std::vector<std::vector<double>>>();
    s.c_cross.resize(s.p, s.p);
    for (int i = 0; i < s.p; ++i)
      for (int k = 0; k < s.p; ++k)
        s.c_cross(i, k) = rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k));
  } else {
    apply_cross_scale_rule(s);
  }
  detail::check_structure(s);
}

}  // namespace spherecov
