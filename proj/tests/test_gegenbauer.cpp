#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spherecov/gegenbauer.hpp"
#include "spherecov/rng.hpp"

using namespace spherecov;
using Catch::Matchers::WithinAbs;

TEST_CASE("index-zero basis reduces to cosines", "[gegenbauer]") {
  const UltrasphericalBasis circle(1);
  CHECK(circle.lambda == 0.0);
  const CounterRng rng(31, 0);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const double theta = pi * rng.uniform(i);
    std::vector<double> values;
    ultraspherical_all(circle, 12, std::cos(theta), values);
    for (int k = 0; k <= 12; ++k) CHECK_THAT(values[static_cast<std::size_t>(k)], WithinAbs(std::cos(k * theta), 1e-12));
  }
}

TEST_CASE("index-half basis gives the classical degree formulas", "[gegenbauer]") {
  const UltrasphericalBasis sphere(2);
  CHECK(sphere.lambda == 0.5);
  const CounterRng rng(32, 0);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const double mu = 2.0 * rng.uniform(i) - 1.0;
    CHECK(ultraspherical_eval(sphere, 0, mu) == 1.0);
    CHECK_THAT(ultraspherical_eval(sphere, 1, mu), WithinAbs(mu, 1e-15));
    CHECK_THAT(ultraspherical_eval(sphere, 2, mu), WithinAbs((3.0 * mu * mu - 1.0) / 2.0, 1e-14));
    CHECK_THAT(ultraspherical_eval(sphere, 3, mu),
               WithinAbs((5.0 * mu * mu * mu - 3.0 * mu) / 2.0, 1e-14));
    CHECK_THAT(ultraspherical_eval(sphere, 4, mu),
               WithinAbs((35.0 * std::pow(mu, 4) - 30.0 * mu * mu + 3.0) / 8.0, 1e-14));
  }
  for (int k = 0; k <= 20; ++k) {
    CHECK_THAT(ultraspherical_eval(sphere, k, 1.0), WithinAbs(1.0, 1e-13));
    CHECK_THAT(ultraspherical_eval(sphere, k, -1.0), WithinAbs(k % 2 == 0 ? 1.0 : -1.0, 1e-13));
  }
}

TEST_CASE("basis matches its generating function", "[gegenbauer]") {
  // sum_k r^k P_k(mu) = (1 + r^2 - 2 r mu)^(-lambda) for lambda > 0
  const UltrasphericalBasis sphere(2);
  const CounterRng rng(33, 0);
  for (std::uint64_t i = 0; i < 20; ++i) {
    const double mu = 2.0 * rng.uniform(i) - 1.0;
    const double r = 0.3;
    std::vector<double> values;
    ultraspherical_all(sphere, 80, mu, values);
    double sum = 0.0, rk = 1.0;
    for (int k = 0; k <= 80; ++k) {
      sum += rk * values[static_cast<std::size_t>(k)];
      rk *= r;
    }
    CHECK_THAT(sum, WithinAbs(1.0 / std::sqrt(1.0 + r * r - 2.0 * r * mu), 1e-12));
  }
}

TEST_CASE("quadrature integrates polynomials and transcendentals", "[gegenbauer]") {
  const QuadratureRule rule = gauss_legendre(4);
  double integral = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double x = rule.nodes[i];
    integral += rule.weights[i] * (5.0 * std::pow(x, 7) - 2.0 * std::pow(x, 6) + x * x - 3.0);
  }
  // degree seven is exact for four nodes: integral = -2 * 2/7 - 3 * 2 + 2/3
  CHECK_THAT(integral, WithinAbs(-2.0 * 2.0 / 7.0 - 6.0 + 2.0 / 3.0, 1e-13));

  const QuadratureRule on_pi = gauss_legendre_on(20, 0.0, pi);
  double sin_integral = 0.0;
  for (std::size_t i = 0; i < on_pi.nodes.size(); ++i)
    sin_integral += on_pi.weights[i] * std::sin(on_pi.nodes[i]);
  CHECK_THAT(sin_integral, WithinAbs(2.0, 1e-13));
}

TEST_CASE("basis functions are orthogonal under the surface weight", "[gegenbauer]") {
  for (int dim : {1, 2}) {
    const UltrasphericalBasis basis(dim);
    const QuadratureRule rule = gauss_legendre_on(200, 0.0, pi);
    std::vector<double> values;
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(11, 11);
    for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
      const double theta = rule.nodes[q];
      const double w = rule.weights[q] * (dim == 2 ? std::sin(theta) : 1.0);
      ultraspherical_all(basis, 10, std::cos(theta), values);
      for (int a = 0; a <= 10; ++a)
        for (int b = 0; b <= 10; ++b) gram(a, b) += w * values[static_cast<std::size_t>(a)] * values[static_cast<std::size_t>(b)];
    }
    for (int a = 0; a <= 10; ++a)
      for (int b = 0; b <= 10; ++b)
        CHECK_THAT(gram(a, b), WithinAbs(a == b ? basis_norm(basis, a) : 0.0, 1e-10));
  }
}

TEST_CASE("circle expansion of the exponential model matches the closed form", "[gegenbauer]") {
  // b_k of exp(-a theta) on the circle: a (1 - (-1)^k e^(-a pi)) / (a^2 + k^2) / norm
  RadialModelSpec s = make_preset("M1");
  s.p = 1;
  s.sigma2 = {1.0};
  s.c = {1.0};
  s.rho = Eigen::MatrixXd::Identity(1, 1);
  s.range_factor = 6.0;
  apply_cross_scale_rule(s);

  const SchoenbergSequence seq = extract_schoenberg(s, 1, 30, 400);
  const double a = 6.0;
  for (int k = 0; k <= 30; ++k) {
    const double closed = a * (1.0 - (k % 2 == 0 ? 1.0 : -1.0) * std::exp(-a * pi)) /
                          (a * a + k * k) / (k == 0 ? pi : pi / 2.0);
    CHECK_THAT(seq.coeff[static_cast<std::size_t>(k)](0, 0), WithinAbs(closed, 1e-12));
  }
}

TEST_CASE("sphere expansion coefficients match frozen reference values", "[gegenbauer]") {
  const SchoenbergSequence seq = extract_schoenberg(make_preset("M1"), 2, 30, 400);
  // var 1: exp(-30 theta); var 2: exp(-15 theta); cross: 0.5 exp(-15 theta)
  const double b_fast[4] = {0.0005549389567147614, 0.00165929203539823, 0.0027472225579938682,
                            0.0038082805193801446};
  const double b_slow[4] = {0.0022123893805309734, 0.006550218340611353, 0.010636487406398911,
                            0.0143325662722644};
  for (int k = 0; k < 4; ++k) {
    CHECK_THAT(seq.coeff[static_cast<std::size_t>(k)](0, 0), WithinAbs(b_fast[k], 1e-11));
    CHECK_THAT(seq.coeff[static_cast<std::size_t>(k)](1, 1), WithinAbs(b_slow[k], 1e-11));
    CHECK_THAT(seq.coeff[static_cast<std::size_t>(k)](0, 1), WithinAbs(0.5 * b_slow[k], 1e-11));
    CHECK(seq.coeff[static_cast<std::size_t>(k)](0, 1) == seq.coeff[static_cast<std::size_t>(k)](1, 0));
  }

  const SchoenbergSequence hyp = extract_schoenberg(make_preset("M2"), 2, 10, 400);
  CHECK_THAT(hyp.coeff[0](0, 1), WithinAbs(0.0035718701904735874, 1e-11));

  const SchoenbergSequence compact = extract_schoenberg(make_preset("M3"), 2, 10, 400);
  CHECK_THAT(compact.coeff[0](1, 1), WithinAbs(0.0014272493382921354, 1e-10));
  CHECK_THAT(compact.coeff[3](1, 1), WithinAbs(0.0098255556592539, 1e-10));
}

TEST_CASE("expansion is stable under quadrature refinement", "[gegenbauer]") {
  const SchoenbergSequence coarse = extract_schoenberg(make_preset("M2"), 2, 30, 400);
  const SchoenbergSequence fine = extract_schoenberg(make_preset("M2"), 2, 30, 1600);
  for (int k = 0; k <= 30; ++k)
    CHECK((coarse.coeff[static_cast<std::size_t>(k)] - fine.coeff[static_cast<std::size_t>(k)]).cwiseAbs().maxCoeff() < 2e-8);
}

TEST_CASE("partial sums approach the collocated covariance from below", "[gegenbauer]") {
  const SchoenbergSequence seq = extract_schoenberg(make_preset("M2"), 2, 120, 800);
  double sum00 = 0.0, sum01 = 0.0;
  for (const auto& b : seq.coeff) {
    CHECK(b(0, 0) >= -1e-12);
    CHECK(b(1, 1) >= -1e-12);
    sum00 += b(0, 0);
    sum01 += b(0, 1);
  }
  // the collocated value is 1; a short-range model leaves real mass beyond
  // degree 120, so the partial sum sits well below it
  CHECK(sum00 <= 1.0 + 1e-9);
  CHECK(sum00 > 0.3);
  CHECK(std::abs(sum01) < sum00);
  CHECK(seq.residual < 1.0 - sum00 + 1e-6);
  CHECK(seq.residual > 0.0);
}

TEST_CASE("reconstruction converges away from the origin", "[gegenbauer]") {
  RadialModelSpec s = make_preset("M2");
  const SchoenbergSequence seq = extract_schoenberg(s, 2, 200, 800);
  for (double theta : {0.5, 1.0, 2.0, 3.0})
    CHECK_THAT(schoenberg_reconstruct(seq, 0, 1, theta), WithinAbs(radial_eval(s, 0, 1, theta), 2e-3));
}

TEST_CASE("admissible presets pass the eigenvalue check and a bad model fails", "[gegenbauer]") {
  for (const char* name : {"M1", "M2", "M3"}) {
    const SchoenbergSequence seq = extract_schoenberg(make_preset(name), 2, 30, 400);
    const PsdCheckResult res = check_psd_sequence(seq, 1e-6);
    CHECK(res.ok);
    CHECK(res.min_eigenvalue >= -1e-6);
    CHECK(res.min_eig_per_degree.size() == 31);
  }

  RadialModelSpec bad = make_preset("M1");
  bad.c = {0.05, 0.5};
  apply_cross_scale_rule(bad);
  bad.rho(0, 1) = bad.rho(1, 0) = 0.99;
  CHECK_FALSE(validate_params(bad).ok);
  const PsdCheckResult res = check_psd_sequence(extract_schoenberg(bad, 2, 30, 400), 1e-6);
  CHECK_FALSE(res.ok);
  CHECK_THAT(res.min_eig_per_degree[0], WithinAbs(-0.008130469230389714, 1e-9));
  CHECK(res.min_eigenvalue <= res.min_eig_per_degree[0]);
}

TEST_CASE("degenerate quadrature and degree arguments throw", "[gegenbauer]") {
  CHECK_THROWS_AS(extract_schoenberg(make_preset("M1"), 2, -1, 400), std::invalid_argument);
  CHECK_THROWS_AS(extract_schoenberg(make_preset("M1"), 2, 10, 4), std::invalid_argument);
  CHECK_THROWS_AS(UltrasphericalBasis(3), std::invalid_argument);
  CHECK_THROWS_AS(gauss_legendre(0), std::invalid_argument);
}
