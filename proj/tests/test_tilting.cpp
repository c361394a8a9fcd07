#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sor/rng.hpp"
#include "sor/stats.hpp"
#include "sor/tilting.hpp"

using namespace sor;

namespace {

OutcomeModel binary_model(double p) {
  OutcomeModel om;
  om.family = OutcomeFamily::BinaryLogistic;
  om.design = FeatureMap::intercept_only();
  om.beta = Vector::Constant(1, logit(p));
  return om;
}

OutcomeModel gaussian_model(double mu, double sigma2) {
  OutcomeModel om;
  om.family = OutcomeFamily::GaussianLinear;
  om.design = FeatureMap::intercept_only();
  om.beta = Vector::Constant(1, mu);
  om.sigma2 = sigma2;
  return om;
}

OddsRatioTerm scalar_term(double gamma) {
  return OddsRatioTerm{OddsRatioDesign::outcome_only(), Vector::Constant(1, gamma)};
}

// Independent oracle: two-point renormalization written out directly.
double binary_tilt_oracle(double p, double gamma) {
  const double w1 = p * std::exp(-gamma);
  const double w0 = (1.0 - p);
  return w1 / (w1 + w0);
}

// Independent oracle: Simpson quadrature with ~1e5 nodes for
// E{U(Y) e^{-gamma Y}} / E{e^{-gamma Y}} under N(mu, sigma2).
double gaussian_tilt_oracle(double mu, double sigma2, double gamma) {
  const double sd = std::sqrt(sigma2);
  const double center = mu - gamma * sigma2;  // mode of the tilted density
  const double lo = std::min(mu, center) - 14.0 * sd;
  const double hi = std::max(mu, center) + 14.0 * sd;
  const int n = 100000;  // Simpson needs even n
  const double h = (hi - lo) / n;
  double num = 0.0, den = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double y = lo + i * h;
    const double coeff = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    const double logf = -0.5 * (y - mu) * (y - mu) / sigma2 - gamma * y;
    const double f = std::exp(logf);
    num += coeff * y * f;
    den += coeff * f;
  }
  return num / den;
}

const Vector kX = Vector::Zero(0).eval();  // intercept-only designs ignore x

}  // namespace

TEST_CASE("untilted conditional expectation") {
  // Binary p = 0.5, U = y.
  CHECK(conditional_expectation_g(binary_model(0.5), UFunction::outcome_only(), kX)(0) ==
        doctest::Approx(0.5).epsilon(1e-15));
  // Gaussian mean passes through.
  CHECK(conditional_expectation_g(gaussian_model(2.5, 4.0), UFunction::outcome_only(), kX)(0) ==
        doctest::Approx(2.5).epsilon(1e-15));
  // Binary p = 0.8 with U = (1, y).
  UFunction u = UFunction::affine([](const Vector&) { return Vector::Ones(1); },
                                  [](const Vector&) { return Vector::Ones(1); }, 1);
  // Stack manually: evaluate both components.
  const Vector g1 = conditional_expectation_g(binary_model(0.8), UFunction::outcome_only(), kX);
  CHECK(g1(0) == doctest::Approx(0.8).epsilon(1e-12));
  const Vector gc = conditional_expectation_g(
      binary_model(0.8), UFunction::affine([](const Vector&) { return Vector::Ones(1); },
                                           nullptr, 1),
      kX);
  CHECK(gc(0) == doctest::Approx(1.0).epsilon(1e-15));
  (void)u;
}

TEST_CASE("zero odds ratio leaves the expectation untilted") {
  for (double p : {0.1, 0.5, 0.9}) {
    const double g = conditional_expectation_g(binary_model(p), UFunction::outcome_only(), kX)(0);
    const double h =
        tilted_expectation_h(binary_model(p), scalar_term(0.0), UFunction::outcome_only(), kX)(0);
    CHECK(h == doctest::Approx(g).epsilon(1e-15));
  }
  const double g = conditional_expectation_g(gaussian_model(1.7, 2.0),
                                             UFunction::outcome_only(), kX)(0);
  const double h = tilted_expectation_h(gaussian_model(1.7, 2.0), scalar_term(0.0),
                                        UFunction::outcome_only(), kX)(0);
  CHECK(h == doctest::Approx(g).epsilon(1e-15));
}

TEST_CASE("binary tilt matches the two-point oracle") {
  const double h =
      tilted_expectation_h(binary_model(0.8), scalar_term(1.0), UFunction::outcome_only(), kX)(0);
  const double oracle = binary_tilt_oracle(0.8, 1.0);
  CHECK(h == doctest::Approx(oracle).epsilon(1e-13));
  CHECK(h == doctest::Approx(0.5954).epsilon(2e-4));
  // Full grid at the acceptance tolerance.
  for (double p : {0.05, 0.3, 0.5, 0.8, 0.95}) {
    for (double gamma : {-2.0, -0.7, 0.3, 1.0, 2.0}) {
      const double got = tilted_expectation_h(binary_model(p), scalar_term(gamma),
                                              UFunction::outcome_only(), kX)(0);
      CHECK(std::abs(got - binary_tilt_oracle(p, gamma)) < 1e-12);
    }
  }
}

TEST_CASE("gaussian closed form equals quadrature over the grid") {
  // Closed form: mean shifts by -gamma sigma2.
  const double h = tilted_expectation_h(gaussian_model(2.0, 3.0), scalar_term(0.5),
                                        UFunction::outcome_only(), kX)(0);
  CHECK(h == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(h - gaussian_tilt_oracle(2.0, 3.0, 0.5)) < 1e-8);
  for (double gamma : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    for (double mu : {-5.0, 0.0, 5.0}) {
      for (double s2 : {0.1, 1.0, 5.0}) {
        const double got = tilted_expectation_h(gaussian_model(mu, s2), scalar_term(gamma),
                                                UFunction::outcome_only(), kX)(0);
        CHECK(std::abs(got - gaussian_tilt_oracle(mu, s2, gamma)) < 1e-8);
      }
    }
  }
}

TEST_CASE("general (non-affine) U goes through quadrature and stays close") {
  // U = y^2 under a tilted Gaussian: moments of N(mu - g s2, s2).
  UFunction usq = UFunction::general_fn(
      1, [](const Vector&, double y) { return Vector::Constant(1, y * y); });
  const double mu = 1.0, s2 = 2.0, gamma = 0.7;
  const double mt = mu - gamma * s2;
  const double expected = s2 + mt * mt;
  const double got =
      tilted_expectation_h(gaussian_model(mu, s2), scalar_term(gamma), usq, kX)(0);
  CHECK(got == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("tilting toward nonresponse lowers the success probability") {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const double p = rng.uniform(0.01, 0.99);
    const double gamma = rng.uniform(0.01, 2.5);
    const double h =
        tilted_expectation_h(binary_model(p), scalar_term(gamma), UFunction::outcome_only(), kX)(0);
    CHECK(h < p);
  }
}

TEST_CASE("tilted expectation is continuous in gamma") {
  const double base = tilted_outcome_mean(binary_model(0.7), scalar_term(0.8), kX);
  const double nearby = tilted_outcome_mean(binary_model(0.7), scalar_term(0.8 + 1e-9), kX);
  CHECK(std::abs(base - nearby) < 1e-8);
}

TEST_CASE("estimand imputation") {
  // Mean kind at theta = h_y gives zero.
  const double hy = tilted_outcome_mean(binary_model(0.8), scalar_term(1.0), kX);
  const EstimandSpec mean = EstimandSpec::mean();
  CHECK(impute_estimand_h_m(binary_model(0.8), scalar_term(1.0), mean,
                            Vector::Constant(1, hy), kX)(0) ==
        doctest::Approx(0.0).epsilon(1e-14));
  // gamma = 0 reduces to g_y - theta.
  CHECK(impute_estimand_h_m(binary_model(0.8), scalar_term(0.0), mean, Vector::Zero(1), kX)(0) ==
        doctest::Approx(0.8).epsilon(1e-14));
  // Same oracle as the tilt itself at theta = 0.
  CHECK(impute_estimand_h_m(binary_model(0.8), scalar_term(1.0), mean, Vector::Zero(1), kX)(0) ==
        doctest::Approx(binary_tilt_oracle(0.8, 1.0)).epsilon(1e-13));
}

TEST_CASE("divergent tilt reports a numeric error") {
  // Gamma = -y^2 makes e^{-Gamma} grow faster than the Gaussian decays.
  OddsRatioDesign bad = OddsRatioDesign::general(
      1, [](const Vector&, double y) { return Vector::Constant(1, -y * y); });
  OddsRatioTerm term{bad, Vector::Constant(1, 1.0)};
  CHECK_THROWS_AS(
      tilted_expectation_h(gaussian_model(0.0, 1.0), term, UFunction::outcome_only(), kX),
      std::runtime_error);
}

TEST_CASE("gauss hermite rule integrates polynomials") {
  const GaussHermite& rule = gauss_hermite();
  double m0 = 0, m2 = 0;
  for (int q = 0; q < rule.nodes.size(); ++q) {
    m0 += rule.weights(q);
    m2 += rule.weights(q) * rule.nodes(q) * rule.nodes(q);
  }
  CHECK(m0 == doctest::Approx(std::sqrt(M_PI)).epsilon(1e-12));
  CHECK(m2 == doctest::Approx(0.5 * std::sqrt(M_PI)).epsilon(1e-12));
}
