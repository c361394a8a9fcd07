#pragma once

#include <functional>

#include "sor/design.hpp"
#include "sor/model.hpp"
#include "sor/stats.hpp"

namespace sor {

// Log odds ratio term Gamma(x, y) = gamma' u(x, y) with concrete coefficients.
struct OddsRatioTerm {
  OddsRatioDesign design;
  Vector gamma;

  double operator()(const Vector& x, double y) const { return gamma.dot(design.eval(x, y)); }
  bool linear_in_y() const { return design.linear_in_y; }
  // dGamma/dy for designs linear in y.
  double slope(const Vector& x) const { return gamma.dot(design.slope(x)); }
};

// Vector-valued function U(x, y).  All functions used by the estimators are
// affine in y, U(x, y) = c(x) + y s(x); the general form exists for the
// quadrature path.
struct UFunction {
  int dim = 0;
  bool affine_in_y = false;
  std::function<Vector(const Vector&)> constant;  // c(x)
  std::function<Vector(const Vector&)> slope;     // s(x)
  std::function<Vector(const Vector&, double)> general;

  Vector eval(const Vector& x, double y) const;

  static UFunction affine(std::function<Vector(const Vector&)> c,
                          std::function<Vector(const Vector&)> s, int dim);
  static UFunction outcome_scaled(FeatureMap f);  // U = y f(x)
  static UFunction outcome_only();                // U = y
  static UFunction of_features(FeatureMap f);     // U = f(x)
  static UFunction general_fn(int dim, std::function<Vector(const Vector&, double)> u);
};

// g_U(x) = E{U(X,Y) | X = x} under the outcome model (the conditional law
// among the respondents the model describes).  Binary family: exact two-point
// sum.  Gaussian family: closed form for affine U, Gauss-Hermite quadrature
// otherwise.
Vector conditional_expectation_g(const OutcomeModel& outcome, const UFunction& U,
                                 const Vector& x);

// h_U(x) = E{U(X,Y) | X = x, nonrespondent} obtained by exponential tilting:
//   h_U = Int U(x,y) e^{-Gamma(x,y)} f(y|x) dy / Int e^{-Gamma(x,y)} f(y|x) dy.
// Binary family: two-point sum.  Gaussian family with Gamma = t(x) y: the
// tilted law is N(mu - t(x) sigma2, sigma2), used in closed form; general
// Gamma falls back to quadrature and throws std::runtime_error when the tilt
// integral is not finite.
Vector tilted_expectation_h(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                            const UFunction& U, const Vector& x);

// h_m(x) = E{m(X,Y;theta) | X = x, nonrespondent}: the tilted expectation of
// the estimand function.  Both estimand kinds are affine in y, so this
// reduces to the tilted outcome mean.
Vector impute_estimand_h_m(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                           const EstimandSpec& spec, const Vector& theta, const Vector& x);

// Tilted mean of the outcome itself, E{Y | x, nonrespondent}.
double tilted_outcome_mean(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                           const Vector& x);

// Tilted success probability from a binary linear predictor and the log odds
// ratio at y = 1: expit(lp - gamma_at_1).  The identity used everywhere the
// binary family is tilted.
inline double binary_tilted_prob(double linear_predictor, double gamma_at_1) {
  return expit(linear_predictor - gamma_at_1);
}

// Gauss-Hermite rule for integrals against exp(-z^2); nodes/weights computed
// once per order by Golub-Welsch and cached.
struct GaussHermite {
  Vector nodes;
  Vector weights;
};
const GaussHermite& gauss_hermite(int order = 40);

}  // namespace sor
