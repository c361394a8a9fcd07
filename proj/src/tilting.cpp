#include "sor/tilting.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include "sor/stats.hpp"

namespace sor {

Vector UFunction::eval(const Vector& x, double y) const {
  if (affine_in_y) {
    Vector v = constant ? constant(x) : Vector(Vector::Zero(dim));
    if (slope) v += y * slope(x);
    return v;
  }
  return general(x, y);
}

UFunction UFunction::affine(std::function<Vector(const Vector&)> c,
                            std::function<Vector(const Vector&)> s, int dim) {
  UFunction u;
  u.dim = dim;
  u.affine_in_y = true;
  u.constant = std::move(c);
  u.slope = std::move(s);
  return u;
}

UFunction UFunction::outcome_scaled(FeatureMap f) {
  const int d = f.dim();
  return affine(nullptr, [f = std::move(f)](const Vector& x) { return f(x); }, d);
}

UFunction UFunction::outcome_only() {
  return affine(nullptr, [](const Vector&) { return Vector::Ones(1); }, 1);
}

UFunction UFunction::of_features(FeatureMap f) {
  const int d = f.dim();
  return affine([f = std::move(f)](const Vector& x) { return f(x); }, nullptr, d);
}

UFunction UFunction::general_fn(int dim, std::function<Vector(const Vector&, double)> u) {
  UFunction out;
  out.dim = dim;
  out.affine_in_y = false;
  out.general = std::move(u);
  return out;
}

const GaussHermite& gauss_hermite(int order) {
  static std::map<int, GaussHermite> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(order);
  if (it != cache.end()) return it->second;
  if (order < 2) throw std::invalid_argument("gauss_hermite: order must be >= 2");
  // Golub-Welsch on the Hermite Jacobi matrix (weight e^{-z^2}).
  Matrix jacobi = Matrix::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    const double off = std::sqrt(k / 2.0);
    jacobi(k, k - 1) = off;
    jacobi(k - 1, k) = off;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
  GaussHermite rule;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(order);
  const double sqrt_pi = std::sqrt(M_PI);
  for (int k = 0; k < order; ++k) {
    const double v0 = es.eigenvectors()(0, k);
    rule.weights(k) = sqrt_pi * v0 * v0;
  }
  return cache.emplace(order, std::move(rule)).first->second;
}

namespace {

// Shared weighted-sum core: E{U(x,Y) e^{-Gamma(x,Y)}} / E{e^{-Gamma(x,Y)}}
// under the Gaussian outcome law, by Gauss-Hermite.  orm may be null (no tilt).
Vector gaussian_quadrature_expectation(const OutcomeModel& outcome, const OddsRatioTerm* orm,
                                       const UFunction& U, const Vector& x) {
  const GaussHermite& rule = gauss_hermite();
  const double mu = outcome.linear_predictor(x);
  const double sd = std::sqrt(outcome.sigma2);
  // Shift exponents by their maximum before exponentiating.
  Vector log_tilt = Vector::Zero(rule.nodes.size());
  if (orm != nullptr) {
    for (int q = 0; q < rule.nodes.size(); ++q) {
      const double y = mu + std::sqrt(2.0) * sd * rule.nodes(q);
      log_tilt(q) = -(*orm)(x, y);
    }
  }
  const double shift = log_tilt.maxCoeff();
  Vector num = Vector::Zero(U.dim);
  double den = 0.0;
  int arg_max = 0;
  double summand_max = -1.0;
  for (int q = 0; q < rule.nodes.size(); ++q) {
    const double y = mu + std::sqrt(2.0) * sd * rule.nodes(q);
    const double wq = rule.weights(q) * std::exp(log_tilt(q) - shift);
    if (wq > summand_max) {
      summand_max = wq;
      arg_max = q;
    }
    num += wq * U.eval(x, y);
    den += wq;
  }
  // A tilt that outgrows the Gaussian decay puts the largest summand on an
  // endpoint node: the integral does not exist and the sum is meaningless.
  const bool edge_dominated = arg_max == 0 || arg_max == rule.nodes.size() - 1;
  if (!(den > 0.0) || !num.allFinite() || !std::isfinite(den) || edge_dominated) {
    throw std::runtime_error("tilted expectation: tilt integral is not finite");
  }
  return num / den;
}

}  // namespace

Vector conditional_expectation_g(const OutcomeModel& outcome, const UFunction& U,
                                 const Vector& x) {
  outcome.validate();
  if (outcome.family == OutcomeFamily::BinaryLogistic) {
    const double p = outcome.mean(x);
    return (1.0 - p) * U.eval(x, 0.0) + p * U.eval(x, 1.0);
  }
  if (U.affine_in_y) {
    const double mu = outcome.linear_predictor(x);
    return U.eval(x, mu);  // affine in y, so E U(x,Y) = U(x, E Y)
  }
  return gaussian_quadrature_expectation(outcome, nullptr, U, x);
}

Vector tilted_expectation_h(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                            const UFunction& U, const Vector& x) {
  outcome.validate();
  if (outcome.family == OutcomeFamily::BinaryLogistic) {
    const double p_tilted = binary_tilted_prob(outcome.linear_predictor(x), orm(x, 1.0));
    return (1.0 - p_tilted) * U.eval(x, 0.0) + p_tilted * U.eval(x, 1.0);
  }
  if (orm.linear_in_y() && U.affine_in_y) {
    // Tilting a Gaussian by e^{-t y} shifts the mean by -t sigma2.
    const double mu_tilted = outcome.linear_predictor(x) - orm.slope(x) * outcome.sigma2;
    return U.eval(x, mu_tilted);
  }
  return gaussian_quadrature_expectation(outcome, &orm, U, x);
}

Vector impute_estimand_h_m(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                           const EstimandSpec& spec, const Vector& theta, const Vector& x) {
  const double hy = tilted_outcome_mean(outcome, orm, x);
  if (spec.kind == EstimandSpec::Kind::Mean) return Vector::Constant(1, hy - theta(0));
  const Vector v = spec.regressor(x);
  return Vector(v * (hy - expit(v.dot(theta))));
}

double tilted_outcome_mean(const OutcomeModel& outcome, const OddsRatioTerm& orm,
                           const Vector& x) {
  return tilted_expectation_h(outcome, orm, UFunction::outcome_only(), x)(0);
}

}  // namespace sor
