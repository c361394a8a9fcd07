#include "sor/model.hpp"

#include <stdexcept>

#include "sor/stats.hpp"

namespace sor {

double PropensityModel::baseline_logit(int k, const Vector& x) const {
  return alpha.at(k).dot(baseline.at(k)(x));
}

double PropensityModel::log_odds_ratio(const Vector& x, double y) const {
  if (gamma.size() == 0) return 0.0;
  return gamma.dot(odds.eval(x, y));
}

double PropensityModel::propensity(int k, const Vector& x, double y) const {
  return expit(baseline_logit(k, x) + log_odds_ratio(x, y));
}

void PropensityModel::validate() const {
  if (baseline.size() != alpha.size()) {
    throw std::invalid_argument("propensity model: one coefficient vector per call required");
  }
  for (std::size_t k = 0; k < baseline.size(); ++k) {
    if (alpha[k].size() != baseline[k].dim()) {
      throw std::invalid_argument("propensity model: alpha_" + std::to_string(k + 1) +
                                  " has dimension " + std::to_string(alpha[k].size()) +
                                  ", design expects " + std::to_string(baseline[k].dim()));
    }
  }
  if (gamma.size() != odds.dim) {
    throw std::invalid_argument("propensity model: gamma has dimension " +
                                std::to_string(gamma.size()) + ", odds design expects " +
                                std::to_string(odds.dim));
  }
}

double OutcomeModel::linear_predictor(const Vector& x) const { return beta.dot(design(x)); }

double OutcomeModel::mean(const Vector& x) const {
  const double lp = linear_predictor(x);
  return family == OutcomeFamily::BinaryLogistic ? expit(lp) : lp;
}

void OutcomeModel::validate() const {
  if (beta.size() != design.dim()) {
    throw std::invalid_argument("outcome model: beta has dimension " +
                                std::to_string(beta.size()) + ", design expects " +
                                std::to_string(design.dim()));
  }
  if (family == OutcomeFamily::GaussianLinear && !(sigma2 > 0.0)) {
    throw std::invalid_argument("outcome model: sigma2 must be positive");
  }
}

Vector EstimandSpec::value(const Vector& x, double y, const Vector& theta) const {
  if (theta.size() != dim()) {
    throw std::invalid_argument("estimand: theta has dimension " +
                                std::to_string(theta.size()) + ", expected " +
                                std::to_string(dim()));
  }
  if (kind == Kind::Mean) return Vector::Constant(1, y - theta(0));
  const Vector v = regressor(x);
  return Vector(v * (y - expit(v.dot(theta))));
}

EstimandSpec EstimandSpec::mean() { return EstimandSpec{}; }

EstimandSpec EstimandSpec::logistic_regression(FeatureMap regressor) {
  EstimandSpec s;
  s.kind = Kind::LogisticRegression;
  s.regressor = std::move(regressor);
  return s;
}

}  // namespace sor
