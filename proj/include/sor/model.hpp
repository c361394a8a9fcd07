#pragma once

#include <vector>

#include "sor/design.hpp"
#include "sor/types.hpp"

namespace sor {

// Response propensity for each call k:
//   pi_k(x, y) = expit{ A_k(x) + Gamma(x, y) },
// with per-call baseline linear predictors A_k(x) = alpha_k' v_k(x) and one
// log odds ratio term Gamma(x, y) = gamma' u(x, y) shared by the first two
// calls.  Gamma(x, 0) = 0, so A_k is the log-odds of response at outcome
// reference level y = 0 and Gamma = 0 recovers missingness at random.
struct PropensityModel {
  std::vector<FeatureMap> baseline;  // design v_k per call
  std::vector<Vector> alpha;         // coefficients per call
  OddsRatioDesign odds;
  Vector gamma;

  int n_calls() const { return static_cast<int>(baseline.size()); }

  double baseline_logit(int k, const Vector& x) const;  // A_k(x)
  double log_odds_ratio(const Vector& x, double y) const;
  double propensity(int k, const Vector& x, double y) const;

  void validate() const;  // coefficient/design dimension agreement
};

enum class OutcomeFamily { BinaryLogistic, GaussianLinear };

// Conditional outcome law among call-k respondents: Bernoulli with
// P(Y=1|x) = expit(beta' d(x)), or N(beta' d(x), sigma2).
struct OutcomeModel {
  OutcomeFamily family = OutcomeFamily::BinaryLogistic;
  FeatureMap design;
  Vector beta;
  double sigma2 = 1.0;  // Gaussian family only

  double linear_predictor(const Vector& x) const;
  // E(Y | x): success probability (binary) or the linear predictor (Gaussian).
  double mean(const Vector& x) const;

  void validate() const;
};

// Full-data estimating function m(x, y; theta) defining the estimand:
//   mean:     m = y - theta
//   logistic: m = v(x) * { y - expit(v(x)' theta) }
struct EstimandSpec {
  enum class Kind { Mean, LogisticRegression };

  Kind kind = Kind::Mean;
  FeatureMap regressor;  // v(x), logistic kind only

  int dim() const { return kind == Kind::Mean ? 1 : regressor.dim(); }

  Vector value(const Vector& x, double y, const Vector& theta) const;

  static EstimandSpec mean();
  static EstimandSpec logistic_regression(FeatureMap regressor);
};

}  // namespace sor
