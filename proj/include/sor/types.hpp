#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

namespace sor {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// One survey with callback paradata.  response(i, k) = 1 iff unit i had
// answered by call k+1, so rows are monotone nondecreasing.  The outcome and
// the co-missing covariate block are defined only where observed(i) is true;
// masked entries hold zeros and must never be read directly (there is no
// sentinel value, presence is the mask).
struct SurveyDataset {
  Vector weight;               // sampling weights, normalized to mean 1
  Eigen::MatrixXi response;    // n x K cumulative response indicators
  Vector outcome;              // y, defined iff observed(i)
  Matrix x_missing;            // covariates co-missing with y (X1), n x d1
  Matrix x_observed;           // always-observed design covariates (X2), n x d2

  std::vector<std::string> names_missing;
  std::vector<std::string> names_observed;

  int n() const { return static_cast<int>(weight.size()); }
  int calls() const { return static_cast<int>(response.cols()); }
  int dim_x() const { return static_cast<int>(x_missing.cols() + x_observed.cols()); }

  bool observed(int i) const { return response(i, response.cols() - 1) == 1; }

  // Full covariate vector (X1, X2); valid only for observed units.
  Vector covariate_row(int i) const;

  // Checks monotone response rows, positive finite weights, finite values,
  // and the observed-iff-last-call contract; then rescales weights to mean 1.
  // Throws std::invalid_argument naming the first offending unit.
  void validate_and_normalize();
};

// Finite weighted support representing a known covariate distribution f(X).
// Rows of `support` share the (X1, X2) layout of SurveyDataset::covariate_row.
struct CovariateDistribution {
  Matrix support;  // m x d
  Vector mass;     // m, nonnegative, sums to 1

  int size() const { return static_cast<int>(mass.size()); }
  int dim() const { return static_cast<int>(support.cols()); }

  void validate() const;  // throws std::invalid_argument
};

// E_f{V(X)} = sum_j mass_j V(x_j).
Vector population_expectation(const CovariateDistribution& dist,
                              const std::function<Vector(const Vector&)>& V);

// Independent product law on the concatenated support (X1 from d1, X2 from d2).
CovariateDistribution product_distribution(const CovariateDistribution& d1,
                                           const CovariateDistribution& d2);

// Empirical weighted distribution of the always-observed covariate block.
CovariateDistribution empirical_observed_distribution(const SurveyDataset& data);

}  // namespace sor
