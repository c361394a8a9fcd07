#include "sor/types.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace sor {

Vector SurveyDataset::covariate_row(int i) const {
  Vector x(dim_x());
  x << x_missing.row(i).transpose(), x_observed.row(i).transpose();
  return x;
}

void SurveyDataset::validate_and_normalize() {
  const int nn = n();
  const int K = calls();
  if (nn == 0) throw std::invalid_argument("dataset is empty");
  if (K < 2) throw std::invalid_argument("dataset needs at least two calls");
  if (response.rows() != nn || outcome.size() != nn || x_missing.rows() != nn ||
      x_observed.rows() != nn) {
    throw std::invalid_argument("dataset field lengths disagree");
  }
  double wsum = 0.0;
  for (int i = 0; i < nn; ++i) {
    const double w = weight(i);
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("unit " + std::to_string(i) +
                                  ": weight must be positive and finite");
    }
    wsum += w;
    for (int k = 0; k < K; ++k) {
      const int r = response(i, k);
      if (r != 0 && r != 1) {
        throw std::invalid_argument("unit " + std::to_string(i) +
                                    ": response indicators must be 0 or 1");
      }
      if (k > 0 && response(i, k) < response(i, k - 1)) {
        throw std::invalid_argument("unit " + std::to_string(i) +
                                    ": response indicators must be monotone over calls");
      }
    }
    if (observed(i)) {
      if (!std::isfinite(outcome(i))) {
        throw std::invalid_argument("unit " + std::to_string(i) + ": outcome not finite");
      }
      for (int j = 0; j < x_missing.cols(); ++j) {
        if (!std::isfinite(x_missing(i, j))) {
          throw std::invalid_argument("unit " + std::to_string(i) +
                                      ": co-missing covariate not finite");
        }
      }
    }
    for (int j = 0; j < x_observed.cols(); ++j) {
      if (!std::isfinite(x_observed(i, j))) {
        throw std::invalid_argument("unit " + std::to_string(i) +
                                    ": design covariate not finite");
      }
    }
  }
  weight *= static_cast<double>(nn) / wsum;
}

void CovariateDistribution::validate() const {
  if (size() == 0) throw std::invalid_argument("covariate distribution has empty support");
  if (support.rows() != size()) {
    throw std::invalid_argument("covariate distribution: support/mass lengths disagree");
  }
  double total = 0.0;
  for (int j = 0; j < size(); ++j) {
    if (!(mass(j) >= 0.0) || !std::isfinite(mass(j))) {
      throw std::invalid_argument("covariate distribution: masses must be nonnegative");
    }
    total += mass(j);
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw std::invalid_argument("covariate distribution: masses sum to " +
                                std::to_string(total) + ", expected 1");
  }
  if (!support.allFinite()) {
    throw std::invalid_argument("covariate distribution: support must be finite");
  }
}

Vector population_expectation(const CovariateDistribution& dist,
                              const std::function<Vector(const Vector&)>& V) {
  dist.validate();
  Vector acc = dist.mass(0) * V(dist.support.row(0).transpose());
  for (int j = 1; j < dist.size(); ++j) {
    acc += dist.mass(j) * V(dist.support.row(j).transpose());
  }
  return acc;
}

CovariateDistribution product_distribution(const CovariateDistribution& d1,
                                           const CovariateDistribution& d2) {
  d1.validate();
  d2.validate();
  CovariateDistribution out;
  const int m = d1.size() * d2.size();
  out.support.resize(m, d1.dim() + d2.dim());
  out.mass.resize(m);
  int row = 0;
  for (int j = 0; j < d1.size(); ++j) {
    for (int k = 0; k < d2.size(); ++k, ++row) {
      out.support.row(row) << d1.support.row(j), d2.support.row(k);
      out.mass(row) = d1.mass(j) * d2.mass(k);
    }
  }
  // Product of exactly normalized masses can drift at the last ulp; renormalize.
  out.mass /= out.mass.sum();
  return out;
}

CovariateDistribution empirical_observed_distribution(const SurveyDataset& data) {
  if (data.x_observed.cols() == 0) {
    throw std::invalid_argument("dataset has no always-observed covariates");
  }
  std::map<std::vector<double>, double> cells;
  for (int i = 0; i < data.n(); ++i) {
    std::vector<double> key(data.x_observed.cols());
    for (int j = 0; j < data.x_observed.cols(); ++j) key[j] = data.x_observed(i, j);
    cells[key] += data.weight(i);
  }
  CovariateDistribution out;
  out.support.resize(static_cast<int>(cells.size()), data.x_observed.cols());
  out.mass.resize(static_cast<int>(cells.size()));
  int row = 0;
  double total = 0.0;
  for (const auto& [key, w] : cells) total += w;
  for (const auto& [key, w] : cells) {
    for (std::size_t j = 0; j < key.size(); ++j) out.support(row, static_cast<int>(j)) = key[j];
    out.mass(row) = w / total;
    ++row;
  }
  return out;
}

}  // namespace sor
