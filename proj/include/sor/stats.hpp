#pragma once

#include <cmath>
#include <vector>

namespace sor {

inline double expit(double t) {
  // Branch keeps exp() argument nonpositive so large |t| cannot overflow.
  if (t >= 0.0) {
    return 1.0 / (1.0 + std::exp(-t));
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + e^t) without overflow.
inline double log1pexp(double t) {
  if (t > 35.0) return t;
  if (t < -35.0) return std::exp(t);
  return std::log1p(std::exp(t));
}

double normal_cdf(double z);

// Inverse standard normal CDF, accurate to full double precision
// (Acklam's rational approximation polished by one Halley step).
double normal_quantile(double p);

// Two-sided z critical value for a central interval of the given level,
// e.g. level = 0.95 gives 1.959964...
double normal_critical_value(double level);

// Asymptotic Kolmogorov-Smirnov survival function: P(sqrt(n) D_n > x).
double kolmogorov_sf(double x);

// One-sample KS test p-value for values expected to be Unif(0,1).
double ks_uniform_pvalue(std::vector<double> values);

double mean(const std::vector<double>& v);
double sample_sd(const std::vector<double>& v);
double median(std::vector<double> v);

}  // namespace sor
