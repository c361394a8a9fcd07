#pragma once

#include "sor/types.hpp"

namespace sor {

struct GlmFit {
  Vector beta;
  double sigma2 = 0.0;  // linear family: weighted ML residual variance
  bool converged = false;
  int iterations = 0;
};

// Weighted logistic maximum likelihood by Newton with step halving on the
// deviance.  Returns the best iterate when the score does not vanish (e.g.
// separated data); callers using this for initialization only need a
// reasonable point, not a certificate.
GlmFit fit_weighted_logistic(const Matrix& design, const Vector& y, const Vector& w,
                             int max_iterations = 60, double tolerance = 1e-10);

// Weighted least squares with the weighted ML variance estimate.
GlmFit fit_weighted_linear(const Matrix& design, const Vector& y, const Vector& w);

}  // namespace sor
