#include "sor/fit.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "sor/stats.hpp"

namespace sor {

namespace {

double logistic_deviance(const Matrix& x, const Vector& y, const Vector& w, const Vector& beta) {
  double dev = 0.0;
  for (int i = 0; i < x.rows(); ++i) {
    const double lp = x.row(i).dot(beta);
    // -2 sum w { y lp - log(1 + e^lp) }
    dev -= 2.0 * w(i) * (y(i) * lp - log1pexp(lp));
  }
  return dev;
}

}  // namespace

GlmFit fit_weighted_logistic(const Matrix& design, const Vector& y, const Vector& w,
                             int max_iterations, double tolerance) {
  const int n = static_cast<int>(design.rows());
  const int p = static_cast<int>(design.cols());
  if (y.size() != n || w.size() != n) {
    throw std::invalid_argument("fit_weighted_logistic: length mismatch");
  }
  GlmFit fit;
  fit.beta = Vector::Zero(p);
  double dev = logistic_deviance(design, y, w, fit.beta);
  for (int iter = 0; iter < max_iterations; ++iter) {
    fit.iterations = iter + 1;
    Vector score = Vector::Zero(p);
    Matrix hess = Matrix::Zero(p, p);
    for (int i = 0; i < n; ++i) {
      const double mu = expit(design.row(i).dot(fit.beta));
      score += w(i) * (y(i) - mu) * design.row(i).transpose();
      hess += w(i) * mu * (1.0 - mu) * design.row(i).transpose() * design.row(i);
    }
    if (score.lpNorm<Eigen::Infinity>() < tolerance) {
      fit.converged = true;
      return fit;
    }
    hess += 1e-10 * Matrix::Identity(p, p);
    Vector step = hess.ldlt().solve(score);
    if (!step.allFinite()) return fit;
    double lambda = 1.0;
    for (int h = 0; h < 30; ++h, lambda *= 0.5) {
      const Vector candidate = fit.beta + lambda * step;
      const double dev_new = logistic_deviance(design, y, w, candidate);
      // Tolerate rounding-level increases near the optimum.
      if (dev_new <= dev + 1e-10 * (1.0 + std::abs(dev))) {
        fit.beta = candidate;
        dev = dev_new;
        break;
      }
      if (h == 29) return fit;  // no improving step
    }
  }
  return fit;
}

GlmFit fit_weighted_linear(const Matrix& design, const Vector& y, const Vector& w) {
  const int n = static_cast<int>(design.rows());
  const int p = static_cast<int>(design.cols());
  if (y.size() != n || w.size() != n) {
    throw std::invalid_argument("fit_weighted_linear: length mismatch");
  }
  Matrix xtwx = Matrix::Zero(p, p);
  Vector xtwy = Vector::Zero(p);
  for (int i = 0; i < n; ++i) {
    xtwx += w(i) * design.row(i).transpose() * design.row(i);
    xtwy += w(i) * y(i) * design.row(i).transpose();
  }
  GlmFit fit;
  fit.beta = (xtwx + 1e-12 * Matrix::Identity(p, p)).ldlt().solve(xtwy);
  double rss = 0.0, wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = y(i) - design.row(i).dot(fit.beta);
    rss += w(i) * r * r;
    wsum += w(i);
  }
  fit.sigma2 = rss / wsum;
  fit.converged = true;
  fit.iterations = 1;
  return fit;
}

}  // namespace sor
