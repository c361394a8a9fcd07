#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "sor/system.hpp"

namespace sor {

struct SolveOptions {
  double tolerance = 1e-8;    // convergence threshold on the max-abs residual
  int max_iterations = 100;   // Newton iterations per start
  int max_halvings = 30;      // step halvings per line search
  int max_restarts = 5;       // jittered restarts after a stall
  double jitter_sd = 0.5;     // sd of Gaussian jitter applied to the init
  std::uint64_t jitter_seed = 20210601;
  double ridge = 1e-8;        // Jacobian regularization before giving up
  bool compute_covariance = true;
};

struct SolveResult {
  Vector params;
  double residual_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int restarts = 0;
  bool converged = false;
  Matrix covariance;  // sandwich estimate; empty when not computed
  std::string message;
};

// Damped Newton root finder for square systems: step = -J^{-1} g with halving
// line search on ||g||_inf.  A stall triggers up to max_restarts jittered
// re-initializations.  Never throws for numeric failure; a singular Jacobian
// (after ridge regularization) or exhausted restarts yields converged = false.
SolveResult solve(const EquationSystem& system, const Vector& init,
                  const SolveOptions& options = {});

// Central-difference Jacobian with per-coordinate step max(1e-6, 1e-6 |x_j|).
Matrix numeric_jacobian(const std::function<Vector(const Vector&)>& g, const Vector& at);

// M-estimation covariance A^{-1} B A^{-T}: A is the Jacobian of the
// weight-normalized moment function at the solution, B the sum of outer
// products of the scaled per-unit contributions.  Population-expectation
// terms are known constants and add no variance of their own.
// Throws std::runtime_error (with the condition estimate) if A is singular.
Matrix sandwich_covariance(const EquationSystem& system, const Vector& solution);

struct Interval {
  double lo;
  double hi;
};

// Normal-approximation interval: estimate +/- z_{(1+level)/2} * se.
Interval confidence_interval(double estimate, double se, double level = 0.95);

// Unit-level nonparametric bootstrap cross-check of the sandwich standard
// errors.  `rebuild` constructs the estimating system for a resampled dataset
// (weights carried with the units); each resample is re-solved from `center`.
// Returns the per-parameter standard deviation across converged resamples.
Vector bootstrap_se(const SurveyDataset& data,
                    const std::function<EquationSystem(const SurveyDataset&)>& rebuild,
                    const Vector& center, int resamples, std::uint64_t seed,
                    const SolveOptions& options = {});

}  // namespace sor
