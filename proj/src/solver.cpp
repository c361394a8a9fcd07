#include "sor/solver.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "sor/rng.hpp"
#include "sor/stats.hpp"

namespace sor {

namespace {

double inf_norm_or_inf(const Vector& g) {
  if (!g.allFinite()) return std::numeric_limits<double>::infinity();
  return g.lpNorm<Eigen::Infinity>();
}

// Residual evaluation that maps any evaluation failure (positivity, divergent
// tilt) to an infinite norm so the line search backs off instead of crashing.
bool try_residual(const EquationSystem& system, const Vector& x, Vector& g, double& norm) {
  try {
    g = system.residual(x);
  } catch (const std::exception&) {
    norm = std::numeric_limits<double>::infinity();
    return false;
  }
  norm = inf_norm_or_inf(g);
  return std::isfinite(norm);
}

}  // namespace

Matrix numeric_jacobian(const std::function<Vector(const Vector&)>& g, const Vector& at) {
  const int d = static_cast<int>(at.size());
  Matrix jac;
  for (int j = 0; j < d; ++j) {
    const double h = std::max(1e-6, 1e-6 * std::abs(at(j)));
    Vector lo = at, hi = at;
    lo(j) -= h;
    hi(j) += h;
    const Vector diff = (g(hi) - g(lo)) / (2.0 * h);
    if (jac.size() == 0) jac.resize(diff.size(), d);
    jac.col(j) = diff;
  }
  return jac;
}

SolveResult solve(const EquationSystem& system, const Vector& init, const SolveOptions& opt) {
  if (init.size() != system.dim()) {
    throw std::invalid_argument("solve: init has dimension " + std::to_string(init.size()) +
                                ", system expects " + std::to_string(system.dim()));
  }
  Rng jitter_rng(opt.jitter_seed);
  SolveResult best;
  best.params = init;

  for (int attempt = 0; attempt <= opt.max_restarts; ++attempt) {
    Vector x = init;
    if (attempt > 0) {
      for (int j = 0; j < x.size(); ++j) x(j) += opt.jitter_sd * jitter_rng.normal();
    }
    Vector g;
    double norm;
    if (!try_residual(system, x, g, norm)) continue;

    int iter = 0;
    bool stalled = false;
    while (norm >= opt.tolerance && iter < opt.max_iterations && !stalled) {
      ++iter;
      Matrix jac;
      try {
        jac = numeric_jacobian([&](const Vector& p) { return system.residual(p); }, x);
      } catch (const std::exception&) {
        stalled = true;
        break;
      }
      if (!jac.allFinite()) {
        stalled = true;
        break;
      }
      Eigen::PartialPivLU<Matrix> lu(jac);
      Vector step = lu.solve(-g);
      if (!step.allFinite()) {
        Matrix ridged = jac + opt.ridge * Matrix::Identity(jac.rows(), jac.cols());
        step = Eigen::PartialPivLU<Matrix>(ridged).solve(-g);
        if (!step.allFinite()) {
          stalled = true;
          break;
        }
      }
      // Halving line search on the max-abs residual.
      double lambda = 1.0;
      bool accepted = false;
      for (int h = 0; h <= opt.max_halvings; ++h, lambda *= 0.5) {
        Vector x_new = x + lambda * step;
        Vector g_new;
        double norm_new;
        if (try_residual(system, x_new, g_new, norm_new) && norm_new < norm) {
          x = std::move(x_new);
          g = std::move(g_new);
          norm = norm_new;
          accepted = true;
          break;
        }
      }
      if (!accepted) stalled = true;
    }

    if (norm < best.residual_norm) {
      best.params = x;
      best.residual_norm = norm;
      best.iterations = iter;
      best.restarts = attempt;
    }
    if (norm < opt.tolerance) {
      best.converged = true;
      break;
    }
  }

  if (!best.converged) {
    best.message = "no convergence after " + std::to_string(opt.max_restarts) +
                   " restarts; best max-abs residual " + std::to_string(best.residual_norm);
    return best;
  }
  if (opt.compute_covariance) {
    try {
      best.covariance = sandwich_covariance(system, best.params);
    } catch (const std::exception& e) {
      best.message = std::string("covariance unavailable: ") + e.what();
    }
  }
  return best;
}

Matrix sandwich_covariance(const EquationSystem& system, const Vector& solution) {
  const Matrix a = numeric_jacobian([&](const Vector& p) { return system.residual(p); }, solution);
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) {
    const Eigen::JacobiSVD<Matrix> svd(a);
    const double cond = svd.singularValues()(0) /
                        svd.singularValues()(svd.singularValues().size() - 1);
    throw std::runtime_error("sandwich covariance: Jacobian is singular (condition number " +
                             std::to_string(cond) + ")");
  }
  const Matrix rows = system.unit_contributions(solution);
  const Matrix b = rows.transpose() * rows;
  const Matrix a_inv = lu.inverse();
  Matrix cov = a_inv * b * a_inv.transpose();
  // Symmetrize away the asymmetry left by the numeric Jacobian.
  cov = 0.5 * (cov + cov.transpose()).eval();
  return cov;
}

Interval confidence_interval(double estimate, double se, double level) {
  const double z = normal_critical_value(level);
  return {estimate - z * se, estimate + z * se};
}

Vector bootstrap_se(const SurveyDataset& data,
                    const std::function<EquationSystem(const SurveyDataset&)>& rebuild,
                    const Vector& center, int resamples, std::uint64_t seed,
                    const SolveOptions& options) {
  if (resamples < 2) throw std::invalid_argument("bootstrap_se: need at least 2 resamples");
  const int n = data.n();
  std::vector<Vector> draws;
  draws.reserve(resamples);
  SolveOptions opt = options;
  opt.compute_covariance = false;
  for (int b = 0; b < resamples; ++b) {
    Rng rng(derive_stream(seed, 0x626F6F74ULL, static_cast<std::uint64_t>(b)));
    SurveyDataset sample;
    sample.weight.resize(n);
    sample.response.resize(n, data.calls());
    sample.outcome.resize(n);
    sample.x_missing.resize(n, data.x_missing.cols());
    sample.x_observed.resize(n, data.x_observed.cols());
    sample.names_missing = data.names_missing;
    sample.names_observed = data.names_observed;
    for (int i = 0; i < n; ++i) {
      const int pick = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(n));
      sample.weight(i) = data.weight(pick);
      sample.response.row(i) = data.response.row(pick);
      sample.outcome(i) = data.outcome(pick);
      sample.x_missing.row(i) = data.x_missing.row(pick);
      sample.x_observed.row(i) = data.x_observed.row(pick);
    }
    sample.validate_and_normalize();
    const EquationSystem sys = rebuild(sample);
    const SolveResult res = solve(sys, center, opt);
    if (res.converged) draws.push_back(res.params);
  }
  if (draws.size() < 2) throw std::runtime_error("bootstrap_se: too few converged resamples");
  Vector se(center.size());
  for (int j = 0; j < center.size(); ++j) {
    std::vector<double> column;
    column.reserve(draws.size());
    for (const Vector& d : draws) column.push_back(d(j));
    se(j) = sample_sd(column);
  }
  return se;
}

}  // namespace sor
