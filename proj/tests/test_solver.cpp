#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sor/equations.hpp"
#include "sor/solver.hpp"
#include "sor/stats.hpp"
#include "sor/rng.hpp"

using namespace sor;

namespace {

EquationSystem scalar_system(std::function<double(double)> f) {
  ParameterLayout layout;
  layout.add("theta", 1);
  return EquationSystem(layout, 1, [f](const Vector& p, Vector& g, Matrix* rows) {
    g.resize(1);
    g(0) = f(p(0));
    if (rows != nullptr) {
      rows->resize(1, 1);
      (*rows)(0, 0) = g(0);
    }
  });
}

SurveyDataset full_response_data(const Vector& y, const Vector& w) {
  const int n = static_cast<int>(y.size());
  SurveyDataset d;
  d.weight = w;
  d.response = Eigen::MatrixXi::Ones(n, 2);
  d.outcome = y;
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  d.validate_and_normalize();
  return d;
}

}  // namespace

TEST_CASE("affine system solves in one Newton step") {
  EquationSystem sys = scalar_system([](double t) { return t - 4.25; });
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  CHECK(res.iterations == 1);
  CHECK(res.params(0) == doctest::Approx(4.25).epsilon(1e-9));
  CHECK(res.residual_norm < 1e-8);
}

TEST_CASE("expit root") {
  EquationSystem sys = scalar_system([](double t) { return expit(t) - 0.5; });
  const SolveResult res = solve(sys, Vector::Constant(1, 3.0));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-7));
}

TEST_CASE("no root means a clean non-convergence result") {
  EquationSystem sys = scalar_system([](double t) { return t * t + 1.0; });
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK_FALSE(res.converged);
  CHECK(res.message.size() > 0);
}

TEST_CASE("solve is deterministic given the jitter seed") {
  // A system whose solve needs restarts: steep flat tails.
  auto f = [](double t) { return std::tanh(t - 3.0) + std::tanh(t + 5.0); };
  EquationSystem sys = scalar_system(f);
  SolveOptions opt;
  opt.jitter_seed = 77;
  const SolveResult a = solve(sys, Vector::Constant(1, 40.0), opt);
  const SolveResult b = solve(sys, Vector::Constant(1, 40.0), opt);
  CHECK(a.converged == b.converged);
  if (a.converged) CHECK(a.params(0) == b.params(0));
}

TEST_CASE("numeric jacobian: identity, affine, and nonlinear cross-check") {
  auto ident = [](const Vector& x) { return x; };
  Vector at(3);
  at << 0.2, -1.0, 7.0;
  const Matrix j1 = numeric_jacobian(ident, at);
  CHECK((j1 - Matrix::Identity(3, 3)).lpNorm<Eigen::Infinity>() < 1e-9);

  Matrix a(2, 2);
  a << 2.0, -1.0, 0.5, 3.0;
  auto affine = [a](const Vector& x) { return Vector(a * x + Vector::Ones(2)); };
  const Matrix j2 = numeric_jacobian(affine, Vector::Zero(2));
  CHECK((j2 - a).lpNorm<Eigen::Infinity>() < 1e-9);

  // Central versus forward differences on a smooth nonlinear map.
  auto f = [](const Vector& x) {
    Vector g(2);
    g(0) = std::sin(x(0)) + x(1) * x(1);
    g(1) = std::exp(0.3 * x(0) * x(1));
    return g;
  };
  Vector x0(2);
  x0 << 0.4, -0.7;
  const Matrix central = numeric_jacobian(f, x0);
  Matrix forward(2, 2);
  for (int j = 0; j < 2; ++j) {
    const double h = std::max(1e-6, 1e-6 * std::abs(x0(j)));
    Vector hi = x0;
    hi(j) += h;
    forward.col(j) = (f(hi) - f(x0)) / h;
  }
  CHECK(((central - forward).cwiseQuotient(central.cwiseAbs().cwiseMax(1e-8)))
            .lpNorm<Eigen::Infinity>() < 1e-4);
}

TEST_CASE("sandwich variance of an i.i.d. mean equals sample variance over n") {
  Rng rng(3);
  const int n = 400;
  Vector y(n);
  for (int i = 0; i < n; ++i) y(i) = rng.normal(1.0, 2.0);
  SurveyDataset data = full_response_data(y, Vector::Ones(n));
  EquationSystem sys = build_cc(data, EstimandSpec::mean());
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  const double ybar = y.mean();
  CHECK(res.params(0) == doctest::Approx(ybar).epsilon(1e-10));
  double ml_var = 0.0;
  for (int i = 0; i < n; ++i) ml_var += (y(i) - ybar) * (y(i) - ybar);
  ml_var /= n;
  CHECK(res.covariance(0, 0) == doctest::Approx(ml_var / n).epsilon(1e-12));
}

TEST_CASE("sandwich variance is invariant to rescaling the weights") {
  Rng rng(4);
  const int n = 300;
  Vector y(n), w(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.normal(0.0, 1.0);
    w(i) = rng.uniform(0.5, 3.0);
  }
  SurveyDataset d1 = full_response_data(y, w);
  SurveyDataset d2 = full_response_data(y, Vector(17.5 * w));
  EquationSystem s1 = build_cc(d1, EstimandSpec::mean());
  EquationSystem s2 = build_cc(d2, EstimandSpec::mean());
  const SolveResult r1 = solve(s1, Vector::Zero(1));
  const SolveResult r2 = solve(s2, Vector::Zero(1));
  CHECK(r1.params(0) == doctest::Approx(r2.params(0)).epsilon(1e-12));
  CHECK(r1.covariance(0, 0) == doctest::Approx(r2.covariance(0, 0)).epsilon(1e-10));
}

TEST_CASE("confidence interval quantiles") {
  const Interval degenerate = confidence_interval(1.0, 0.0);
  CHECK(degenerate.lo == doctest::Approx(1.0));
  CHECK(degenerate.hi == doctest::Approx(1.0));
  const Interval standard = confidence_interval(0.0, 1.0, 0.95);
  CHECK(standard.lo == doctest::Approx(-1.95996).epsilon(1e-5));
  CHECK(standard.hi == doctest::Approx(1.95996).epsilon(1e-5));
}

TEST_CASE("unit contributions sum back to the residual") {
  Rng rng(8);
  const int n = 50;
  Vector y(n), w(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.bernoulli(0.4) ? 1.0 : 0.0;
    w(i) = rng.uniform(0.5, 2.0);
  }
  SurveyDataset data = full_response_data(y, w);
  EquationSystem sys = build_cc(data, EstimandSpec::mean());
  const Vector at = Vector::Constant(1, 0.3);
  const Vector g = sys.residual(at);
  const Matrix rows = sys.unit_contributions(at);
  CHECK((rows.colwise().sum().transpose() - g).lpNorm<Eigen::Infinity>() < 1e-12);
}
