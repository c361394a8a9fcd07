#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sor/equations.hpp"
#include "sor/rng.hpp"
#include "sor/simulate.hpp"
#include "sor/solver.hpp"
#include "sor/stats.hpp"

using namespace sor;

namespace {

PropensityModel intercept_model() {
  PropensityModel pm;
  pm.baseline = {FeatureMap::intercept_only(), FeatureMap::intercept_only()};
  pm.alpha = {Vector::Zero(1), Vector::Zero(1)};
  pm.odds = OddsRatioDesign::outcome_only();
  pm.gamma = Vector::Zero(1);
  return pm;
}

// Full-response dataset with an empty covariate block.
SurveyDataset trivial_data(const Vector& y, const Vector& w, const Eigen::ArrayXi& r1) {
  const int n = static_cast<int>(y.size());
  SurveyDataset d;
  d.weight = w;
  d.response.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    d.response(i, 0) = r1(i);
    d.response(i, 1) = 1;
  }
  d.outcome = y;
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  d.validate_and_normalize();
  return d;
}

CovariateDistribution point_distribution() {
  CovariateDistribution dist;
  dist.support = Matrix::Zero(1, 0);
  dist.mass = Vector::Ones(1);
  return dist;
}

// Empirical law of the respondent covariates (used where a trivial identity
// needs E_f to match the sample exactly).
CovariateDistribution empirical_x(const SurveyDataset& data) {
  std::vector<int> resp;
  for (int i = 0; i < data.n(); ++i) {
    if (data.observed(i)) resp.push_back(i);
  }
  CovariateDistribution dist;
  dist.support.resize(static_cast<int>(resp.size()), data.dim_x());
  dist.mass.resize(static_cast<int>(resp.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < resp.size(); ++k) total += data.weight(resp[k]);
  for (std::size_t k = 0; k < resp.size(); ++k) {
    dist.support.row(static_cast<int>(k)) = data.covariate_row(resp[k]).transpose();
    dist.mass(static_cast<int>(k)) = data.weight(resp[k]) / total;
  }
  return dist;
}

double weighted_mean(const SurveyDataset& d) {
  double wy = 0, wsum = 0;
  for (int i = 0; i < d.n(); ++i) {
    wy += d.weight(i) * d.outcome(i);
    wsum += d.weight(i);
  }
  return wy / wsum;
}

OutcomeModel arbitrary_binary_outcome() {
  OutcomeModel om;
  om.family = OutcomeFamily::BinaryLogistic;
  om.design = FeatureMap::intercept_only();
  om.beta = Vector::Constant(1, 0.37);  // deliberately wrong
  return om;
}

}  // namespace

TEST_CASE("systems are exactly identified (square)") {
  Rng rng(1);
  ScenarioSpec spec = ScenarioSpec::binary("TT");
  spec.n = 500;
  GeneratedSurvey gen = generate_binary(spec, rng);
  const CovariateDistribution dist = scenario_distribution(8);
  const ScenarioModels m = scenario_working_models(spec);

  const EquationSystem ipw = build_ipw(gen.data, m.pm, m.estimand, dist);
  CHECK(ipw.dim() == 8);  // alpha1(3) alpha2(3) gamma(1) theta(1)
  const EquationSystem reg = build_reg(gen.data, m.pm, m.outcome, m.estimand, dist);
  CHECK(reg.dim() == 8);  // beta(3) alpha1(3) gamma(1) theta(1)
  const EquationSystem dr = build_dr(gen.data, m.pm, m.outcome, m.estimand, dist);
  CHECK(dr.dim() == 11);

  for (const EquationSystem* sys : {&ipw, &reg, &dr}) {
    Vector p = Vector::Zero(sys->dim());
    const Vector g = sys->residual(p);
    CHECK(g.size() == sys->dim());
    CHECK(g.allFinite());
    const Matrix rows = sys->unit_contributions(p);
    CHECK((rows.colwise().sum().transpose() - g).lpNorm<Eigen::Infinity>() < 1e-12);
  }

  ScenarioSpec cont = ScenarioSpec::continuous("TT");
  cont.n = 500;
  Rng rng2(2);
  GeneratedSurvey gen2 = generate_continuous(cont, rng2);
  const ScenarioModels m2 = scenario_working_models(cont);
  const EquationSystem reg2 = build_reg(gen2.data, m2.pm, m2.outcome, m2.estimand, dist);
  CHECK(reg2.dim() == 9);  // + log_sigma2
  const EquationSystem dr2 = build_dr(gen2.data, m2.pm, m2.outcome, m2.estimand, dist);
  CHECK(dr2.dim() == 12);
}

TEST_CASE("ipw: frozen nuisances and full response reduce to the weighted mean") {
  Rng rng(10);
  const int n = 60;
  Vector y(n), w = Vector::Ones(n);
  Eigen::ArrayXi r1(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.bernoulli(0.6) ? 1.0 : 0.0;
    r1(i) = 1;
  }
  SurveyDataset data = trivial_data(y, w, r1);
  PropensityModel pm = intercept_model();
  SystemOptions opts;
  opts.frozen["alpha1"] = Vector::Constant(1, 0.3);
  opts.frozen["alpha2"] = Vector::Constant(1, -0.2);
  opts.frozen["gamma"] = Vector::Zero(1);
  EquationSystem sys = build_ipw(data, pm, EstimandSpec::mean(), point_distribution(), opts);
  CHECK(sys.dim() == 1);
  const SolveResult res = solve(sys, Vector::Constant(1, 0.5));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(y.mean()).epsilon(1e-10));
}

TEST_CASE("ipw with unequal weights: constant propensity keeps the weighted mean") {
  Rng rng(11);
  const int n = 80;
  Vector y(n), w(n);
  Eigen::ArrayXi r1(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.uniform(0, 1);
    w(i) = rng.uniform(0.2, 4.0);
    r1(i) = rng.bernoulli(0.7) ? 1 : 0;
  }
  SurveyDataset data = trivial_data(y, w, r1);
  SystemOptions opts;
  opts.frozen["alpha1"] = Vector::Constant(1, 0.4);
  opts.frozen["alpha2"] = Vector::Constant(1, 0.1);
  opts.frozen["gamma"] = Vector::Zero(1);
  EquationSystem sys =
      build_ipw(data, intercept_model(), EstimandSpec::mean(), point_distribution(), opts);
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(weighted_mean(data)).epsilon(1e-10));
}

TEST_CASE("reg: zero odds ratio and full observation give the outcome-model-free mean") {
  Rng rng(12);
  const int n = 70;
  Vector y(n), w(n);
  Eigen::ArrayXi r1(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.bernoulli(0.45) ? 1.0 : 0.0;
    w(i) = rng.uniform(0.5, 2.0);
    r1(i) = rng.bernoulli(0.5) ? 1 : 0;
  }
  SurveyDataset data = trivial_data(y, w, r1);
  SystemOptions opts;
  opts.frozen["alpha1"] = Vector::Constant(1, 0.2);
  opts.frozen["gamma"] = Vector::Zero(1);
  opts.frozen["beta"] = Vector::Constant(1, 0.37);  // arbitrary wrong outcome model
  EquationSystem sys = build_reg(data, intercept_model(), arbitrary_binary_outcome(),
                                 EstimandSpec::mean(), empirical_x(data), opts);
  CHECK(sys.dim() == 1);
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(weighted_mean(data)).epsilon(1e-10));
}

TEST_CASE("dr: augmentation cancels under full first-call response") {
  Rng rng(13);
  const int n = 50;
  Vector y(n), w(n);
  Eigen::ArrayXi r1 = Eigen::ArrayXi::Ones(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.bernoulli(0.3) ? 1.0 : 0.0;
    w(i) = rng.uniform(0.5, 2.0);
  }
  SurveyDataset data = trivial_data(y, w, r1);
  SystemOptions opts;
  opts.frozen["alpha1"] = Vector::Constant(1, 0.1);
  opts.frozen["alpha2"] = Vector::Constant(1, -0.5);
  opts.frozen["gamma"] = Vector::Zero(1);
  opts.frozen["beta"] = Vector::Constant(1, 1.23);  // any outcome model
  EquationSystem sys = build_dr(data, intercept_model(), arbitrary_binary_outcome(),
                                EstimandSpec::mean(), empirical_x(data), opts);
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(weighted_mean(data)).epsilon(1e-10));
}

TEST_CASE("unbiasedness at the truth: every moment within 4 empirical SEs") {
  // Moderate-n version of the acceptance criterion (which uses n = 1e6).
  const int n = 100000;
  for (const char* family : {"binary", "continuous"}) {
    ScenarioSpec spec = std::string(family) == "binary" ? ScenarioSpec::binary("TT")
                                                        : ScenarioSpec::continuous("TT");
    spec.n = n;
    Rng rng(derive_stream(991, spec.family == SimFamily::Binary ? 0 : 1, 0));
    GeneratedSurvey gen = generate_survey(spec, rng);
    const CovariateDistribution dist = scenario_distribution();
    const ScenarioModels m = scenario_working_models(spec);
    const double theta_truth = scenario_truth_theta(spec);

    const EquationSystem ipw = build_ipw(gen.data, m.pm, m.estimand, dist);
    const EquationSystem reg = build_reg(gen.data, m.pm, m.outcome, m.estimand, dist);
    const EquationSystem dr = build_dr(gen.data, m.pm, m.outcome, m.estimand, dist);

    auto truth_for = [&](const EquationSystem& sys) {
      Vector p = Vector::Zero(sys.dim());
      for (const auto& s : sys.layout().slices) {
        if (s.name == "alpha1") p.segment(s.offset, 3) = spec.alpha1;
        if (s.name == "alpha2") p.segment(s.offset, 3) = spec.alpha2;
        if (s.name == "beta") p.segment(s.offset, 3) = spec.beta;
        if (s.name == "log_sigma2") p(s.offset) = std::log(spec.sigma2);
        if (s.name == "gamma") p(s.offset) = spec.gamma;
        if (s.name == "theta") p(s.offset) = theta_truth;
      }
      return p;
    };

    for (const EquationSystem* sys : {&ipw, &reg, &dr}) {
      const Vector at = truth_for(*sys);
      const Vector g = sys->residual(at);
      const Matrix rows = sys->unit_contributions(at);
      for (int j = 0; j < sys->dim(); ++j) {
        const double se = std::sqrt(rows.col(j).squaredNorm());
        INFO("family ", family, " component ", j, " g=", g(j), " se=", se);
        CHECK(std::abs(g(j)) < 4.0 * se);
      }
    }
  }
}

TEST_CASE("sensitivity offset zero is bitwise identical to the parent system") {
  Rng rng(77);
  ScenarioSpec spec = ScenarioSpec::binary("TT");
  spec.n = 400;
  GeneratedSurvey gen = generate_binary(spec, rng);
  const CovariateDistribution dist = scenario_distribution(8);
  const ScenarioModels m = scenario_working_models(spec);
  SystemOptions zero;
  zero.delta = 0.0;
  const EquationSystem base = build_dr(gen.data, m.pm, m.outcome, m.estimand, dist);
  const EquationSystem offs = build_dr(gen.data, m.pm, m.outcome, m.estimand, dist, zero);
  Rng prng(5);
  for (int t = 0; t < 5; ++t) {
    Vector p(base.dim());
    for (int j = 0; j < p.size(); ++j) p(j) = prng.uniform(-0.8, 0.8);
    const Vector g1 = base.residual(p);
    const Vector g2 = offs.residual(p);
    for (int j = 0; j < g1.size(); ++j) CHECK(g1(j) == g2(j));
  }
  // A nonzero offset changes the residuals.
  SystemOptions shifted;
  shifted.delta = 0.2;
  const EquationSystem moved = build_dr(gen.data, m.pm, m.outcome, m.estimand, dist, shifted);
  const Vector p0 = Vector::Zero(base.dim());
  CHECK((moved.residual(p0) - base.residual(p0)).lpNorm<Eigen::Infinity>() > 1e-8);
}

TEST_CASE("positivity violations name the offending unit") {
  const int n = 30;
  Vector y = Vector::Zero(n), w = Vector::Ones(n);
  Eigen::ArrayXi r1 = Eigen::ArrayXi::Ones(n);
  SurveyDataset data;
  data.weight = w;
  data.response = Eigen::MatrixXi::Ones(n, 2);
  data.outcome = y;
  data.x_missing = Matrix::Zero(n, 1);
  data.x_missing(17, 0) = 1.0;  // the only unit with x = 1
  data.x_observed = Matrix::Zero(n, 0);
  data.validate_and_normalize();

  PropensityModel pm;
  pm.baseline = {FeatureMap::intercept_plus_all(1), FeatureMap::intercept_plus_all(1)};
  pm.alpha = {Vector::Zero(2), Vector::Zero(2)};
  pm.odds = OddsRatioDesign::outcome_only();
  pm.gamma = Vector::Zero(1);
  CovariateDistribution dist;
  dist.support = Matrix::Zero(1, 1);
  dist.mass = Vector::Ones(1);

  EquationSystem sys = build_ipw(data, pm, EstimandSpec::mean(), dist);
  Vector p = Vector::Zero(sys.dim());
  p(1) = -60.0;  // slope drives pi1 to zero at x = 1
  try {
    sys.residual(p);
    FAIL("expected a positivity error");
  } catch (const PositivityError& e) {
    CHECK(e.unit == 17);
    CHECK(e.call == 0);
    CHECK(e.value < 1e-10);
  }
}

TEST_CASE("pc: symmetric cells split the remainder evenly") {
  // Build a dataset whose weighted frequencies are exactly (.125, .125, .125, .125).
  SurveyDataset d;
  const int n = 5;
  d.weight.resize(n);
  d.response.resize(n, 2);
  d.outcome.resize(n);
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  // late y=0, late y=1, first y=0, first y=1, never
  d.weight << 0.125, 0.125, 0.125, 0.125, 0.5;
  d.response << 0, 1, 0, 1, 1, 1, 1, 1, 0, 0;
  d.outcome << 0, 1, 0, 1, 0;
  d.validate_and_normalize();
  const PcSolution s = pc_point_estimate(d);
  CHECK(std::abs(s.p[0] - 0.25) < 1e-10);
  CHECK(std::abs(s.p[1] - 0.25) < 1e-10);
  CHECK(std::abs(s.theta - 0.5) < 1e-10);
}

TEST_CASE("pc: forward-constructed cells are recovered exactly") {
  // Cells from a no-covariate model with a shared odds ratio, so the
  // constraint holds by construction.
  const double q = 0.62, a1 = -0.4, a2 = 0.1, g = 0.8;
  const double pi1_1 = expit(a1 + g), pi1_0 = expit(a1);
  const double pi2_1 = expit(a2 + g), pi2_0 = expit(a2);
  const double p6 = q * pi1_1, p5 = (1 - q) * pi1_0;
  const double p4 = q * (1 - pi1_1) * pi2_1, p3 = (1 - q) * (1 - pi1_0) * pi2_0;
  const double p2 = q * (1 - pi1_1) * (1 - pi2_1), p1 = (1 - q) * (1 - pi1_0) * (1 - pi2_0);

  SurveyDataset d;
  const int n = 5;
  d.weight.resize(n);
  d.response.resize(n, 2);
  d.outcome.resize(n);
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  d.weight << p3, p4, p5, p6, p1 + p2;
  d.response << 0, 1, 0, 1, 1, 1, 1, 1, 0, 0;
  d.outcome << 0, 1, 0, 1, 0;
  d.validate_and_normalize();

  const PcSolution s = pc_point_estimate(d);
  CHECK(std::abs(s.p[0] - p1) < 1e-10);
  CHECK(std::abs(s.p[1] - p2) < 1e-10);
  CHECK(std::abs(s.theta - q) < 1e-10);
  // The recovered cells satisfy the equal-odds-ratio identity.
  const double lhs = s.p[5] * (s.p[0] + s.p[2]) / (s.p[4] * (s.p[1] + s.p[3]));
  const double rhs = s.p[3] * s.p[0] / (s.p[1] * s.p[2]);
  CHECK(std::abs(lhs - rhs) < 1e-10);

  // Sandwich covariance at the solution is well defined.
  EquationSystem sys = build_pc(d);
  Vector at(6);
  at << s.p[2], s.p[3], s.p[4], s.p[5], s.p[0], s.theta;
  const Matrix cov = sandwich_covariance(sys, at);
  CHECK(cov.rows() == 6);
  CHECK(cov(5, 5) >= 0.0);
}

TEST_CASE("pc: empty cell reports an identification failure") {
  SurveyDataset d;
  const int n = 4;
  d.weight = Vector::Ones(n);
  d.response.resize(n, 2);
  d.outcome.resize(n);
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  d.response << 1, 1, 1, 1, 0, 1, 0, 0;
  d.outcome << 1, 0, 1, 0;  // no late y = 0 cell
  d.validate_and_normalize();
  CHECK_THROWS_AS(pc_point_estimate(d), std::runtime_error);
}

TEST_CASE("cc baseline: single respondent") {
  SurveyDataset d;
  const int n = 3;
  d.weight = Vector::Ones(n);
  d.response.resize(n, 2);
  d.response << 1, 1, 0, 0, 0, 0;
  d.outcome.resize(n);
  d.outcome << 1.0, 0.0, 0.0;
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  d.validate_and_normalize();
  EquationSystem sys = build_cc(d, EstimandSpec::mean());
  const SolveResult res = solve(sys, Vector::Constant(1, 0.5));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("mar baseline: frozen alphas with no missingness reproduce the complete-case value") {
  Rng rng(14);
  const int n = 40;
  Vector y(n), w(n);
  Eigen::ArrayXi r1 = Eigen::ArrayXi::Ones(n);
  for (int i = 0; i < n; ++i) {
    y(i) = rng.uniform(0, 1);
    w(i) = rng.uniform(0.5, 2.0);
  }
  SurveyDataset data = trivial_data(y, w, r1);
  SystemOptions opts;
  opts.frozen["alpha1"] = Vector::Zero(1);
  opts.frozen["alpha2"] = Vector::Zero(1);
  EquationSystem sys =
      build_mar(data, intercept_model(), EstimandSpec::mean(), point_distribution(), opts);
  CHECK(sys.dim() == 1);
  const SolveResult res = solve(sys, Vector::Zero(1));
  CHECK(res.converged);
  CHECK(res.params(0) == doctest::Approx(weighted_mean(data)).epsilon(1e-10));
}

TEST_CASE("cor baseline: single-call survey reduces to the complete case") {
  Rng rng(15);
  const int n = 50;
  Vector y(n), w(n);
  Eigen::ArrayXi r1 = Eigen::ArrayXi::Zero(n);  // everyone responds at call 2 or never
  SurveyDataset d;
  d.weight.resize(n);
  d.response.resize(n, 2);
  d.outcome.resize(n);
  d.x_missing = Matrix::Zero(n, 0);
  d.x_observed = Matrix::Zero(n, 0);
  for (int i = 0; i < n; ++i) {
    d.weight(i) = rng.uniform(0.5, 2.0);
    const bool resp = rng.bernoulli(0.6);
    d.response(i, 0) = 0;
    d.response(i, 1) = resp ? 1 : 0;
    d.outcome(i) = resp ? (rng.bernoulli(0.7) ? 1.0 : 0.0) : 0.0;
  }
  d.validate_and_normalize();
  EquationSystem cor = build_cor(d, EstimandSpec::mean());
  const SolveResult res = solve(cor, Vector::Zero(2));
  CHECK(res.converged);
  double wy = 0, wr = 0;
  for (int i = 0; i < n; ++i) {
    if (d.observed(i)) {
      wy += d.weight(i) * d.outcome(i);
      wr += d.weight(i);
    }
  }
  const double theta = res.params(cor.layout().slice("theta").offset);
  CHECK(theta == doctest::Approx(wy / wr).epsilon(1e-9));
}

TEST_CASE("cor and corx: homogeneous outcome gives one") {
  Rng rng(16);
  const int n = 60;
  SurveyDataset d;
  d.weight = Vector::Ones(n);
  d.response.resize(n, 2);
  d.outcome.resize(n);
  d.x_missing.resize(n, 1);
  d.x_observed = Matrix::Zero(n, 0);
  for (int i = 0; i < n; ++i) {
    const int r1 = rng.bernoulli(0.4) ? 1 : 0;
    const int r2 = r1 == 1 ? 1 : (rng.bernoulli(0.5) ? 1 : 0);
    d.response(i, 0) = r1;
    d.response(i, 1) = r2;
    d.outcome(i) = r2 == 1 ? 1.0 : 0.0;  // all observed outcomes are 1
    d.x_missing(i, 0) = r2 == 1 ? (rng.bernoulli(0.5) ? 1.0 : 0.0) : 0.0;
  }
  d.validate_and_normalize();

  EquationSystem cor = build_cor(d, EstimandSpec::mean());
  Vector init = Vector::Zero(2);
  const SolveResult res = solve(cor, init);
  CHECK(res.converged);
  CHECK(res.params(cor.layout().slice("theta").offset) == doctest::Approx(1.0).epsilon(1e-8));

  CovariateDistribution dist;
  dist.support.resize(2, 1);
  dist.support << 0.0, 1.0;
  dist.mass = Vector::Constant(2, 0.5);
  OutcomeModel om;
  om.family = OutcomeFamily::BinaryLogistic;
  om.design = FeatureMap::intercept_plus_all(1);
  om.beta = Vector::Zero(2);
  CorxSystem corx = build_corx(d, EstimandSpec::mean(), om, dist);
  Vector start = Vector::Zero(corx.system.dim());
  start(corx.system.layout().slice("theta").offset) = 0.9;
  const SolveResult res2 = solve(corx.system, start);
  CHECK(res2.converged);
  CHECK(res2.params(corx.system.layout().slice("theta").offset) ==
        doctest::Approx(1.0).epsilon(1e-5));
  CHECK(corx.clipped_cells >= 0);
}

TEST_CASE("frozen blocks must match the declared dimension") {
  Rng rng(18);
  ScenarioSpec spec = ScenarioSpec::binary("TT");
  spec.n = 100;
  GeneratedSurvey gen = generate_binary(spec, rng);
  const ScenarioModels m = scenario_working_models(spec);
  SystemOptions opts;
  opts.frozen["gamma"] = Vector::Zero(2);  // wrong size
  CHECK_THROWS_AS(
      build_ipw(gen.data, m.pm, m.estimand, scenario_distribution(6), opts),
      std::invalid_argument);
}
