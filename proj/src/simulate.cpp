#include "sor/simulate.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <thread>

#include "sor/fit.hpp"
#include "sor/stats.hpp"

namespace sor {

namespace {

using Array = Eigen::ArrayXd;

Vector vec3(double a, double b, double c) {
  Vector v(3);
  v << a, b, c;
  return v;
}

struct GaussLegendre {
  Vector nodes;    // on (-1, 1)
  Vector weights;  // sum to 2
};

GaussLegendre gauss_legendre(int order) {
  Matrix jacobi = Matrix::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    const double off = k / std::sqrt(4.0 * k * k - 1.0);
    jacobi(k, k - 1) = off;
    jacobi(k - 1, k) = off;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
  GaussLegendre rule;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(order);
  for (int k = 0; k < order; ++k) {
    const double v0 = es.eigenvectors()(0, k);
    rule.weights(k) = 2.0 * v0 * v0;
  }
  return rule;
}

// Linear predictors of the generating models at one covariate point.
struct GenPoint {
  double a1, a2, mu;  // pi1 baseline, pi2 baseline, f2 location
};

GenPoint gen_point(const ScenarioSpec& spec, double xa, double xb) {
  GenPoint p;
  const Vector x = vec3(1.0, xa, xb);
  const Vector xsq = vec3(1.0, xa * xa, xb * xb);
  p.a1 = spec.alpha1.dot(x);
  p.a2 = spec.alpha2.dot(spec.w1_squared ? xsq : x);
  p.mu = spec.beta.dot(spec.w2_squared ? xsq : x);
  return p;
}

// Binary full-data conditional: inverting the selection weighting
// f(y|x) prop. to f2(y|x) / {(1 - pi1(x,y)) pi2(x,y)} gives a logistic law
// with an offset in the log odds.
double binary_full_log_odds(const GenPoint& p, double gamma1, double gamma2) {
  return p.mu - log1pexp(p.a1) - log1pexp(-p.a2) + log1pexp(p.a1 + gamma1) +
         log1pexp(-p.a2 - gamma2);
}

// Gaussian full-data conditional: 1 / {(1-pi1) pi2} expands into four
// exponential tilts e^{c y} with c in {0, g1, -g2, g1-g2}, so f(y|x) is a
// four-component normal mixture with means mu + c sigma2.
struct GaussianMixture {
  double c[4];
  double logw[4];  // unnormalized, shifted by max
  double wsum;
  double w[4];     // normalized
};

GaussianMixture gaussian_full_mixture(const GenPoint& p, double gamma1, double gamma2,
                                      double sigma2) {
  GaussianMixture m;
  const double c[4] = {0.0, gamma1, -gamma2, gamma1 - gamma2};
  const double base[4] = {0.0, p.a1, -p.a2, p.a1 - p.a2};
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 4; ++k) {
    m.c[k] = c[k];
    m.logw[k] = base[k] + c[k] * p.mu + 0.5 * c[k] * c[k] * sigma2;
    mx = std::max(mx, m.logw[k]);
  }
  m.wsum = 0.0;
  for (int k = 0; k < 4; ++k) {
    m.w[k] = std::exp(m.logw[k] - mx);
    m.wsum += m.w[k];
  }
  for (int k = 0; k < 4; ++k) m.w[k] /= m.wsum;
  return m;
}

SurveyDataset assemble_dataset(const Matrix& x_full, const Vector& y_full,
                               const Eigen::ArrayXi& r1, const Eigen::ArrayXi& r2) {
  const int n = static_cast<int>(y_full.size());
  SurveyDataset data;
  data.weight = Vector::Ones(n);
  data.response.resize(n, 2);
  data.outcome = Vector::Zero(n);
  data.x_missing = Matrix::Zero(n, 2);
  data.x_observed.resize(n, 0);
  data.names_missing = {"xa", "xb"};
  for (int i = 0; i < n; ++i) {
    data.response(i, 0) = r1(i);
    data.response(i, 1) = r2(i);
    if (r2(i) == 1) {
      data.outcome(i) = y_full(i);
      data.x_missing.row(i) = x_full.row(i);
    }
  }
  data.validate_and_normalize();
  return data;
}

}  // namespace

ScenarioSpec ScenarioSpec::binary(const std::string& name) {
  ScenarioSpec s;
  s.name = name;
  s.family = SimFamily::Binary;
  if (name == "TT") {
    s.alpha1 = vec3(-1, 0.5, 0.2);
    s.alpha2 = vec3(-0.5, 0.5, 0.2);
    s.beta = vec3(-0.5, 0.5, 0.5);
    s.gamma = 1.0;
  } else if (name == "FT") {
    s.w1_squared = true;
    s.alpha1 = vec3(-0.2, -0.5, 0.7);
    s.alpha2 = vec3(-0.6, 1.7, 1.0);
    s.beta = vec3(1.2, 0.5, 0.5);
    s.gamma = -0.9;
  } else if (name == "TF") {
    s.w2_squared = true;
    s.alpha1 = vec3(-1, 0.5, 0.2);
    s.alpha2 = vec3(-0.5, 0.5, 0.2);
    s.beta = vec3(-0.5, 5.0, -2.0);
    s.gamma = 1.3;
  } else if (name == "FF") {
    s.w1_squared = true;
    s.w2_squared = true;
    s.alpha1 = vec3(-0.3, 0.5, 0.2);
    s.alpha2 = vec3(-0.5, -1.5, 0.2);
    s.beta = vec3(-1.0, 5.0, 0.5);
    s.gamma = 1.5;
  } else {
    throw std::invalid_argument("unknown binary scenario " + name);
  }
  return s;
}

ScenarioSpec ScenarioSpec::continuous(const std::string& name) {
  ScenarioSpec s;
  s.name = name;
  s.family = SimFamily::Continuous;
  if (name == "TT") {
    s.alpha1 = vec3(0, 0.6, 0.5);
    s.alpha2 = vec3(1.4, -0.5, 0.2);
    s.beta = vec3(0.6, 1.0, 0.3);
    s.gamma = 0.13;
    s.sigma2 = 3.0;
  } else if (name == "FT") {
    s.w1_squared = true;
    s.alpha1 = vec3(-0.35, -0.5, 0.7);
    s.alpha2 = vec3(-0.5, 1.8, 1.0);
    s.beta = vec3(-0.8, 5.0, 3.5);
    s.gamma = 0.12;
    s.sigma2 = 2.0;
  } else if (name == "TF") {
    s.w2_squared = true;
    s.alpha1 = vec3(-1, 1, -0.1);
    s.alpha2 = vec3(0.5, 1, -0.1);
    s.beta = vec3(-0.5, 5.0, -1.0);
    s.gamma = 0.5;
    s.sigma2 = 0.4;
  } else if (name == "FF") {
    s.w1_squared = true;
    s.w2_squared = true;
    s.alpha1 = vec3(-0.3, -0.5, 1.0);
    s.alpha2 = vec3(-0.4, 0.8, 0.0);
    s.beta = vec3(-1.5, 4.0, 3.0);
    s.gamma = 0.25;
    s.sigma2 = 0.25;
  } else {
    throw std::invalid_argument("unknown continuous scenario " + name);
  }
  return s;
}

ScenarioSpec ScenarioSpec::sensitivity(double delta) {
  ScenarioSpec s;
  s.name = "sensitivity";
  s.family = SimFamily::Binary;
  s.alpha1 = vec3(-1, 0.5, 0.2);
  s.alpha2 = vec3(-0.5, 0.5, 0.2);
  s.beta = vec3(-0.5, 0.5, 0.5);
  s.gamma = 0.5;
  s.delta = delta;
  return s;
}

double full_conditional_mean(const ScenarioSpec& spec, double xa, double xb) {
  const GenPoint p = gen_point(spec, xa, xb);
  const double g1 = spec.gamma;
  const double g2 = spec.gamma + spec.delta;
  if (spec.family == SimFamily::Binary) {
    return expit(binary_full_log_odds(p, g1, g2));
  }
  const GaussianMixture m = gaussian_full_mixture(p, g1, g2, spec.sigma2);
  double mean = 0.0;
  for (int k = 0; k < 4; ++k) mean += m.w[k] * (p.mu + m.c[k] * spec.sigma2);
  return mean;
}

GeneratedSurvey generate_binary(const ScenarioSpec& spec, Rng& rng) {
  const int n = spec.n;
  GeneratedSurvey out;
  out.x_full.resize(n, 2);
  out.y_full.resize(n);
  out.r1.resize(n);
  out.r2.resize(n);
  const double g1 = spec.gamma;
  const double g2 = spec.gamma + spec.delta;
  for (int i = 0; i < n; ++i) {
    const double xa = rng.uniform(-1.0, 1.0);
    const double xb = rng.uniform(-1.0, 1.0);
    const GenPoint p = gen_point(spec, xa, xb);
    const double y = rng.bernoulli(expit(binary_full_log_odds(p, g1, g2))) ? 1.0 : 0.0;
    const int r1 = rng.bernoulli(expit(p.a1 + g1 * y)) ? 1 : 0;
    const int r2 = r1 == 1 ? 1 : (rng.bernoulli(expit(p.a2 + g2 * y)) ? 1 : 0);
    out.x_full(i, 0) = xa;
    out.x_full(i, 1) = xb;
    out.y_full(i) = y;
    out.r1(i) = r1;
    out.r2(i) = r2;
  }
  out.data = assemble_dataset(out.x_full, out.y_full, out.r1, out.r2);
  return out;
}

GeneratedSurvey generate_continuous(const ScenarioSpec& spec, Rng& rng) {
  const int n = spec.n;
  GeneratedSurvey out;
  out.x_full.resize(n, 2);
  out.y_full.resize(n);
  out.r1.resize(n);
  out.r2.resize(n);
  const double g1 = spec.gamma;
  const double g2 = spec.gamma + spec.delta;
  const double sd = std::sqrt(spec.sigma2);
  for (int i = 0; i < n; ++i) {
    const double xa = rng.uniform(-1.0, 1.0);
    const double xb = rng.uniform(-1.0, 1.0);
    const GenPoint p = gen_point(spec, xa, xb);
    const GaussianMixture m = gaussian_full_mixture(p, g1, g2, spec.sigma2);
    const double u = rng.uniform();
    int comp = 0;
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
      acc += m.w[k];
      if (u < acc) {
        comp = k;
        break;
      }
      comp = k;
    }
    const double y = rng.normal(p.mu + m.c[comp] * spec.sigma2, sd);
    const int r1 = rng.bernoulli(expit(p.a1 + g1 * y)) ? 1 : 0;
    const int r2 = r1 == 1 ? 1 : (rng.bernoulli(expit(p.a2 + g2 * y)) ? 1 : 0);
    out.x_full(i, 0) = xa;
    out.x_full(i, 1) = xb;
    out.y_full(i) = y;
    out.r1(i) = r1;
    out.r2(i) = r2;
  }
  out.data = assemble_dataset(out.x_full, out.y_full, out.r1, out.r2);
  return out;
}

GeneratedSurvey generate_survey(const ScenarioSpec& spec, Rng& rng) {
  return spec.family == SimFamily::Binary ? generate_binary(spec, rng)
                                          : generate_continuous(spec, rng);
}

double scenario_truth_theta(const ScenarioSpec& spec, int nodes_per_axis) {
  const GaussLegendre rule = gauss_legendre(nodes_per_axis);
  double acc = 0.0;
  for (int i = 0; i < nodes_per_axis; ++i) {
    for (int j = 0; j < nodes_per_axis; ++j) {
      acc += 0.25 * rule.weights(i) * rule.weights(j) *
             full_conditional_mean(spec, rule.nodes(i), rule.nodes(j));
    }
  }
  return acc;
}

std::pair<double, double> scenario_response_rates(const ScenarioSpec& spec,
                                                  int nodes_per_axis) {
  const GaussLegendre rule = gauss_legendre(nodes_per_axis);
  const double g1 = spec.gamma;
  const double g2 = spec.gamma + spec.delta;
  double rate1 = 0.0, rate2 = 0.0;
  const GaussHermite& gh = gauss_hermite();
  for (int i = 0; i < nodes_per_axis; ++i) {
    for (int j = 0; j < nodes_per_axis; ++j) {
      const double wq = 0.25 * rule.weights(i) * rule.weights(j);
      const GenPoint p = gen_point(spec, rule.nodes(i), rule.nodes(j));
      double p1 = 0.0, p2cum = 0.0;
      if (spec.family == SimFamily::Binary) {
        const double py = expit(binary_full_log_odds(p, g1, g2));
        for (int yv = 0; yv <= 1; ++yv) {
          const double fy = yv == 1 ? py : 1.0 - py;
          const double pi1 = expit(p.a1 + g1 * yv);
          const double pi2 = expit(p.a2 + g2 * yv);
          p1 += fy * pi1;
          p2cum += fy * (pi1 + (1.0 - pi1) * pi2);
        }
      } else {
        const GaussianMixture m = gaussian_full_mixture(p, g1, g2, spec.sigma2);
        const double sd = std::sqrt(spec.sigma2);
        for (int k = 0; k < 4; ++k) {
          const double mean_k = p.mu + m.c[k] * spec.sigma2;
          for (int q = 0; q < gh.nodes.size(); ++q) {
            const double y = mean_k + std::sqrt(2.0) * sd * gh.nodes(q);
            const double fy = m.w[k] * gh.weights(q) / std::sqrt(M_PI);
            const double pi1 = expit(p.a1 + g1 * y);
            const double pi2 = expit(p.a2 + g2 * y);
            p1 += fy * pi1;
            p2cum += fy * (pi1 + (1.0 - pi1) * pi2);
          }
        }
      }
      rate1 += wq * p1;
      rate2 += wq * p2cum;
    }
  }
  return {rate1, rate2};
}

CovariateDistribution scenario_distribution(int nodes_per_axis) {
  const GaussLegendre rule = gauss_legendre(nodes_per_axis);
  CovariateDistribution dist;
  const int m = nodes_per_axis * nodes_per_axis;
  dist.support.resize(m, 2);
  dist.mass.resize(m);
  int row = 0;
  for (int i = 0; i < nodes_per_axis; ++i) {
    for (int j = 0; j < nodes_per_axis; ++j, ++row) {
      dist.support(row, 0) = rule.nodes(i);
      dist.support(row, 1) = rule.nodes(j);
      dist.mass(row) = 0.25 * rule.weights(i) * rule.weights(j);
    }
  }
  dist.mass /= dist.mass.sum();
  return dist;
}

ScenarioModels scenario_working_models(const ScenarioSpec& spec) {
  ScenarioModels m;
  m.pm.baseline = {FeatureMap::intercept_plus_all(2), FeatureMap::intercept_plus_all(2)};
  m.pm.alpha = {Vector::Zero(3), Vector::Zero(3)};
  m.pm.odds = OddsRatioDesign::outcome_only();
  m.pm.gamma = Vector::Zero(1);
  m.outcome.family = spec.family == SimFamily::Binary ? OutcomeFamily::BinaryLogistic
                                                      : OutcomeFamily::GaussianLinear;
  m.outcome.design = FeatureMap::intercept_plus_all(2);
  m.outcome.beta = Vector::Zero(3);
  m.outcome.sigma2 = 1.0;
  m.estimand = EstimandSpec::mean();
  return m;
}

ChoiceDraw generate_choice_model(const ChoiceModelParams& pr, Rng& rng) {
  ChoiceDraw d;
  const int n = pr.n;
  d.x.resize(n);
  d.c.resize(n);
  d.y.resize(n);
  d.r1.resize(n);
  d.r2.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    const double c = rng.normal();
    const double u0 = pr.beta0 + pr.beta1 * x + pr.beta2 * c + rng.logistic();
    const double u1 = pr.alpha10 + pr.alpha11 * x + pr.gamma1 * c + rng.logistic();
    const double u2 = pr.alpha20 + pr.alpha21 * x + pr.gamma2 * c + rng.logistic();
    d.x(i) = x;
    d.c(i) = c;
    d.y(i) = u0 > 0.0 ? 1.0 : 0.0;
    d.r1(i) = u1 > 0.0 ? 1 : 0;
    d.r2(i) = d.r1(i) == 1 ? 1 : (u2 > 0.0 ? 1 : 0);
  }
  return d;
}

ChoiceFit fit_choice_odds(const ChoiceDraw& draw) {
  const int n = static_cast<int>(draw.x.size());
  Matrix design(n, 3);
  for (int i = 0; i < n; ++i) design.row(i) << 1.0, draw.x(i), draw.y(i);
  const Vector ones = Vector::Ones(n);
  Vector r1d(n);
  for (int i = 0; i < n; ++i) r1d(i) = draw.r1(i);
  const GlmFit first = fit_weighted_logistic(design, r1d, ones);

  std::vector<int> late;
  for (int i = 0; i < n; ++i) {
    if (draw.r1(i) == 0) late.push_back(i);
  }
  Matrix design2(static_cast<int>(late.size()), 3);
  Vector r2d(static_cast<int>(late.size()));
  for (std::size_t k = 0; k < late.size(); ++k) {
    const int i = late[k];
    design2.row(static_cast<int>(k)) << 1.0, draw.x(i), draw.y(i);
    r2d(static_cast<int>(k)) = draw.r2(i);
  }
  const GlmFit second =
      fit_weighted_logistic(design2, r2d, Vector::Ones(static_cast<int>(late.size())));

  ChoiceFit fit;
  fit.gamma1_tilde = first.beta(2);
  fit.gamma2_tilde = second.beta(2);
  fit.ok = first.converged && second.converged;
  return fit;
}

// ---------- scenario estimation ----------

namespace {

struct InitPieces {
  Vector alpha1, alpha2;
  Vector beta;
  double log_sigma2 = 0.0;
  double theta_cc = 0.0;
};

InitPieces initial_pieces(const GeneratedSurvey& gen, const ScenarioModels& models,
                          const CovariateDistribution& dist, bool need_outcome) {
  const SurveyDataset& data = gen.data;
  const int n = data.n();
  InitPieces init;

  double w1 = 0.0, w2only = 0.0, wnr1 = 0.0, wy = 0.0, wresp = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = data.weight(i);
    if (data.response(i, 0) == 1) w1 += w;
    if (data.response(i, 0) == 0) {
      wnr1 += w;
      if (data.response(i, 1) == 1) w2only += w;
    }
    if (data.observed(i)) {
      wresp += w;
      wy += w * data.outcome(i);
    }
  }
  const double total = data.weight.sum();
  auto safe_logit = [](double p) { return logit(std::clamp(p, 1e-6, 1.0 - 1e-6)); };
  init.theta_cc = wy / wresp;
  init.alpha1 = Vector::Zero(3);
  init.alpha1(0) = safe_logit(w1 / total);
  init.alpha2 = Vector::Zero(3);
  init.alpha2(0) = safe_logit(wnr1 > 0.0 ? w2only / wnr1 : 0.5);

  // Calibrated fit under missingness at random refines the starting alphas.
  {
    SystemOptions opts;
    EquationSystem mar = build_mar(data, models.pm, models.estimand, dist, opts);
    Vector start(mar.dim());
    start << init.alpha1, init.alpha2, init.theta_cc;
    SolveOptions sopt;
    sopt.compute_covariance = false;
    sopt.max_restarts = 2;
    const SolveResult res = solve(mar, start, sopt);
    if (res.converged) {
      init.alpha1 = mar.layout().block(res.params, "alpha1");
      init.alpha2 = mar.layout().block(res.params, "alpha2");
    }
  }

  if (need_outcome) {
    std::vector<int> resp;
    for (int i = 0; i < n; ++i) {
      if (data.observed(i)) resp.push_back(i);
    }
    Matrix design(static_cast<int>(resp.size()), 3);
    Vector yv(static_cast<int>(resp.size())), wv(static_cast<int>(resp.size()));
    for (std::size_t k = 0; k < resp.size(); ++k) {
      const int i = resp[k];
      design.row(static_cast<int>(k)) << 1.0, data.x_missing(i, 0), data.x_missing(i, 1);
      yv(static_cast<int>(k)) = data.outcome(i);
      wv(static_cast<int>(k)) = data.weight(i);
    }
    if (models.outcome.family == OutcomeFamily::BinaryLogistic) {
      init.beta = fit_weighted_logistic(design, yv, wv).beta;
    } else {
      const GlmFit fit = fit_weighted_linear(design, yv, wv);
      init.beta = fit.beta;
      init.log_sigma2 = std::log(std::max(fit.sigma2, 1e-8));
    }
  }
  return init;
}

Vector pack_init(const EquationSystem& sys, const InitPieces& init) {
  Vector start = Vector::Zero(sys.dim());
  for (const auto& s : sys.layout().slices) {
    if (s.name == "alpha1") {
      start.segment(s.offset, s.size) = init.alpha1;
    } else if (s.name == "alpha2") {
      start.segment(s.offset, s.size) = init.alpha2;
    } else if (s.name == "beta") {
      start.segment(s.offset, s.size) = init.beta;
    } else if (s.name == "log_sigma2") {
      start(s.offset) = init.log_sigma2;
    } else if (s.name == "gamma") {
      start.segment(s.offset, s.size).setZero();
    } else if (s.name == "theta") {
      start(s.offset) = init.theta_cc;
    }
  }
  return start;
}

ReplicateRecord read_out(const EquationSystem& sys, const SolveResult& res, bool has_gamma) {
  ReplicateRecord rec;
  rec.converged = res.converged && res.covariance.size() > 0;
  if (!rec.converged) return rec;
  const auto& th = sys.layout().slice("theta");
  rec.theta = res.params(th.offset);
  rec.theta_se = std::sqrt(std::max(0.0, res.covariance(th.offset, th.offset)));
  rec.has_gamma = has_gamma && sys.layout().has("gamma");
  if (rec.has_gamma) {
    const auto& ga = sys.layout().slice("gamma");
    rec.gamma = res.params(ga.offset);
    rec.gamma_se = std::sqrt(std::max(0.0, res.covariance(ga.offset, ga.offset)));
  }
  return rec;
}

// ----- full-covariate MAR baselines (number of callbacks as a covariate) -----
//
// These see every unit's covariates and model response by call 2 as ignorable
// given (x, number of calls).  Since one call implies response by
// construction, the propensity model is fit on the two-call stratum and the
// one-call stratum gets probability one (the saturated form of including the
// call count as a covariate).

struct FullData {
  int n;
  Vector w;        // w_i / n
  Matrix z_prop;   // (1, xa, xb)
  Matrix z_out;    // (1, xa, xb, ncalls)
  Vector y;
  Eigen::ArrayXd rho;  // responded by call 2
  Eigen::ArrayXd s2;   // two-call stratum (r1 = 0)
};

FullData full_data(const GeneratedSurvey& gen) {
  FullData f;
  f.n = gen.data.n();
  f.w = gen.data.weight / static_cast<double>(f.n);
  f.z_prop.resize(f.n, 3);
  f.z_out.resize(f.n, 4);
  f.y.resize(f.n);
  f.rho.resize(f.n);
  f.s2.resize(f.n);
  for (int i = 0; i < f.n; ++i) {
    const double xa = gen.x_full(i, 0), xb = gen.x_full(i, 1);
    const double ncalls = gen.r1(i) == 1 ? 1.0 : 2.0;
    f.z_prop.row(i) << 1.0, xa, xb;
    f.z_out.row(i) << 1.0, xa, xb, ncalls;
    f.y(i) = gen.y_full(i) * (gen.r2(i) == 1 ? 1.0 : 0.0);  // masked outcome
    f.rho(i) = gen.r2(i);
    f.s2(i) = gen.r1(i) == 0 ? 1.0 : 0.0;
  }
  return f;
}

Array mar_mean(const FullData& f, bool binary, const Vector& b) {
  const Vector lp = f.z_out * b;
  if (binary) return lp.unaryExpr([](double t) { return expit(t); }).array();
  return lp.array();
}

EquationSystem build_mar_full(const GeneratedSurvey& gen, bool binary,
                              const std::string& which) {
  auto f = std::make_shared<FullData>(full_data(gen));
  ParameterLayout layout;
  const bool use_prop = which != "reg_mar";
  const bool use_out = which != "ipw_mar";
  if (use_prop) layout.add("eta", 3);
  if (use_out) layout.add("b", 4);
  layout.add("theta", 1);

  auto eval = [f, binary, which, layout, use_prop, use_out](const Vector& params, Vector& g,
                                                            Matrix* rows) {
    g.setZero(layout.dim());
    if (rows != nullptr) rows->setZero(f->n, layout.dim());
    const double theta = params(layout.slice("theta").offset);

    Array pihat = Array::Ones(f->n);
    if (use_prop) {
      const Vector eta = layout.block(params, "eta");
      const Array fitted =
          (f->z_prop * eta).unaryExpr([](double t) { return expit(t); }).array();
      pihat = f->s2 * fitted + (1.0 - f->s2);
      const int off = layout.slice("eta").offset;
      const Array score_coef = f->s2 * (f->rho - fitted);
      g.segment(off, 3) += f->z_prop.transpose() * (f->w.array() * score_coef).matrix();
      if (rows != nullptr) {
        for (int i = 0; i < f->n; ++i) {
          rows->row(i).segment(off, 3) += f->w(i) * score_coef(i) * f->z_prop.row(i);
        }
      }
    }

    Array mhat = Array::Zero(f->n);
    if (use_out) {
      const Vector b = layout.block(params, "b");
      const Array fitted_mean = mar_mean(*f, binary, b);
      mhat = fitted_mean - theta;
      const int off = layout.slice("b").offset;
      const Array score_coef = f->rho * (f->y.array() - fitted_mean);
      g.segment(off, 4) += f->z_out.transpose() * (f->w.array() * score_coef).matrix();
      if (rows != nullptr) {
        for (int i = 0; i < f->n; ++i) {
          rows->row(i).segment(off, 4) += f->w(i) * score_coef(i) * f->z_out.row(i);
        }
      }
    }

    const int offt = layout.slice("theta").offset;
    Array phi;
    if (which == "ipw_mar") {
      phi = f->rho * (f->y.array() - theta) / pihat;
    } else if (which == "reg_mar") {
      phi = f->rho * (f->y.array() - theta) + (1.0 - f->rho) * mhat;
    } else {  // dr_mar: augmented inverse probability weighting
      phi = f->rho * (f->y.array() - theta) / pihat - (f->rho - pihat) / pihat * mhat;
    }
    g(offt) += (f->w.array() * phi).sum();
    if (rows != nullptr) {
      for (int i = 0; i < f->n; ++i) rows->coeffRef(i, offt) += f->w(i) * phi(i);
    }
  };

  return EquationSystem(layout, f->n, std::move(eval));
}

ReplicateRecord estimate_mar_baseline(const std::string& which, const ScenarioSpec& spec,
                                      const GeneratedSurvey& gen) {
  const bool binary = spec.family == SimFamily::Binary;
  EquationSystem sys = build_mar_full(gen, binary, which);
  const FullData f = full_data(gen);

  Vector start = Vector::Zero(sys.dim());
  if (sys.layout().has("eta")) {
    std::vector<int> idx;
    for (int i = 0; i < f.n; ++i) {
      if (f.s2(i) > 0.5) idx.push_back(i);
    }
    Matrix zz(static_cast<int>(idx.size()), 3);
    Vector rr(static_cast<int>(idx.size())), ww(static_cast<int>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      zz.row(static_cast<int>(k)) = f.z_prop.row(idx[k]);
      rr(static_cast<int>(k)) = f.rho(idx[k]);
      ww(static_cast<int>(k)) = 1.0;
    }
    start.segment(sys.layout().slice("eta").offset, 3) =
        fit_weighted_logistic(zz, rr, ww).beta;
  }
  if (sys.layout().has("b")) {
    std::vector<int> idx;
    for (int i = 0; i < f.n; ++i) {
      if (f.rho(i) > 0.5) idx.push_back(i);
    }
    Matrix zz(static_cast<int>(idx.size()), 4);
    Vector yy(static_cast<int>(idx.size())), ww(static_cast<int>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      zz.row(static_cast<int>(k)) = f.z_out.row(idx[k]);
      yy(static_cast<int>(k)) = f.y(idx[k]);
      ww(static_cast<int>(k)) = 1.0;
    }
    start.segment(sys.layout().slice("b").offset, 4) =
        binary ? fit_weighted_logistic(zz, yy, ww).beta : fit_weighted_linear(zz, yy, ww).beta;
  }
  double wy = 0.0, wr = 0.0;
  for (int i = 0; i < f.n; ++i) {
    if (f.rho(i) > 0.5) {
      wy += f.w(i) * f.y(i);
      wr += f.w(i);
    }
  }
  start(sys.layout().slice("theta").offset) = wy / wr;

  const SolveResult res = solve(sys, start);
  return read_out(sys, res, false);
}

}  // namespace

ReplicateRecord estimate_scenario_once(const std::string& estimator, const ScenarioSpec& spec,
                                       const GeneratedSurvey& gen,
                                       const CovariateDistribution& dist) {
  try {
    if (estimator == "ipw_mar" || estimator == "reg_mar" || estimator == "dr_mar") {
      return estimate_mar_baseline(estimator, spec, gen);
    }
    const ScenarioModels models = scenario_working_models(spec);
    const bool need_outcome = estimator != "ipw";
    const InitPieces init = initial_pieces(gen, models, dist, need_outcome);

    EquationSystem sys = [&] {
      if (estimator == "ipw") {
        return build_ipw(gen.data, models.pm, models.estimand, dist);
      }
      if (estimator == "reg") {
        return build_reg(gen.data, models.pm, models.outcome, models.estimand, dist);
      }
      if (estimator == "dr") {
        return build_dr(gen.data, models.pm, models.outcome, models.estimand, dist);
      }
      throw std::invalid_argument("unknown estimator " + estimator);
    }();
    const SolveResult res = solve(sys, pack_init(sys, init));
    ReplicateRecord rec = read_out(sys, res, true);
    return rec;
  } catch (const std::exception&) {
    return ReplicateRecord{};  // recorded as a failed replicate
  }
}

namespace {

std::uint64_t scenario_tag(const ScenarioSpec& spec) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  mix_bytes(spec.name.data(), spec.name.size());
  const int fam = spec.family == SimFamily::Binary ? 0 : 1;
  mix_bytes(&fam, sizeof(fam));
  mix_bytes(&spec.delta, sizeof(spec.delta));
  mix_bytes(&spec.n, sizeof(spec.n));
  return h;
}

EstimatorSummary summarize(const std::vector<ReplicateRecord>& recs, double theta_truth,
                           double gamma_truth) {
  EstimatorSummary s;
  const double z = normal_critical_value(0.95);
  std::vector<double> th, th_se, ga, ga_se;
  int th_cover = 0, ga_cover = 0;
  for (const auto& r : recs) {
    if (!r.converged) {
      ++s.n_failed;
      continue;
    }
    ++s.n_converged;
    th.push_back(r.theta);
    th_se.push_back(r.theta_se);
    if (std::abs(r.theta - theta_truth) <= z * r.theta_se) ++th_cover;
    if (r.has_gamma) {
      s.has_gamma = true;
      ga.push_back(r.gamma);
      ga_se.push_back(r.gamma_se);
      if (std::abs(r.gamma - gamma_truth) <= z * r.gamma_se) ++ga_cover;
    }
  }
  if (!th.empty()) {
    s.theta_mean_bias = mean(th) - theta_truth;
    s.theta_mc_sd = th.size() > 1 ? sample_sd(th) : 0.0;
    s.theta_median_se = median(th_se);
    s.theta_coverage = static_cast<double>(th_cover) / static_cast<double>(th.size());
  }
  if (!ga.empty()) {
    s.gamma_mean_bias = mean(ga) - gamma_truth;
    s.gamma_mc_sd = ga.size() > 1 ? sample_sd(ga) : 0.0;
    s.gamma_median_se = median(ga_se);
    s.gamma_coverage = static_cast<double>(ga_cover) / static_cast<double>(ga.size());
  }
  return s;
}

}  // namespace

StudyReport run_study(const ScenarioSpec& spec, const StudyOptions& options) {
  StudyReport report;
  report.scenario = spec;
  report.theta_truth = scenario_truth_theta(spec);
  report.gamma_truth = spec.gamma;
  report.estimators = options.estimators;

  const CovariateDistribution dist = scenario_distribution();
  const int reps = spec.replicates;
  for (const auto& est : options.estimators) {
    report.replicates[est].resize(reps);
  }

  int jobs = options.jobs > 0 ? options.jobs
                              : static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min(jobs, reps));
  const std::uint64_t tag = scenario_tag(spec);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= reps) return;
      Rng rng(derive_stream(spec.seed, tag, static_cast<std::uint64_t>(r)));
      GeneratedSurvey gen;
      bool generated = true;
      try {
        gen = generate_survey(spec, rng);
      } catch (const std::exception&) {
        generated = false;
      }
      for (const auto& est : options.estimators) {
        ReplicateRecord rec;
        if (generated) rec = estimate_scenario_once(est, spec, gen, dist);
        rec.replicate = r;
        report.replicates[est][r] = rec;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (const auto& est : options.estimators) {
    EstimatorSummary s = summarize(report.replicates[est], report.theta_truth,
                                   report.gamma_truth);
    if (s.n_failed > options.max_failure_rate * reps) {
      throw std::runtime_error("estimator " + est + " failed on " + std::to_string(s.n_failed) +
                               " of " + std::to_string(reps) + " replicates in scenario " +
                               spec.name);
    }
    report.summary[est] = s;
  }
  return report;
}

SensitivityStudyReport run_sensitivity_study(const std::vector<double>& grid,
                                             const ScenarioSpec& base,
                                             const StudyOptions& options) {
  SensitivityStudyReport out;
  out.grid = grid;
  for (const double d : grid) {
    ScenarioSpec spec = base;
    spec.delta = d;
    out.reports.push_back(run_study(spec, options));
  }
  return out;
}

std::string study_csv(const StudyReport& report) {
  std::string out =
      "scenario,family,n,replicates,seed,delta,replicate,estimator,parameter,truth,"
      "estimate,se,ci_lo,ci_hi,covered,converged\n";
  char buf[512];
  const double z = normal_critical_value(0.95);
  const char* family = report.scenario.family == SimFamily::Binary ? "binary" : "continuous";
  auto row_prefix = [&](int rep, const std::string& est, const char* param) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%" PRIu64 ",%.17g,%d,%s,%s,",
                  report.scenario.name.c_str(), family, report.scenario.n,
                  report.scenario.replicates, report.scenario.seed, report.scenario.delta,
                  rep, est.c_str(), param);
    out += buf;
  };
  auto value_cells = [&](double truth, double estv, double se, bool covered, bool conv) {
    if (conv) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%d,1\n", truth, estv, se,
                    estv - z * se, estv + z * se, covered ? 1 : 0);
    } else {
      std::snprintf(buf, sizeof(buf), "%.17g,,,,,,0\n", truth);
    }
    out += buf;
  };
  for (const auto& est : report.estimators) {
    const auto& recs = report.replicates.at(est);
    for (const auto& rec : recs) {
      row_prefix(rec.replicate, est, "theta");
      value_cells(report.theta_truth, rec.theta, rec.theta_se,
                  std::abs(rec.theta - report.theta_truth) <= z * rec.theta_se, rec.converged);
      if (rec.has_gamma) {
        row_prefix(rec.replicate, est, "gamma");
        value_cells(report.gamma_truth, rec.gamma, rec.gamma_se,
                    std::abs(rec.gamma - report.gamma_truth) <= z * rec.gamma_se,
                    rec.converged);
      }
    }
  }
  return out;
}

}  // namespace sor
