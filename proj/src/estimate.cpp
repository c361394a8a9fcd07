#include "sor/estimate.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "sor/fit.hpp"
#include "sor/stats.hpp"

namespace sor {

using nlohmann::json;

Method parse_method(const std::string& name) {
  if (name == "ipw") return Method::Ipw;
  if (name == "reg") return Method::Reg;
  if (name == "dr") return Method::Dr;
  if (name == "cc") return Method::Cc;
  if (name == "mar") return Method::Mar;
  if (name == "cor") return Method::Cor;
  if (name == "corx") return Method::CorX;
  if (name == "pc") return Method::Pc;
  throw std::invalid_argument("unknown method '" + name +
                              "' (expected ipw|reg|dr|cc|mar|cor|corx|pc)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Ipw: return "ipw";
    case Method::Reg: return "reg";
    case Method::Dr: return "dr";
    case Method::Cc: return "cc";
    case Method::Mar: return "mar";
    case Method::Cor: return "cor";
    case Method::CorX: return "corx";
    case Method::Pc: return "pc";
  }
  return "?";
}

AnalysisModels analysis_models(const Manifest& manifest, const SurveyDataset& data,
                               const std::string& estimand_kind) {
  AnalysisModels m;
  std::vector<std::string> prop_names, out_names, odds_names;
  FeatureMap prop = build_feature_map(manifest.propensity_features, manifest, &prop_names);
  m.pm.baseline = {prop, prop};
  m.pm.alpha = {Vector::Zero(prop.dim()), Vector::Zero(prop.dim())};
  m.pm.odds = build_odds_design(manifest.odds_features, manifest, &odds_names);
  m.pm.gamma = Vector::Zero(m.pm.odds.dim);
  m.outcome.family = manifest.outcome_family;
  m.outcome.design = build_feature_map(manifest.outcome_features, manifest, &out_names);
  m.outcome.beta = Vector::Zero(m.outcome.design.dim());
  m.outcome.sigma2 = 1.0;
  if (estimand_kind == "mean") {
    m.estimand = EstimandSpec::mean();
    m.feature_names["theta"] = {"theta"};
  } else if (estimand_kind == "logit") {
    std::vector<std::string> reg_names;
    const auto terms = manifest.estimand_features.empty() ? manifest.missing_covariates
                                                          : manifest.estimand_features;
    m.estimand = EstimandSpec::logistic_regression(build_feature_map(terms, manifest, &reg_names));
    m.feature_names["theta"] = reg_names;
  } else {
    throw std::invalid_argument("estimand must be 'mean' or 'logit'");
  }
  m.feature_names["alpha1"] = prop_names;
  m.feature_names["alpha2"] = prop_names;
  m.feature_names["beta"] = out_names;
  m.feature_names["gamma"] = odds_names;
  (void)data;
  return m;
}

namespace {

struct CommonInit {
  Vector alpha1, alpha2, beta, theta;
  double log_sigma2 = 0.0;
};

Vector respondent_outcome_fit(const SurveyDataset& data, const FeatureMap& design,
                              OutcomeFamily family, double* log_sigma2,
                              bool last_call_only = false) {
  const int K = data.calls();
  std::vector<int> rows;
  for (int i = 0; i < data.n(); ++i) {
    if (!data.observed(i)) continue;
    if (last_call_only && K >= 2 && data.response(i, K - 2) == 1) continue;
    rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument("no respondents to fit the outcome model on");
  Matrix X(static_cast<int>(rows.size()), design.dim());
  Vector y(static_cast<int>(rows.size())), w(static_cast<int>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    X.row(static_cast<int>(k)) = design(data.covariate_row(rows[k])).transpose();
    y(static_cast<int>(k)) = data.outcome(rows[k]);
    w(static_cast<int>(k)) = data.weight(rows[k]);
  }
  if (family == OutcomeFamily::BinaryLogistic) {
    if (log_sigma2 != nullptr) *log_sigma2 = 0.0;
    return fit_weighted_logistic(X, y, w).beta;
  }
  const GlmFit fit = fit_weighted_linear(X, y, w);
  if (log_sigma2 != nullptr) *log_sigma2 = std::log(std::max(fit.sigma2, 1e-8));
  return fit.beta;
}

Vector cc_theta(const SurveyDataset& data, const EstimandSpec& spec) {
  if (spec.kind == EstimandSpec::Kind::Mean) {
    double wy = 0.0, wsum = 0.0;
    for (int i = 0; i < data.n(); ++i) {
      if (!data.observed(i)) continue;
      wy += data.weight(i) * data.outcome(i);
      wsum += data.weight(i);
    }
    if (!(wsum > 0.0)) throw std::invalid_argument("no respondents");
    return Vector::Constant(1, wy / wsum);
  }
  return respondent_outcome_fit(data, spec.regressor, OutcomeFamily::BinaryLogistic, nullptr);
}

CommonInit initial_values(const SurveyDataset& data, const CovariateDistribution& dist,
                          const AnalysisModels& models) {
  CommonInit init;
  const int n = data.n();
  double w1 = 0.0, w2only = 0.0, wnr1 = 0.0, total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = data.weight(i);
    total += w;
    if (data.response(i, 0) == 1) {
      w1 += w;
    } else {
      wnr1 += w;
      if (data.response(i, 1) == 1) w2only += w;
    }
  }
  auto safe_logit = [](double p) { return logit(std::clamp(p, 1e-6, 1.0 - 1e-6)); };
  const int dp = models.pm.baseline[0].dim();
  init.alpha1 = Vector::Zero(dp);
  init.alpha1(0) = safe_logit(w1 / total);
  init.alpha2 = Vector::Zero(dp);
  init.alpha2(0) = safe_logit(wnr1 > 0.0 ? w2only / wnr1 : 0.5);
  init.theta = cc_theta(data, models.estimand);

  EquationSystem mar = build_mar(data, models.pm, models.estimand, dist);
  Vector start(mar.dim());
  start << init.alpha1, init.alpha2, init.theta;
  SolveOptions sopt;
  sopt.compute_covariance = false;
  sopt.max_restarts = 2;
  const SolveResult res = solve(mar, start, sopt);
  if (res.converged) {
    init.alpha1 = mar.layout().block(res.params, "alpha1");
    init.alpha2 = mar.layout().block(res.params, "alpha2");
  }
  init.beta = respondent_outcome_fit(data, models.outcome.design, models.outcome.family,
                                     &init.log_sigma2);
  return init;
}

Vector pack_start(const EquationSystem& sys, const CommonInit& init) {
  Vector start = Vector::Zero(sys.dim());
  for (const auto& s : sys.layout().slices) {
    if (s.name == "alpha1") {
      start.segment(s.offset, s.size) = init.alpha1;
    } else if (s.name == "alpha2" || s.name == "alphaK") {
      start.segment(s.offset, s.size) = init.alpha2;
    } else if (s.name == "beta" || s.name == "betaK" || s.name == "beta_last") {
      start.segment(s.offset, s.size) = init.beta;
    } else if (s.name == "log_sigma2" || s.name == "log_sigma2K" ||
               s.name == "log_sigma2_last") {
      start(s.offset) = init.log_sigma2;
    } else if (s.name == "theta") {
      start.segment(s.offset, s.size) = init.theta;
    }
    // gamma, gammaK, nu start at zero
  }
  return start;
}

void fill_parameters(EstimationReport& rep, const EquationSystem& sys, const SolveResult& res) {
  const auto names = sys.layout().component_names();
  for (int j = 0; j < sys.dim(); ++j) {
    ParameterReport p;
    p.name = names[j];
    p.estimate = res.params(j);
    if (res.covariance.size() > 0) {
      p.se = std::sqrt(std::max(0.0, res.covariance(j, j)));
      const Interval ci = confidence_interval(p.estimate, p.se);
      p.ci_lo = ci.lo;
      p.ci_hi = ci.hi;
    }
    rep.parameters.push_back(p);
  }
}

void propensity_diagnostics(EstimationReport& rep, const SurveyDataset& data,
                            const PropensityModel& pm, const EquationSystem& sys,
                            const Vector& params, double delta) {
  if (!sys.layout().has("alpha1")) return;
  PropensityModel fitted = pm;
  fitted.alpha[0] = sys.layout().block(params, "alpha1");
  fitted.alpha[1] = sys.layout().has("alpha2") ? sys.layout().block(params, "alpha2")
                                               : Vector::Zero(pm.baseline[1].dim());
  fitted.gamma = sys.layout().has("gamma") ? sys.layout().block(params, "gamma")
                                           : Vector::Zero(pm.odds.dim);
  Vector gamma2 = fitted.gamma;
  gamma2(0) += delta;
  for (int i = 0; i < data.n(); ++i) {
    if (data.response(i, 1) != 1) continue;
    const Vector x = data.covariate_row(i);
    const double y = data.outcome(i);
    const double p1 = fitted.propensity(0, x, y);
    const double or2 = gamma2.dot(pm.odds.eval(x, y));
    const double p2 = expit(fitted.alpha[1].dot(pm.baseline[1](x)) + or2);
    rep.min_pi1 = std::min(rep.min_pi1, p1);
    rep.max_pi1 = std::max(rep.max_pi1, p1);
    rep.min_pi2 = std::min(rep.min_pi2, p2);
    rep.max_pi2 = std::max(rep.max_pi2, p2);
    rep.has_propensity_diagnostics = true;
  }
}

}  // namespace

EstimationReport run_estimation(const SurveyDataset& data, const CovariateDistribution& dist,
                                const AnalysisModels& models, const EstimateOptions& options) {
  EstimationReport rep;
  rep.method = method_name(options.method);
  rep.feature_names = models.feature_names;

  // The parameter-counting estimator has its own closed-form path.
  if (options.method == Method::Pc) {
    const PcSolution pc = pc_point_estimate(data);
    EquationSystem sys = build_pc(data);
    Vector at(6);
    at << pc.p[2], pc.p[3], pc.p[4], pc.p[5], pc.p[0], pc.theta;
    rep.converged = true;
    rep.residual_norm = sys.residual(at).lpNorm<Eigen::Infinity>();
    SolveResult res;
    res.params = at;
    res.converged = true;
    res.covariance = sandwich_covariance(sys, at);
    fill_parameters(rep, sys, res);
    return rep;
  }

  SystemOptions sopts;
  sopts.delta = options.delta;

  EquationSystem sys = [&]() -> EquationSystem {
    switch (options.method) {
      case Method::Cc:
        return build_cc(data, models.estimand);
      case Method::Cor:
        return build_cor(data, models.estimand);
      case Method::CorX: {
        CorxSystem cs = build_corx(data, models.estimand, models.outcome, dist);
        rep.corx_clipped_cells = cs.clipped_cells;
        rep.corx_unmatched_weight = cs.unmatched_weight;
        return cs.system;
      }
      case Method::Mar:
        return build_mar(data, models.pm, models.estimand, dist, sopts);
      case Method::Ipw:
        if (options.calls > 2) {
          MulticallConfig mc{models.pm.baseline[0], models.pm.odds, std::nullopt, std::nullopt,
                             std::nullopt};
          return build_multicall_ipw(data, models.pm, mc, models.estimand, dist, sopts);
        }
        return build_ipw(data, models.pm, models.estimand, dist, sopts);
      case Method::Reg:
        if (options.calls > 2) {
          MulticallConfig mc{models.pm.baseline[0], models.pm.odds, models.outcome,
                             std::nullopt, std::nullopt};
          return build_multicall_reg(data, models.pm, models.outcome, mc, models.estimand,
                                     dist, sopts);
        }
        return build_reg(data, models.pm, models.outcome, models.estimand, dist, sopts);
      case Method::Dr:
        if (options.calls > 2) {
          MulticallConfig mc{models.pm.baseline[0], models.pm.odds, models.outcome,
                             std::nullopt, std::nullopt};
          return build_multicall_dr(data, models.pm, models.outcome, mc, models.estimand,
                                    dist, sopts);
        }
        return build_dr(data, models.pm, models.outcome, models.estimand, dist, sopts);
      default:
        throw std::invalid_argument("unhandled method");
    }
  }();

  Vector start;
  if (options.method == Method::Cc) {
    start = cc_theta(data, models.estimand);
  } else if (options.method == Method::Cor) {
    start = Vector::Zero(sys.dim());
    start.segment(sys.layout().slice("theta").offset, models.estimand.dim()) =
        cc_theta(data, models.estimand);
  } else if (options.method == Method::CorX) {
    CommonInit init;
    init.theta = cc_theta(data, models.estimand);
    init.beta = respondent_outcome_fit(data, models.outcome.design, models.outcome.family,
                                       &init.log_sigma2, /*last_call_only=*/true);
    init.alpha1 = init.alpha2 = Vector();
    start = Vector::Zero(sys.dim());
    start.segment(sys.layout().slice("beta_last").offset, init.beta.size()) = init.beta;
    if (sys.layout().has("log_sigma2_last")) {
      start(sys.layout().slice("log_sigma2_last").offset) = init.log_sigma2;
    }
    start.segment(sys.layout().slice("theta").offset, models.estimand.dim()) = init.theta;
  } else {
    const CommonInit init = initial_values(data, dist, models);
    start = pack_start(sys, init);
  }

  SolveOptions solve_opts;
  solve_opts.jitter_seed = options.seed;
  const SolveResult res = solve(sys, start, solve_opts);
  rep.converged = res.converged;
  rep.residual_norm = res.residual_norm;
  rep.iterations = res.iterations;
  rep.message = res.message;
  if (res.params.size() == sys.dim()) fill_parameters(rep, sys, res);
  if (rep.converged &&
      (options.method == Method::Ipw || options.method == Method::Reg ||
       options.method == Method::Dr || options.method == Method::Mar)) {
    propensity_diagnostics(rep, data, models.pm, sys, res.params, options.delta);
  }

  if (options.bootstrap && rep.converged) {
    const EstimateOptions& eo = options;
    const AnalysisModels& am = models;
    auto rebuild = [&am, &eo, &dist](const SurveyDataset& resampled) -> EquationSystem {
      SystemOptions so;
      so.delta = eo.delta;
      switch (eo.method) {
        case Method::Ipw:
          return build_ipw(resampled, am.pm, am.estimand, dist, so);
        case Method::Reg:
          return build_reg(resampled, am.pm, am.outcome, am.estimand, dist, so);
        case Method::Dr:
          return build_dr(resampled, am.pm, am.outcome, am.estimand, dist, so);
        default:
          throw std::invalid_argument("bootstrap supports ipw, reg, and dr");
      }
    };
    const Vector bse =
        bootstrap_se(data, rebuild, res.params, options.bootstrap_resamples, options.seed);
    for (int j = 0; j < sys.dim(); ++j) rep.parameters[j].bootstrap_se = bse(j);
  }
  return rep;
}

std::string estimation_report_json(const EstimationReport& report) {
  json j;
  j["schema_version"] = 1;
  j["method"] = report.method;
  j["converged"] = report.converged;
  j["residual_norm"] = report.residual_norm;
  j["iterations"] = report.iterations;
  j["message"] = report.message;
  json params = json::array();
  for (const auto& p : report.parameters) {
    json pj;
    pj["name"] = p.name;
    pj["estimate"] = p.estimate;
    pj["se"] = p.se;
    pj["ci_lo"] = p.ci_lo;
    pj["ci_hi"] = p.ci_hi;
    if (p.bootstrap_se > 0.0) pj["bootstrap_se"] = p.bootstrap_se;
    params.push_back(pj);
  }
  j["parameters"] = params;
  json diag;
  if (report.has_propensity_diagnostics) {
    diag["min_pi1"] = report.min_pi1;
    diag["max_pi1"] = report.max_pi1;
    diag["min_pi2"] = report.min_pi2;
    diag["max_pi2"] = report.max_pi2;
  }
  diag["corx_clipped_cells"] = report.corx_clipped_cells;
  diag["corx_unmatched_weight"] = report.corx_unmatched_weight;
  j["diagnostics"] = diag;
  json names = json::object();
  for (const auto& [k, v] : report.feature_names) names[k] = v;
  j["feature_names"] = names;
  return j.dump(2) + "\n";
}

}  // namespace sor
