#pragma once

#include <map>
#include <optional>
#include <string>

#include "sor/model.hpp"
#include "sor/system.hpp"
#include "sor/tilting.hpp"

namespace sor {

// Options shared by the estimating-equation builders.
//
// V1/V2 override the calibration features (defaults: the call-1 and call-2
// baseline designs).  U overrides the function paired with the odds ratio
// equations; its dimension must match the block it identifies.  `delta` is a
// fixed offset added to the first odds-ratio coordinate of the second call
// (the sensitivity-analysis parameter; it also shifts the exponential tilt,
// which is derived from the second-call propensity).  `frozen` holds named
// parameter blocks at fixed values: frozen blocks leave the parameter vector
// and their paired equations are dropped, keeping the system square.
struct SystemOptions {
  std::optional<FeatureMap> V1;
  std::optional<FeatureMap> V2;
  std::optional<UFunction> U;
  double delta = 0.0;
  std::map<std::string, Vector> frozen;
};

// Inverse probability weighting system over (alpha1, alpha2, gamma, theta):
// census calibration of the call-1 and call-2 respondent feature means, the
// odds-ratio contrast between calls, and the weighted estimand equation with
// cumulative response probability pi1 + pi2 (1 - pi1).
EquationSystem build_ipw(const SurveyDataset& data, const PropensityModel& pm,
                         const EstimandSpec& spec, const CovariateDistribution& dist,
                         const SystemOptions& options = {});

// Imputation/regression system over (beta, alpha1, gamma, theta): the
// second-call outcome score, calibration of imputed U against E_f{h_U}, and
// the estimand equation with exponential-tilting imputation h_m for
// nonrespondents.  The Gaussian family adds a log_sigma2 block.
EquationSystem build_reg(const SurveyDataset& data, const PropensityModel& pm,
                         const OutcomeModel& outcome, const EstimandSpec& spec,
                         const CovariateDistribution& dist, const SystemOptions& options = {});

// Doubly robust system over (alpha1, alpha2, beta, gamma, theta): calibration
// and outcome-score equations plus the augmented odds-ratio equation using
// U - g_U and the augmented imputation estimand equation.
EquationSystem build_dr(const SurveyDataset& data, const PropensityModel& pm,
                        const OutcomeModel& outcome, const EstimandSpec& spec,
                        const CovariateDistribution& dist, const SystemOptions& options = {});

// Models for the final call K when using every callback (K >= 3): a
// propensity pi_K(x, y) = expit{alpha_K' vK(x) + gamma_K' uK(x, y)} for
// response at call K given nonresponse through call 2, and/or an outcome
// model f_K for call-K respondents.  V3 and W override the function blocks
// of the corresponding estimating equations.
struct MulticallConfig {
  FeatureMap baseline_K;
  OddsRatioDesign odds_K;
  std::optional<OutcomeModel> outcome_K;
  std::optional<FeatureMap> V3;
  std::optional<UFunction> W;
};

EquationSystem build_multicall_ipw(const SurveyDataset& data, const PropensityModel& pm,
                                   const MulticallConfig& mc, const EstimandSpec& spec,
                                   const CovariateDistribution& dist,
                                   const SystemOptions& options = {});

EquationSystem build_multicall_reg(const SurveyDataset& data, const PropensityModel& pm,
                                   const OutcomeModel& outcome, const MulticallConfig& mc,
                                   const EstimandSpec& spec, const CovariateDistribution& dist,
                                   const SystemOptions& options = {});

EquationSystem build_multicall_dr(const SurveyDataset& data, const PropensityModel& pm,
                                  const OutcomeModel& outcome, const MulticallConfig& mc,
                                  const EstimandSpec& spec, const CovariateDistribution& dist,
                                  const SystemOptions& options = {});

// Complete-case estimator: sum_i w_i rK_i m(x_i, y_i; theta) = 0.
EquationSystem build_cc(const SurveyDataset& data, const EstimandSpec& spec);

// Missing-at-random estimator: the IPW system with gamma frozen at zero.
EquationSystem build_mar(const SurveyDataset& data, const PropensityModel& pm,
                         const EstimandSpec& spec, const CovariateDistribution& dist,
                         const SystemOptions& options = {});

// Continuum-of-resistance estimator: nonrespondents are proxied by the
// respondents of the final call.  Parameters (nu, theta) where nu is the
// last-call mean of the estimand function.
EquationSystem build_cor(const SurveyDataset& data, const EstimandSpec& spec);

// Covariate-adjusted continuum of resistance: an outcome model fitted on
// last-call respondents is averaged over the nonrespondent covariate law
// implied by the known f(X) minus the weighted respondent empirical law
// (negative cells clipped at zero and renormalized).
struct CorxSystem {
  EquationSystem system;
  CovariateDistribution nonrespondent;  // the clipped, renormalized law
  int clipped_cells = 0;
  double unmatched_weight = 0.0;  // respondent mass at covariate values absent from f(X)
};
CorxSystem build_corx(const SurveyDataset& data, const EstimandSpec& spec,
                      const OutcomeModel& outcome_last, const CovariateDistribution& dist);

// Parameter-counting estimator for a binary outcome without covariates,
// calls collapsed to (first, last).  Cell probabilities
//   p1 = f(y=0, never), p2 = f(y=1, never), p3/p4 = f(y, late respondent),
//   p5/p6 = f(y, first-call respondent)
// with the equal-odds-ratio constraint p6(p1+p3) p2 p3 = p4 p1 p5 (p2+p4)
// solved for p1 by bracketed bisection; theta = p2 + p4 + p6.
struct PcSolution {
  double p[6];
  double theta;
};
PcSolution pc_point_estimate(const SurveyDataset& data);

// Stacked moment system for the parameter-counting estimator, used for the
// sandwich covariance of (p3..p6, p1, theta) around pc_point_estimate.
EquationSystem build_pc(const SurveyDataset& data);

}  // namespace sor
