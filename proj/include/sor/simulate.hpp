#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sor/equations.hpp"
#include "sor/rng.hpp"
#include "sor/solver.hpp"

namespace sor {

enum class SimFamily { Binary, Continuous };

// A named data-generating configuration.  The generating propensities are
//   pi1 = expit(alpha1' X + gamma Y),  pi2 = expit(alpha2' W1 + (gamma+delta) Y)
// with X = (1, Xa, Xb), Xa, Xb ~ Unif(-1,1), and W selectors replacing the
// covariates by their squares to misspecify the corresponding working model.
// The outcome block specifies f2, the conditional law among second-call
// respondents: logistic expit(beta' W2) or N(beta' W2, sigma2).  Generation
// draws Y from the full-data conditional implied by inverting the selection
// weighting (see generate_* in simulate.cpp), so f2 holds exactly.
struct ScenarioSpec {
  std::string name;
  SimFamily family = SimFamily::Binary;
  Vector alpha1, alpha2, beta;
  double gamma = 0.0;
  double sigma2 = 0.0;
  bool w1_squared = false;
  bool w2_squared = false;
  double delta = 0.0;  // generating-side gap between the two odds ratios
  int n = 5000;
  int replicates = 1000;
  std::uint64_t seed = 20210601;

  static ScenarioSpec binary(const std::string& name);      // TT, FT, TF, FF
  static ScenarioSpec continuous(const std::string& name);  // TT, FT, TF, FF
  static ScenarioSpec sensitivity(double delta);            // binary, gamma1 = 0.5
};

// The masked survey plus the latent values, kept for oracle checks and for
// the full-covariate MAR baseline estimators.
struct GeneratedSurvey {
  SurveyDataset data;
  Matrix x_full;  // n x 2: (xa, xb) for every unit
  Vector y_full;
  Eigen::ArrayXi r1, r2;
};

GeneratedSurvey generate_binary(const ScenarioSpec& spec, Rng& rng);
GeneratedSurvey generate_continuous(const ScenarioSpec& spec, Rng& rng);
GeneratedSurvey generate_survey(const ScenarioSpec& spec, Rng& rng);

// Full-data conditional mean E(Y | xa, xb) implied by the scenario.
double full_conditional_mean(const ScenarioSpec& spec, double xa, double xb);

// E(Y) by tensor Gauss-Legendre quadrature over the uniform covariate law;
// near machine precision for these smooth integrands.
double scenario_truth_theta(const ScenarioSpec& spec, int nodes_per_axis = 48);

// Marginal response rates P(R1 = 1) and P(R2 = 1) by the same quadrature.
std::pair<double, double> scenario_response_rates(const ScenarioSpec& spec,
                                                  int nodes_per_axis = 48);

// The known covariate distribution handed to the estimators: a tensor
// Gauss-Legendre discretization of Unif(-1,1)^2.
CovariateDistribution scenario_distribution(int nodes_per_axis = 32);

// Working-model structure used by the scenario estimators (linear features
// in both propensity baselines, scalar outcome odds ratio, linear/logistic
// outcome design, mean estimand).
struct ScenarioModels {
  PropensityModel pm;
  OutcomeModel outcome;
  EstimandSpec estimand;
};
ScenarioModels scenario_working_models(const ScenarioSpec& spec);

// Latent-utility generative model: an unmeasured factor C drives the vote
// and the per-call response utilities, with independent logistic errors.
struct ChoiceModelParams {
  double beta0 = 0.2, beta1 = 0.35, beta2 = 0.3;
  double alpha10 = -0.6, alpha11 = 0.4;
  double alpha20 = 0.35, alpha21 = -0.3;
  double gamma1 = 0.3, gamma2 = 0.3;
  int n = 1000;
};

struct ChoiceDraw {
  Vector x, c, y;
  Eigen::ArrayXi r1, r2;
};

ChoiceDraw generate_choice_model(const ChoiceModelParams& params, Rng& rng);

// Fitted outcome coefficients in per-call response logistic regressions:
// R1 ~ (1, X, Y) on everyone and R2 ~ (1, X, Y) among first-call
// nonrespondents.
struct ChoiceFit {
  double gamma1_tilde = 0.0;
  double gamma2_tilde = 0.0;
  bool ok = false;
};
ChoiceFit fit_choice_odds(const ChoiceDraw& draw);

// ---------- Monte Carlo study harness ----------

struct ReplicateRecord {
  int replicate = 0;
  bool converged = false;
  double theta = 0.0, theta_se = 0.0;
  double gamma = 0.0, gamma_se = 0.0;
  bool has_gamma = false;
};

struct EstimatorSummary {
  int n_converged = 0;
  int n_failed = 0;
  double theta_mean_bias = 0.0, theta_mc_sd = 0.0, theta_median_se = 0.0, theta_coverage = 0.0;
  bool has_gamma = false;
  double gamma_mean_bias = 0.0, gamma_mc_sd = 0.0, gamma_median_se = 0.0, gamma_coverage = 0.0;
};

struct StudyReport {
  ScenarioSpec scenario;
  double theta_truth = 0.0;
  double gamma_truth = 0.0;
  std::vector<std::string> estimators;
  std::map<std::string, std::vector<ReplicateRecord>> replicates;
  std::map<std::string, EstimatorSummary> summary;
};

struct StudyOptions {
  // Recognized estimators: ipw, reg, dr, ipw_mar, reg_mar, dr_mar.
  std::vector<std::string> estimators = {"ipw", "reg", "dr"};
  int jobs = 0;                     // 0 = hardware concurrency
  double max_failure_rate = 0.01;   // throw when exceeded (silent exclusions bias coverage)
};

// Runs spec.replicates independent replicates.  Replicate substreams are
// keyed by (seed, scenario, replicate), so the report is identical for any
// worker count.
StudyReport run_study(const ScenarioSpec& spec, const StudyOptions& options = {});

// One study per generating-side delta; analysis always assumes a shared odds
// ratio.
struct SensitivityStudyReport {
  std::vector<double> grid;
  std::vector<StudyReport> reports;
};
SensitivityStudyReport run_sensitivity_study(const std::vector<double>& grid,
                                             const ScenarioSpec& base,
                                             const StudyOptions& options = {});

// Flat per-replicate table (one row per replicate x estimator x parameter)
// with byte-stable formatting and ordering.
std::string study_csv(const StudyReport& report);

// Single-dataset estimation used by the replicate loop and by tests:
// builds the scenario working-model system, applies the initialization
// policy, solves, and reads out (theta, gamma) with sandwich SEs.
ReplicateRecord estimate_scenario_once(const std::string& estimator, const ScenarioSpec& spec,
                                       const GeneratedSurvey& gen,
                                       const CovariateDistribution& dist);

}  // namespace sor
