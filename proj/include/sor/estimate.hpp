#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sor/equations.hpp"
#include "sor/io.hpp"
#include "sor/solver.hpp"

namespace sor {

enum class Method { Ipw, Reg, Dr, Cc, Mar, Cor, CorX, Pc };

Method parse_method(const std::string& name);  // throws on unknown names
std::string method_name(Method m);

// Working-model structure for one analysis, with display names per block.
struct AnalysisModels {
  PropensityModel pm;   // designs; coefficient values are unused
  OutcomeModel outcome;
  EstimandSpec estimand;
  std::map<std::string, std::vector<std::string>> feature_names;
};

// Builds the default analysis structure from a manifest: shared propensity
// features for both calls, the manifest's outcome design, the odds-ratio
// terms, and the requested estimand ("mean" or "logit").
AnalysisModels analysis_models(const Manifest& manifest, const SurveyDataset& data,
                               const std::string& estimand_kind);

struct EstimateOptions {
  Method method = Method::Dr;
  double delta = 0.0;
  int calls = 2;  // 2 = first two calls; >2 = use every callback (multicall systems)
  std::uint64_t seed = 20210601;
  bool bootstrap = false;
  int bootstrap_resamples = 200;
};

struct ParameterReport {
  std::string name;
  double estimate = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double bootstrap_se = 0.0;  // 0 when not computed
};

struct EstimationReport {
  std::string method;
  bool converged = false;
  double residual_norm = 0.0;
  int iterations = 0;
  std::string message;
  std::vector<ParameterReport> parameters;
  // Propensity range diagnostics at the solution (respondents).
  double min_pi1 = 1.0, max_pi1 = 0.0, min_pi2 = 1.0, max_pi2 = 0.0;
  bool has_propensity_diagnostics = false;
  int corx_clipped_cells = 0;
  double corx_unmatched_weight = 0.0;
  std::map<std::string, std::vector<std::string>> feature_names;
};

// Runs one estimation method end to end: builds the moment system, applies
// the initialization policy (calibrated MAR fit for the alphas, respondent
// outcome fit for beta, complete-case for theta, gamma = 0), solves, and
// reports estimates with sandwich standard errors and 95% intervals.
EstimationReport run_estimation(const SurveyDataset& data, const CovariateDistribution& dist,
                                const AnalysisModels& models, const EstimateOptions& options);

std::string estimation_report_json(const EstimationReport& report);

}  // namespace sor
