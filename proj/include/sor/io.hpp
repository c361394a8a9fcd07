#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sor/design.hpp"
#include "sor/model.hpp"
#include "sor/simulate.hpp"
#include "sor/types.hpp"

namespace sor {

// File or format problem; carries the 1-based line number when known.
struct IoError : std::runtime_error {
  IoError(std::string path, int line, const std::string& what);
  std::string path;
  int line;  // 0 when not line-specific
};

// Analysis manifest: names the dataset columns and the working-model feature
// lists.  Feature entries are covariate column names or `a:b` products of two
// columns; an intercept is always prepended.  Odds-ratio entries are "y" or
// "y:col".
struct Manifest {
  std::string weight_column;
  std::vector<std::string> call_columns;  // r1..rK in call order
  std::string outcome_column;
  OutcomeFamily outcome_family = OutcomeFamily::BinaryLogistic;
  std::vector<std::string> missing_covariates;   // X1, co-missing with y
  std::vector<std::string> observed_covariates;  // X2, always observed
  std::vector<std::string> propensity_features;  // default: all covariates
  std::vector<std::string> outcome_features;     // default: all covariates
  std::vector<std::string> odds_features = {"y"};
  std::vector<std::string> estimand_features;    // logit estimand regressors
  // X2 distribution used in f(X) = f(X1) f(X2): weighted empirical
  // frequencies (default) or equal mass over the observed support.
  std::string design_distribution = "empirical";
  bool impute_unsure = false;       // respondents with a missing outcome
  bool stochastic_impute = false;   // draw instead of thresholding at 0.5
};

Manifest read_manifest(const std::string& path);

// Survey CSV: header row, weight/call/outcome/covariate columns, empty fields
// for missing values.  The outcome and X1 must be present exactly for
// final-call respondents (unless impute_unsure handles respondent rows with
// an empty outcome).  Throws IoError with the offending line.
SurveyDataset read_survey_csv(const std::string& path, const Manifest& manifest,
                              std::uint64_t impute_seed = 1);

// Census CSV: one row per support point, the X1 covariate columns plus a
// `mass` or `count` column (counts are normalized on load).  Columns are
// matched to manifest.missing_covariates by name.
CovariateDistribution read_census_csv(const std::string& path, const Manifest& manifest);

// f(X) = f(X1) f(X2) on the (X1, X2) support layout used by SurveyDataset.
// With no observed covariates this is the census law itself.
CovariateDistribution combined_distribution(const CovariateDistribution& census,
                                            const SurveyDataset& data,
                                            const Manifest& manifest);

// Feature maps over the concatenated (X1, X2) covariate vector.
FeatureMap build_feature_map(const std::vector<std::string>& terms, const Manifest& manifest,
                             std::vector<std::string>* names_out = nullptr);
OddsRatioDesign build_odds_design(const std::vector<std::string>& terms,
                                  const Manifest& manifest,
                                  std::vector<std::string>* names_out = nullptr);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

// Study report serialization (summary JSON; the per-replicate table is
// study_csv in simulate.hpp).
std::string study_json(const StudyReport& report);

}  // namespace sor
