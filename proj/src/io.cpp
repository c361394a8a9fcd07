#include "sor/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sor/fit.hpp"
#include "sor/rng.hpp"
#include "sor/stats.hpp"

namespace sor {

using nlohmann::json;

IoError::IoError(std::string path_, int line_, const std::string& what_)
    : std::runtime_error(line_ > 0 ? path_ + ":" + std::to_string(line_) + ": " + what_
                                   : path_ + ": " + what_),
      path(std::move(path_)),
      line(line_) {}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, 0, "cannot open file for writing");
  out << content;
  if (!out) throw IoError(path, 0, "write failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.erase(c.begin());
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t')) c.pop_back();
  }
  return cells;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // line number = index + 2
};

CsvTable read_csv(const std::string& path) {
  const std::string content = read_file(path);
  CsvTable t;
  std::istringstream ss(content);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto cells = split_csv_line(line);
    if (lineno == 1) {
      t.header = cells;
    } else {
      if (cells.size() != t.header.size()) {
        throw IoError(path, lineno,
                      "expected " + std::to_string(t.header.size()) + " fields, found " +
                          std::to_string(cells.size()));
      }
      t.rows.push_back(std::move(cells));
    }
  }
  if (t.header.empty()) throw IoError(path, 0, "empty file");
  return t;
}

int column_of(const CsvTable& t, const std::string& path, const std::string& name) {
  for (std::size_t j = 0; j < t.header.size(); ++j) {
    if (t.header[j] == name) return static_cast<int>(j);
  }
  throw IoError(path, 1, "missing column '" + name + "'");
}

double parse_number(const std::string& path, int line, const std::string& cell,
                    const std::string& col) {
  double v = 0.0;
  const auto* begin = cell.data();
  const auto* end = cell.data() + cell.size();
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw IoError(path, line, "cannot parse '" + cell + "' in column '" + col + "'");
  }
  return v;
}

std::vector<std::string> string_list(const json& j, const std::string& key) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
  return out;
}

int covariate_index(const Manifest& m, const std::string& name) {
  for (std::size_t j = 0; j < m.missing_covariates.size(); ++j) {
    if (m.missing_covariates[j] == name) return static_cast<int>(j);
  }
  for (std::size_t j = 0; j < m.observed_covariates.size(); ++j) {
    if (m.observed_covariates[j] == name) {
      return static_cast<int>(m.missing_covariates.size() + j);
    }
  }
  throw std::invalid_argument("feature term references unknown covariate '" + name + "'");
}

}  // namespace

Manifest read_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError(path, 0, std::string("invalid JSON: ") + e.what());
  }
  Manifest m;
  try {
    m.weight_column = j.at("weight").get<std::string>();
    m.call_columns = string_list(j, "calls");
    m.outcome_column = j.at("outcome").get<std::string>();
    const std::string family = j.value("outcome_family", std::string("binary"));
    if (family == "binary") {
      m.outcome_family = OutcomeFamily::BinaryLogistic;
    } else if (family == "gaussian") {
      m.outcome_family = OutcomeFamily::GaussianLinear;
    } else {
      throw IoError(path, 0, "outcome_family must be 'binary' or 'gaussian'");
    }
    m.missing_covariates = string_list(j, "missing_covariates");
    m.observed_covariates = string_list(j, "observed_covariates");
    m.propensity_features = string_list(j, "propensity_features");
    m.outcome_features = string_list(j, "outcome_features");
    if (j.contains("odds_features")) m.odds_features = string_list(j, "odds_features");
    m.estimand_features = string_list(j, "estimand_features");
    m.design_distribution = j.value("design_distribution", std::string("empirical"));
    m.impute_unsure = j.value("impute_unsure", false);
    m.stochastic_impute = j.value("stochastic_impute", false);
  } catch (const json::exception& e) {
    throw IoError(path, 0, std::string("manifest: ") + e.what());
  }
  if (m.call_columns.size() < 2) throw IoError(path, 0, "need at least two call columns");
  if (m.propensity_features.empty()) {
    m.propensity_features = m.missing_covariates;
    m.propensity_features.insert(m.propensity_features.end(), m.observed_covariates.begin(),
                                 m.observed_covariates.end());
  }
  if (m.outcome_features.empty()) {
    m.outcome_features = m.missing_covariates;
    m.outcome_features.insert(m.outcome_features.end(), m.observed_covariates.begin(),
                              m.observed_covariates.end());
  }
  if (m.design_distribution != "empirical" && m.design_distribution != "uniform") {
    throw IoError(path, 0, "design_distribution must be 'empirical' or 'uniform'");
  }
  return m;
}

FeatureMap build_feature_map(const std::vector<std::string>& terms, const Manifest& manifest,
                             std::vector<std::string>* names_out) {
  // Each term is a column or a:b product; intercept first.
  std::vector<std::vector<int>> products;
  std::vector<std::string> names = {"intercept"};
  for (const auto& term : terms) {
    std::vector<int> cols;
    std::string part;
    std::istringstream ss(term);
    while (std::getline(ss, part, ':')) cols.push_back(covariate_index(manifest, part));
    if (cols.empty()) throw std::invalid_argument("empty feature term");
    products.push_back(cols);
    names.push_back(term);
  }
  if (names_out != nullptr) *names_out = names;
  const int dim = static_cast<int>(products.size()) + 1;
  return FeatureMap(dim, [products, dim](const Vector& x) {
    Vector v(dim);
    v(0) = 1.0;
    for (std::size_t k = 0; k < products.size(); ++k) {
      double prod = 1.0;
      for (int c : products[k]) prod *= x(c);
      v(static_cast<int>(k) + 1) = prod;
    }
    return v;
  });
}

OddsRatioDesign build_odds_design(const std::vector<std::string>& terms,
                                  const Manifest& manifest,
                                  std::vector<std::string>* names_out) {
  // Terms are "y" (the outcome alone) or "y:col" (outcome-by-covariate).
  std::vector<int> cols;  // -1 for the bare outcome
  std::vector<std::string> names;
  for (const auto& term : terms) {
    if (term == "y") {
      cols.push_back(-1);
      names.push_back("y");
      continue;
    }
    const auto pos = term.find(':');
    if (pos == std::string::npos || term.substr(0, pos) != "y") {
      throw std::invalid_argument("odds feature '" + term + "' must be 'y' or 'y:<column>'");
    }
    cols.push_back(covariate_index(manifest, term.substr(pos + 1)));
    names.push_back(term);
  }
  if (cols.empty()) throw std::invalid_argument("odds-ratio design needs at least one term");
  if (names_out != nullptr) *names_out = names;
  const int dim = static_cast<int>(cols.size());
  FeatureMap slope(dim, [cols, dim](const Vector& x) {
    Vector v(dim);
    for (int k = 0; k < dim; ++k) v(k) = cols[k] < 0 ? 1.0 : x(cols[k]);
    return v;
  });
  return OddsRatioDesign::outcome_times(slope);
}

SurveyDataset read_survey_csv(const std::string& path, const Manifest& manifest,
                              std::uint64_t impute_seed) {
  const CsvTable t = read_csv(path);
  const int n = static_cast<int>(t.rows.size());
  if (n == 0) throw IoError(path, 0, "no data rows");
  const int K = static_cast<int>(manifest.call_columns.size());

  const int wcol = column_of(t, path, manifest.weight_column);
  const int ycol = column_of(t, path, manifest.outcome_column);
  std::vector<int> ccols, x1cols, x2cols;
  for (const auto& c : manifest.call_columns) ccols.push_back(column_of(t, path, c));
  for (const auto& c : manifest.missing_covariates) x1cols.push_back(column_of(t, path, c));
  for (const auto& c : manifest.observed_covariates) x2cols.push_back(column_of(t, path, c));

  SurveyDataset data;
  data.weight.resize(n);
  data.response.resize(n, K);
  data.outcome = Vector::Zero(n);
  data.x_missing = Matrix::Zero(n, static_cast<int>(x1cols.size()));
  data.x_observed = Matrix::Zero(n, static_cast<int>(x2cols.size()));
  data.names_missing = manifest.missing_covariates;
  data.names_observed = manifest.observed_covariates;

  std::vector<int> unsure;  // respondents with an empty outcome field
  for (int i = 0; i < n; ++i) {
    const int line = i + 2;
    const auto& row = t.rows[i];
    data.weight(i) = parse_number(path, line, row[wcol], manifest.weight_column);
    for (int k = 0; k < K; ++k) {
      const double r = parse_number(path, line, row[ccols[k]], manifest.call_columns[k]);
      if (r != 0.0 && r != 1.0) {
        throw IoError(path, line, "call indicator must be 0 or 1");
      }
      data.response(i, k) = static_cast<int>(r);
    }
    const bool responded = data.response(i, K - 1) == 1;
    const bool y_present = !row[ycol].empty();
    if (!responded && y_present) {
      throw IoError(path, line, "outcome present for a nonrespondent");
    }
    if (responded && !y_present) {
      if (!manifest.impute_unsure) {
        throw IoError(path, line,
                      "outcome missing for a respondent (set impute_unsure to fill it)");
      }
      unsure.push_back(i);
    }
    if (y_present) {
      data.outcome(i) = parse_number(path, line, row[ycol], manifest.outcome_column);
    }
    for (std::size_t j = 0; j < x1cols.size(); ++j) {
      const auto& cell = row[x1cols[j]];
      if (responded == cell.empty()) {
        throw IoError(path, line,
                      "co-missing covariate '" + manifest.missing_covariates[j] +
                          (responded ? "' missing for a respondent" : "' present for a nonrespondent"));
      }
      if (!cell.empty()) {
        data.x_missing(i, static_cast<int>(j)) =
            parse_number(path, line, cell, manifest.missing_covariates[j]);
      }
    }
    for (std::size_t j = 0; j < x2cols.size(); ++j) {
      const auto& cell = row[x2cols[j]];
      if (cell.empty()) {
        throw IoError(path, line, "design covariate '" + manifest.observed_covariates[j] +
                                      "' must always be present");
      }
      data.x_observed(i, static_cast<int>(j)) =
          parse_number(path, line, cell, manifest.observed_covariates[j]);
    }
  }

  if (!unsure.empty()) {
    // Fit the outcome on respondents with a reported outcome, then fill the
    // unsure respondents by thresholding the predicted probability at 0.5
    // (or drawing, with stochastic_impute).
    if (manifest.outcome_family != OutcomeFamily::BinaryLogistic) {
      throw IoError(path, 0, "impute_unsure supports only the binary outcome family");
    }
    std::vector<std::string> all_cols = manifest.missing_covariates;
    all_cols.insert(all_cols.end(), manifest.observed_covariates.begin(),
                    manifest.observed_covariates.end());
    const FeatureMap fmap = build_feature_map(all_cols, manifest);
    std::vector<int> fitted_rows;
    for (int i = 0; i < n; ++i) {
      if (data.response(i, K - 1) == 1 &&
          std::find(unsure.begin(), unsure.end(), i) == unsure.end()) {
        fitted_rows.push_back(i);
      }
    }
    Matrix design(static_cast<int>(fitted_rows.size()), fmap.dim());
    Vector yv(static_cast<int>(fitted_rows.size())), wv(static_cast<int>(fitted_rows.size()));
    for (std::size_t k = 0; k < fitted_rows.size(); ++k) {
      const int i = fitted_rows[k];
      design.row(static_cast<int>(k)) = fmap(data.covariate_row(i)).transpose();
      yv(static_cast<int>(k)) = data.outcome(i);
      wv(static_cast<int>(k)) = data.weight(i);
    }
    const GlmFit fit = fit_weighted_logistic(design, yv, wv);
    Rng rng(impute_seed);
    for (int i : unsure) {
      const double p = expit(fmap(data.covariate_row(i)).dot(fit.beta));
      const bool voted = manifest.stochastic_impute ? rng.bernoulli(p) : p >= 0.5;
      data.outcome(i) = voted ? 1.0 : 0.0;
    }
  }

  data.validate_and_normalize();
  return data;
}

CovariateDistribution read_census_csv(const std::string& path, const Manifest& manifest) {
  const CsvTable t = read_csv(path);
  if (manifest.missing_covariates.empty()) {
    throw IoError(path, 0, "manifest declares no co-missing covariates");
  }
  int mass_col = -1;
  bool is_count = false;
  for (std::size_t j = 0; j < t.header.size(); ++j) {
    if (t.header[j] == "mass") mass_col = static_cast<int>(j);
  }
  if (mass_col < 0) {
    for (std::size_t j = 0; j < t.header.size(); ++j) {
      if (t.header[j] == "count") {
        mass_col = static_cast<int>(j);
        is_count = true;
      }
    }
  }
  if (mass_col < 0) throw IoError(path, 1, "need a 'mass' or 'count' column");
  std::vector<int> xcols;
  for (const auto& c : manifest.missing_covariates) xcols.push_back(column_of(t, path, c));

  const int m = static_cast<int>(t.rows.size());
  if (m == 0) throw IoError(path, 0, "no support rows");
  CovariateDistribution dist;
  dist.support.resize(m, static_cast<int>(xcols.size()));
  dist.mass.resize(m);
  for (int i = 0; i < m; ++i) {
    const int line = i + 2;
    for (std::size_t j = 0; j < xcols.size(); ++j) {
      dist.support(i, static_cast<int>(j)) =
          parse_number(path, line, t.rows[i][xcols[j]], manifest.missing_covariates[j]);
    }
    dist.mass(i) = parse_number(path, line, t.rows[i][mass_col], "mass");
    if (dist.mass(i) < 0.0) throw IoError(path, line, "negative mass");
  }
  const double total = dist.mass.sum();
  if (!(total > 0.0)) throw IoError(path, 0, "masses sum to zero");
  if (is_count || std::abs(total - 1.0) > 1e-12) dist.mass /= total;
  dist.validate();
  return dist;
}

CovariateDistribution combined_distribution(const CovariateDistribution& census,
                                            const SurveyDataset& data,
                                            const Manifest& manifest) {
  if (manifest.observed_covariates.empty()) return census;
  CovariateDistribution x2 = empirical_observed_distribution(data);
  if (manifest.design_distribution == "uniform") {
    x2.mass.setConstant(1.0 / static_cast<double>(x2.size()));
  }
  return product_distribution(census, x2);
}

std::string study_json(const StudyReport& report) {
  json j;
  j["schema_version"] = 1;
  j["scenario"]["name"] = report.scenario.name;
  j["scenario"]["family"] =
      report.scenario.family == SimFamily::Binary ? "binary" : "continuous";
  j["scenario"]["n"] = report.scenario.n;
  j["scenario"]["replicates"] = report.scenario.replicates;
  j["scenario"]["seed"] = report.scenario.seed;
  j["scenario"]["delta"] = report.scenario.delta;
  j["scenario"]["gamma"] = report.scenario.gamma;
  j["theta_truth"] = report.theta_truth;
  j["gamma_truth"] = report.gamma_truth;
  json ests = json::object();
  for (const auto& name : report.estimators) {
    const EstimatorSummary& s = report.summary.at(name);
    json e;
    e["n_converged"] = s.n_converged;
    e["n_failed"] = s.n_failed;
    e["theta"] = {{"mean_bias", s.theta_mean_bias},
                  {"mc_sd", s.theta_mc_sd},
                  {"median_se", s.theta_median_se},
                  {"coverage", s.theta_coverage}};
    if (s.has_gamma) {
      e["gamma"] = {{"mean_bias", s.gamma_mean_bias},
                    {"mc_sd", s.gamma_mc_sd},
                    {"median_se", s.gamma_median_se},
                    {"coverage", s.gamma_coverage}};
    }
    ests[name] = e;
  }
  j["estimators"] = ests;
  return j.dump(2) + "\n";
}

}  // namespace sor
