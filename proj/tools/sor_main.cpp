// Command-line front end: estimation on survey files, simulation studies,
// and sensitivity sweeps.  Exit codes: 0 success, 2 file/format/usage error,
// 3 solver non-convergence (the report is still written).

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sor/estimate.hpp"
#include "sor/io.hpp"
#include "sor/simulate.hpp"

namespace {

using nlohmann::json;

struct EstimateArgs {
  std::string data_path, census_path, manifest_path;
  std::string method = "dr";
  std::string estimand = "mean";
  double delta = 0.0;
  int calls = 2;
  std::uint64_t seed = 20210601;
  std::string out_path;
  bool bootstrap = false;
  int bootstrap_resamples = 200;
};

struct LoadedAnalysis {
  sor::Manifest manifest;
  sor::SurveyDataset data;
  sor::CovariateDistribution dist;
  sor::AnalysisModels models;
};

LoadedAnalysis load_analysis(const EstimateArgs& args) {
  LoadedAnalysis a;
  a.manifest = sor::read_manifest(args.manifest_path);
  a.data = sor::read_survey_csv(args.data_path, a.manifest, args.seed);
  const sor::CovariateDistribution census =
      sor::read_census_csv(args.census_path, a.manifest);
  a.dist = sor::combined_distribution(census, a.data, a.manifest);
  a.models = sor::analysis_models(a.manifest, a.data, args.estimand);
  return a;
}

void print_report(const sor::EstimationReport& rep) {
  std::printf("method: %s   converged: %s   max|g|: %.3g\n", rep.method.c_str(),
              rep.converged ? "yes" : "NO", rep.residual_norm);
  if (!rep.message.empty()) std::printf("note: %s\n", rep.message.c_str());
  std::printf("%-24s %12s %12s %24s\n", "parameter", "estimate", "se", "95% C.I.");
  for (const auto& p : rep.parameters) {
    std::printf("%-24s %12.4f %12.4f     (%9.4f, %9.4f)\n", p.name.c_str(), p.estimate, p.se,
                p.ci_lo, p.ci_hi);
  }
  if (rep.has_propensity_diagnostics) {
    std::printf("propensity range: call 1 [%.4g, %.4g], call 2 [%.4g, %.4g]\n", rep.min_pi1,
                rep.max_pi1, rep.min_pi2, rep.max_pi2);
  }
  if (rep.corx_clipped_cells > 0) {
    std::printf("corx: %d nonrespondent cells clipped at zero\n", rep.corx_clipped_cells);
  }
}

int cmd_estimate(const EstimateArgs& args) {
  LoadedAnalysis a = load_analysis(args);
  sor::EstimateOptions opts;
  opts.method = sor::parse_method(args.method);
  opts.delta = args.delta;
  opts.calls = args.calls;
  opts.seed = args.seed;
  opts.bootstrap = args.bootstrap;
  opts.bootstrap_resamples = args.bootstrap_resamples;
  const sor::EstimationReport rep = sor::run_estimation(a.data, a.dist, a.models, opts);
  print_report(rep);
  if (!args.out_path.empty()) {
    sor::write_file(args.out_path, sor::estimation_report_json(rep));
    std::printf("report written to %s\n", args.out_path.c_str());
  }
  return rep.converged ? 0 : 3;
}

struct SimulateArgs {
  std::string scenario = "TT";
  std::string family = "binary";
  int reps = 1000;
  int n = 5000;
  std::uint64_t seed = 20210601;
  int jobs = 0;
  std::string out_dir;
  std::vector<std::string> estimators = {"ipw", "reg", "dr"};
};

int cmd_simulate(const SimulateArgs& args) {
  sor::ScenarioSpec spec = args.family == "binary"
                               ? sor::ScenarioSpec::binary(args.scenario)
                               : sor::ScenarioSpec::continuous(args.scenario);
  spec.replicates = args.reps;
  spec.n = args.n;
  spec.seed = args.seed;
  sor::StudyOptions opts;
  opts.estimators = args.estimators;
  opts.jobs = args.jobs;
  const sor::StudyReport report = sor::run_study(spec, opts);

  std::printf("scenario %s (%s), n=%d, %d replicates, theta truth %.6f\n",
              spec.name.c_str(), args.family.c_str(), spec.n, spec.replicates,
              report.theta_truth);
  std::printf("%-10s %10s %10s %10s %10s %10s\n", "estimator", "bias", "mc sd", "med se",
              "cover(th)", "cover(ga)");
  for (const auto& est : report.estimators) {
    const auto& s = report.summary.at(est);
    if (s.has_gamma) {
      std::printf("%-10s %10.4f %10.4f %10.4f %10.3f %10.3f\n", est.c_str(), s.theta_mean_bias,
                  s.theta_mc_sd, s.theta_median_se, s.theta_coverage, s.gamma_coverage);
    } else {
      std::printf("%-10s %10.4f %10.4f %10.4f %10.3f %10s\n", est.c_str(), s.theta_mean_bias,
                  s.theta_mc_sd, s.theta_median_se, s.theta_coverage, "-");
    }
    if (s.n_failed > 0) std::printf("  (%d replicates failed to converge)\n", s.n_failed);
  }
  if (!args.out_dir.empty()) {
    const std::string stem = args.out_dir + "/study_" + spec.name + "_" + args.family;
    sor::write_file(stem + ".json", sor::study_json(report));
    sor::write_file(stem + ".csv", sor::study_csv(report));
    std::printf("wrote %s.json and %s.csv\n", stem.c_str(), stem.c_str());
  }
  return 0;
}

struct SensitivityArgs {
  EstimateArgs est;
  std::vector<double> grid;
};

int cmd_sensitivity(const SensitivityArgs& args) {
  if (args.grid.empty()) {
    std::fprintf(stderr, "sensitivity: the delta grid is empty\n");
    return 2;
  }
  LoadedAnalysis a = load_analysis(args.est);
  json out;
  out["schema_version"] = 1;
  out["method"] = args.est.method;
  json rows = json::array();
  std::printf("%-8s %10s %24s %10s %24s\n", "delta", "theta", "95% C.I.", "gamma1",
              "95% C.I.");
  int worst = 0;
  for (const double d : args.grid) {
    sor::EstimateOptions opts;
    opts.method = sor::parse_method(args.est.method);
    opts.delta = d;
    opts.seed = args.est.seed;
    const sor::EstimationReport rep = sor::run_estimation(a.data, a.dist, a.models, opts);
    json row;
    row["delta"] = d;
    row["converged"] = rep.converged;
    double th = 0, th_lo = 0, th_hi = 0, ga = 0, ga_lo = 0, ga_hi = 0;
    for (const auto& p : rep.parameters) {
      if (p.name == "theta") {
        th = p.estimate;
        th_lo = p.ci_lo;
        th_hi = p.ci_hi;
      }
      if (p.name == "gamma" || p.name == "gamma[0]") {
        ga = p.estimate;
        ga_lo = p.ci_lo;
        ga_hi = p.ci_hi;
      }
      json pj = {{"name", p.name}, {"estimate", p.estimate}, {"se", p.se},
                 {"ci_lo", p.ci_lo}, {"ci_hi", p.ci_hi}};
      row["parameters"].push_back(pj);
    }
    std::printf("%-8.2f %10.4f     (%8.4f, %8.4f) %10.4f     (%8.4f, %8.4f)%s\n", d, th, th_lo,
                th_hi, ga, ga_lo, ga_hi, rep.converged ? "" : "  [no convergence]");
    rows.push_back(row);
    if (!rep.converged) worst = 3;
  }
  out["grid"] = rows;
  if (!args.est.out_path.empty()) {
    sor::write_file(args.est.out_path, out.dump(2) + "\n");
    std::printf("report written to %s\n", args.est.out_path.c_str());
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survey nonresponse adjustment from callback data"};
  app.require_subcommand(1);

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate from a survey extract");
  est->add_option("--data", ea.data_path, "survey CSV")->required();
  est->add_option("--census", ea.census_path, "covariate distribution CSV")->required();
  est->add_option("--manifest", ea.manifest_path, "analysis manifest (JSON)")->required();
  est->add_option("--method", ea.method, "ipw|reg|dr|cc|mar|cor|corx|pc");
  est->add_option("--estimand", ea.estimand, "mean|logit");
  est->add_option("--delta", ea.delta, "fixed second-call odds-ratio offset");
  est->add_option("--calls", ea.calls, "2 = first two calls, K = use all callbacks");
  est->add_option("--seed", ea.seed, "seed for jitter/bootstrap/imputation");
  est->add_option("--out", ea.out_path, "write a JSON report");
  est->add_flag("--bootstrap", ea.bootstrap, "bootstrap cross-check of the standard errors");
  est->add_option("--bootstrap-resamples", ea.bootstrap_resamples, "bootstrap resamples");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run a Monte Carlo study");
  sim->add_option("--scenario", sa.scenario, "TT|FT|TF|FF")->required();
  sim->add_option("--family", sa.family, "binary|continuous");
  sim->add_option("--reps", sa.reps, "replicates");
  sim->add_option("--n", sa.n, "sample size per replicate");
  sim->add_option("--seed", sa.seed, "master seed");
  sim->add_option("--jobs", sa.jobs, "worker threads (0 = all cores)");
  sim->add_option("--out-dir", sa.out_dir, "directory for the JSON/CSV reports");
  sim->add_option("--estimators", sa.estimators,
                  "subset of ipw reg dr ipw_mar reg_mar dr_mar");

  SensitivityArgs xa;
  auto* sen = app.add_subcommand("sensitivity", "Sweep the odds-ratio offset delta");
  sen->add_option("--data", xa.est.data_path, "survey CSV")->required();
  sen->add_option("--census", xa.est.census_path, "covariate distribution CSV")->required();
  sen->add_option("--manifest", xa.est.manifest_path, "analysis manifest (JSON)")->required();
  sen->add_option("--method", xa.est.method, "ipw|reg|dr");
  sen->add_option("--estimand", xa.est.estimand, "mean|logit");
  sen->add_option("--grid", xa.grid, "delta values")->delimiter(',');
  sen->add_option("--seed", xa.est.seed, "seed");
  sen->add_option("--out", xa.est.out_path, "write a JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (est->parsed()) return cmd_estimate(ea);
    if (sim->parsed()) return cmd_simulate(sa);
    if (sen->parsed()) return cmd_sensitivity(xa);
  } catch (const sor::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}
