#include "sor/equations.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "sor/stats.hpp"

namespace sor {

namespace {

constexpr double kPositivityEps = 1e-10;

using Array = Eigen::ArrayXd;

Array expit_array(const Vector& t) {
  return t.unaryExpr([](double v) { return expit(v); }).array();
}

// Parameter blocks with optional freezing.  A frozen block keeps its fixed
// value out of the parameter vector, and the builder drops the equations
// paired with it, keeping the system exactly identified.
class Blocks {
 public:
  explicit Blocks(std::map<std::string, Vector> frozen) : frozen_(std::move(frozen)) {}

  void declare(const std::string& name, int size) {
    auto it = frozen_.find(name);
    if (it != frozen_.end()) {
      if (it->second.size() != size) {
        throw std::invalid_argument("frozen block " + name + " has dimension " +
                                    std::to_string(it->second.size()) + ", expected " +
                                    std::to_string(size));
      }
      return;
    }
    layout_.add(name, size);
  }

  bool free(const std::string& name) const { return layout_.has(name); }
  int offset(const std::string& name) const { return layout_.slice(name).offset; }

  Vector get(const Vector& params, const std::string& name) const {
    auto it = frozen_.find(name);
    if (it != frozen_.end()) return it->second;
    return layout_.block(params, name);
  }

  const ParameterLayout& layout() const { return layout_; }

 private:
  std::map<std::string, Vector> frozen_;
  ParameterLayout layout_;
};

// Dataset- and design-dependent quantities precomputed once per build.  All
// feature maps are parameter-free, so only these matrices are touched per
// evaluation.
struct Prepared {
  int n_all = 0;
  Vector w_all;            // w_i / sum w over all units
  std::vector<int> orig;   // respondent row -> original unit index
  std::vector<char> nonresp;  // mask over all units
  int nr = 0;
  Vector w;                // respondent w_i / sum w
  Array r1;                // first-call indicator among respondents
  Array r2;                // cumulative call-2 indicator among respondents
  Array rlast;             // responded exactly at the final call
  Vector y;

  Matrix B1, B2;           // propensity baseline designs
  Matrix V1, V2;           // calibration features
  Vector EfV1, EfV2;
  Matrix U1;               // u(x_i, 1): odds features at y = 1 (= slope when linear)
  Matrix Uown;             // u(x_i, y_i)
  Matrix OD;               // outcome design
  Matrix Mf;               // estimand feature rows (ones for the mean estimand)
  Vector mass;             // support masses
  Matrix U1s, ODs, Mfs;    // support-side features

  // Final-call blocks (multicall systems).
  Matrix BK, UK1, UKown, ODK;
  Vector EfV3;
  Matrix V3;
  Matrix UK1s, ODKs;
};

struct PrepareNeeds {
  bool outcome = false;
  bool multicall = false;
};

Matrix feature_rows(const FeatureMap& f, const SurveyDataset& data,
                    const std::vector<int>& rows) {
  Matrix out(static_cast<int>(rows.size()), f.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<int>(i)) = f(data.covariate_row(rows[i])).transpose();
  }
  return out;
}

Matrix feature_support(const FeatureMap& f, const CovariateDistribution& dist) {
  Matrix out(dist.size(), f.dim());
  for (int j = 0; j < dist.size(); ++j) {
    out.row(j) = f(dist.support.row(j).transpose()).transpose();
  }
  return out;
}

// Rows of u(x, y) evaluated at y = 1.  Exact for the binary family; for the
// Gaussian family this is the tilt slope and requires linearity in y.
Matrix odds_at_one_rows(const OddsRatioDesign& odds, const SurveyDataset& data,
                        const std::vector<int>& rows) {
  Matrix out(static_cast<int>(rows.size()), odds.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<int>(i)) = odds.eval(data.covariate_row(rows[i]), 1.0).transpose();
  }
  return out;
}

Matrix odds_at_one_support(const OddsRatioDesign& odds, const CovariateDistribution& dist) {
  Matrix out(dist.size(), odds.dim);
  for (int j = 0; j < dist.size(); ++j) {
    out.row(j) = odds.eval(dist.support.row(j).transpose(), 1.0).transpose();
  }
  return out;
}

void require_tiltable(const OddsRatioDesign& odds, const OutcomeModel& outcome) {
  if (outcome.family == OutcomeFamily::GaussianLinear && !odds.linear_in_y) {
    throw std::invalid_argument(
        "Gaussian-family estimating equations require an odds-ratio design linear in y");
  }
}

Prepared prepare(const SurveyDataset& data, const PropensityModel* pm,
                 const OutcomeModel* outcome, const EstimandSpec& spec,
                 const CovariateDistribution* dist, const SystemOptions& opts,
                 const PrepareNeeds& needs) {
  Prepared p;
  const int n = data.n();
  const int K = data.calls();
  p.n_all = n;
  p.w_all = data.weight / static_cast<double>(n);
  p.nonresp.assign(n, 0);

  // Two-call systems use units observed by call 2; multicall systems use all
  // respondents (whose covariates and outcome are observed by construction).
  const int resp_call = needs.multicall ? K - 1 : 1;
  for (int i = 0; i < n; ++i) {
    if (data.response(i, resp_call) == 1) {
      p.orig.push_back(i);
    }
    if (!data.observed(i)) p.nonresp[i] = 1;
  }
  p.nr = static_cast<int>(p.orig.size());
  if (p.nr == 0) throw std::invalid_argument("no respondents by the calls used");

  p.w.resize(p.nr);
  p.r1.resize(p.nr);
  p.r2.resize(p.nr);
  p.rlast.resize(p.nr);
  p.y.resize(p.nr);
  for (int i = 0; i < p.nr; ++i) {
    const int o = p.orig[i];
    p.w(i) = p.w_all(o);
    p.r1(i) = data.response(o, 0);
    p.r2(i) = data.response(o, 1);
    p.rlast(i) = data.response(o, K - 1) - (K >= 2 ? data.response(o, K - 2) : 0);
    p.y(i) = data.outcome(o);
  }

  if (pm != nullptr) {
    if (pm->baseline.size() < 2) {
      throw std::invalid_argument("propensity model must cover the first two calls");
    }
    p.B1 = feature_rows(pm->baseline[0], data, p.orig);
    p.B2 = feature_rows(pm->baseline[1], data, p.orig);
    const FeatureMap& v1 = opts.V1 ? *opts.V1 : pm->baseline[0];
    const FeatureMap& v2 = opts.V2 ? *opts.V2 : pm->baseline[1];
    if (v1.dim() != pm->baseline[0].dim() || v2.dim() != pm->baseline[1].dim()) {
      throw std::invalid_argument("calibration features must match the baseline dimensions");
    }
    p.V1 = feature_rows(v1, data, p.orig);
    p.V2 = feature_rows(v2, data, p.orig);
    p.U1 = odds_at_one_rows(pm->odds, data, p.orig);
    p.Uown.resize(p.nr, pm->odds.dim);
    for (int i = 0; i < p.nr; ++i) {
      p.Uown.row(i) = pm->odds.eval(data.covariate_row(p.orig[i]), p.y(i)).transpose();
    }
    if (dist != nullptr) {
      p.EfV1 = population_expectation(*dist, [&](const Vector& x) { return v1(x); });
      p.EfV2 = population_expectation(*dist, [&](const Vector& x) { return v2(x); });
      p.U1s = odds_at_one_support(pm->odds, *dist);
    }
  }

  if (needs.outcome) {
    if (outcome == nullptr) throw std::invalid_argument("outcome model required");
    p.OD = feature_rows(outcome->design, data, p.orig);
    if (dist != nullptr) p.ODs = feature_support(outcome->design, *dist);
  }

  if (spec.kind == EstimandSpec::Kind::Mean) {
    p.Mf = Matrix::Ones(p.nr, 1);
    if (dist != nullptr) p.Mfs = Matrix::Ones(dist->size(), 1);
  } else {
    p.Mf = feature_rows(spec.regressor, data, p.orig);
    if (dist != nullptr) p.Mfs = feature_support(spec.regressor, *dist);
  }
  if (dist != nullptr) p.mass = dist->mass;

  return p;
}

// Accumulates the residual and (optionally) the scaled per-unit contribution
// rows.  Column sums of the rows reproduce the residual.
struct Assembler {
  Vector& g;
  Matrix* rows;
  const Prepared& prep;

  // Unit terms phi_i for respondents, packed as an nr x len matrix; the
  // respondent weight is applied here.
  void add_units(int off, const Matrix& phi) {
    const int len = static_cast<int>(phi.cols());
    g.segment(off, len) += phi.transpose() * prep.w;
    if (rows != nullptr) {
      for (int i = 0; i < prep.nr; ++i) {
        rows->row(prep.orig[i]).segment(off, len) += prep.w(i) * phi.row(i);
      }
    }
  }

  // A term constant across units (population-expectation terms); each unit
  // carries its weight share so centering in the sandwich B is exact.
  void add_constant(int off, const Vector& k) {
    g.segment(off, k.size()) += k;
    if (rows != nullptr) {
      rows->block(0, off, prep.n_all, k.size()) += prep.w_all * k.transpose();
    }
  }

  // A term carried only by nonrespondents (imputation-style estimators).
  void add_nonrespondent_constant(int off, const Vector& k) {
    double share = 0.0;
    for (int i = 0; i < prep.n_all; ++i) {
      if (prep.nonresp[i]) share += prep.w_all(i);
    }
    g.segment(off, k.size()) += share * k;
    if (rows != nullptr) {
      for (int i = 0; i < prep.n_all; ++i) {
        if (prep.nonresp[i]) rows->block(i, off, 1, k.size()) += prep.w_all(i) * k.transpose();
      }
    }
  }
};

void check_positivity(const Array& pi, const Prepared& prep, int call) {
  for (int i = 0; i < pi.size(); ++i) {
    if (!(pi(i) > kPositivityEps) || !(pi(i) < 1.0 - kPositivityEps)) {
      throw PositivityError(prep.orig[i], call, pi(i));
    }
  }
}

// U(x, y) represented by its values at y in {0, 1} (binary family) or by an
// affine-in-y decomposition (Gaussian family): U = C + y S rowwise, evaluated
// on respondents and on the distribution support.
struct AffineU {
  int dim = 0;
  Matrix C, S, own;  // respondent rows
  Matrix Cs, Ss;     // support rows
};

AffineU affine_from_odds(const PropensityModel& pm, const Prepared& prep, bool with_support) {
  AffineU u;
  u.dim = pm.odds.dim;
  u.C = Matrix::Zero(prep.nr, u.dim);  // u(x, 0) = 0 by the reference normalization
  u.S = prep.U1;
  u.own = prep.Uown;
  if (with_support) {
    u.Cs = Matrix::Zero(prep.U1s.rows(), u.dim);
    u.Ss = prep.U1s;
  }
  return u;
}

AffineU affine_from_ufunction(const UFunction& fn, const SurveyDataset& data,
                              const Prepared& prep, const CovariateDistribution* dist,
                              const OutcomeModel* outcome) {
  const bool binary =
      outcome == nullptr || outcome->family == OutcomeFamily::BinaryLogistic;
  if (!fn.affine_in_y && !binary) {
    throw std::invalid_argument(
        "Gaussian-family estimating equations require U functions affine in y");
  }
  AffineU u;
  u.dim = fn.dim;
  u.C.resize(prep.nr, fn.dim);
  u.S.resize(prep.nr, fn.dim);
  u.own.resize(prep.nr, fn.dim);
  for (int i = 0; i < prep.nr; ++i) {
    const Vector x = data.covariate_row(prep.orig[i]);
    const Vector at0 = fn.eval(x, 0.0);
    const Vector at1 = fn.eval(x, 1.0);
    u.C.row(i) = at0.transpose();
    u.S.row(i) = (at1 - at0).transpose();
    u.own.row(i) = fn.eval(x, prep.y(i)).transpose();
  }
  if (dist != nullptr) {
    u.Cs.resize(dist->size(), fn.dim);
    u.Ss.resize(dist->size(), fn.dim);
    for (int j = 0; j < dist->size(); ++j) {
      const Vector x = dist->support.row(j).transpose();
      const Vector at0 = fn.eval(x, 0.0);
      u.Cs.row(j) = at0.transpose();
      u.Ss.row(j) = (fn.eval(x, 1.0) - at0).transpose();
    }
  }
  return u;
}

// Outcome-law state at the current parameters: fitted means and their
// exponential tilt toward nonrespondents, on respondents and on the support.
struct OutcomeState {
  Array g_y, h_y;    // respondent-level E(Y|x) and tilted E(Y|x, nonresp)
  Array g_ys, h_ys;  // support-level
  Array lp;          // respondent linear predictor
  double sigma2 = 1.0;
};

OutcomeState outcome_state(const Prepared& prep, const OutcomeModel& outcome,
                           const Vector& beta, double log_sigma2, const Vector& gamma_tilt,
                           bool with_support) {
  OutcomeState s;
  s.lp = (prep.OD * beta).array();
  const Array tilt = (prep.U1 * gamma_tilt).array();
  if (outcome.family == OutcomeFamily::BinaryLogistic) {
    s.g_y = expit_array(prep.OD * beta);
    s.h_y = expit_array(((s.lp - tilt).matrix()));
  } else {
    s.sigma2 = std::exp(log_sigma2);
    s.g_y = s.lp;
    s.h_y = s.lp - tilt * s.sigma2;
  }
  if (with_support) {
    const Array lps = (prep.ODs * beta).array();
    const Array tilts = (prep.U1s * gamma_tilt).array();
    if (outcome.family == OutcomeFamily::BinaryLogistic) {
      s.g_ys = expit_array(prep.ODs * beta);
      s.h_ys = expit_array(((lps - tilts).matrix()));
    } else {
      s.g_ys = lps;
      s.h_ys = lps - tilts * s.sigma2;
    }
  }
  return s;
}

// m(x, y; theta) = Mf_i * (y - fit_i); the estimand fit on respondents.
Array estimand_fit(const Prepared& prep, const EstimandSpec& spec, const Vector& theta) {
  if (spec.kind == EstimandSpec::Kind::Mean) {
    return Array::Constant(prep.nr, theta(0));
  }
  return expit_array(prep.Mf * theta);
}

Array estimand_fit_support(const Prepared& prep, const EstimandSpec& spec,
                           const Vector& theta) {
  if (spec.kind == EstimandSpec::Kind::Mean) {
    return Array::Constant(prep.mass.size(), theta(0));
  }
  return expit_array(prep.Mfs * theta);
}

Matrix colwise_scale(const Matrix& m, const Array& a) {
  return (m.array().colwise() * a).matrix();
}

// E_f of rows scaled by a support-level array: sum_j mass_j a_j rows_j.
Vector support_mean(const Prepared& prep, const Matrix& rows, const Array& a) {
  return rows.transpose() * (prep.mass.array() * a).matrix();
}

void declare_outcome_blocks(Blocks& blocks, const OutcomeModel& outcome,
                            const std::string& beta_name, const std::string& ls_name) {
  blocks.declare(beta_name, outcome.design.dim());
  if (outcome.family == OutcomeFamily::GaussianLinear) blocks.declare(ls_name, 1);
}

// Adds the outcome log-likelihood score rows, weighted by `coef` (which
// already selects the relevant respondents).
void add_outcome_score(Assembler& asmb, const Blocks& blocks, const Prepared& prep,
                       const OutcomeModel& outcome, const OutcomeState& st, const Array& coef,
                       const std::string& beta_name, const std::string& ls_name) {
  if (outcome.family == OutcomeFamily::BinaryLogistic) {
    if (blocks.free(beta_name)) {
      asmb.add_units(blocks.offset(beta_name),
                     colwise_scale(prep.OD, coef * (prep.y.array() - st.g_y)));
    }
    return;
  }
  const Array resid = prep.y.array() - st.lp;
  if (blocks.free(beta_name)) {
    asmb.add_units(blocks.offset(beta_name),
                   colwise_scale(prep.OD, coef * resid / st.sigma2));
  }
  if (blocks.free(ls_name)) {
    const Array score_ls = 0.5 * (resid.square() / st.sigma2 - 1.0);
    asmb.add_units(blocks.offset(ls_name), Matrix((coef * score_ls).matrix()));
  }
}

Vector second_call_gamma(const Vector& gamma, double delta) {
  if (gamma.size() == 0) return gamma;
  Vector g2 = gamma;
  g2(0) += delta;
  return g2;
}

}  // namespace

EquationSystem build_ipw(const SurveyDataset& data, const PropensityModel& pm,
                         const EstimandSpec& spec, const CovariateDistribution& dist,
                         const SystemOptions& opts) {
  dist.validate();
  PrepareNeeds needs;
  auto prep = std::make_shared<Prepared>(prepare(data, &pm, nullptr, spec, &dist, opts, needs));
  auto u5 = std::make_shared<AffineU>(
      opts.U ? affine_from_ufunction(*opts.U, data, *prep, nullptr, nullptr)
             : affine_from_odds(pm, *prep, false));
  if (u5->dim != pm.odds.dim) {
    throw std::invalid_argument("U override must match the odds-ratio dimension");
  }

  Blocks blocks(opts.frozen);
  blocks.declare("alpha1", pm.baseline[0].dim());
  blocks.declare("alpha2", pm.baseline[1].dim());
  blocks.declare("gamma", pm.odds.dim);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;

  auto eval = [prep, u5, blocks, spec, delta](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector a1 = blocks.get(params, "alpha1");
    const Vector a2 = blocks.get(params, "alpha2");
    const Vector gam = blocks.get(params, "gamma");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    const Array pi2 = expit_array(prep->B2 * a2 + prep->Uown * gam2);
    check_positivity(pi1, *prep, 0);
    check_positivity(pi2, *prep, 1);

    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), colwise_scale(prep->V1, prep->r1 / pi1));
      asmb.add_constant(blocks.offset("alpha1"), -prep->EfV1);
    }
    if (blocks.free("alpha2")) {
      const Array coef = (1.0 - prep->r1) / pi2 + prep->r1;
      asmb.add_units(blocks.offset("alpha2"), colwise_scale(prep->V2, coef));
      asmb.add_constant(blocks.offset("alpha2"), -prep->EfV2);
    }
    if (blocks.free("gamma")) {
      const Array coef = (1.0 - prep->r1) / pi2 - prep->r1 * (1.0 - pi1) / pi1;
      asmb.add_units(blocks.offset("gamma"), colwise_scale(u5->own, coef));
    }
    if (blocks.free("theta")) {
      const Array fit = estimand_fit(*prep, spec, theta);
      const Array p2cum = pi1 + pi2 * (1.0 - pi1);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, (prep->y.array() - fit) / p2cum));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

EquationSystem build_reg(const SurveyDataset& data, const PropensityModel& pm,
                         const OutcomeModel& outcome, const EstimandSpec& spec,
                         const CovariateDistribution& dist, const SystemOptions& opts) {
  dist.validate();
  require_tiltable(pm.odds, outcome);
  PrepareNeeds needs;
  needs.outcome = true;
  auto prep =
      std::make_shared<Prepared>(prepare(data, &pm, &outcome, spec, &dist, opts, needs));

  // Default U for the calibration equation: the stacked score directions
  // (V1(x), u(x, y)); an override must keep the (alpha1, gamma) row order.
  const int d1 = pm.baseline[0].dim();
  const int dg = pm.odds.dim;
  std::shared_ptr<AffineU> u8;
  if (opts.U) {
    if (opts.U->dim != d1 + dg) {
      throw std::invalid_argument("U override for the imputation system must have dimension " +
                                  std::to_string(d1 + dg));
    }
    u8 = std::make_shared<AffineU>(affine_from_ufunction(*opts.U, data, *prep, &dist, &outcome));
  } else {
    auto def = std::make_shared<AffineU>();
    def->dim = d1 + dg;
    const auto odds_part = affine_from_odds(pm, *prep, true);
    def->C.resize(prep->nr, def->dim);
    def->C << prep->V1, odds_part.C;
    def->S.resize(prep->nr, def->dim);
    def->S << Matrix::Zero(prep->nr, d1), odds_part.S;
    def->own.resize(prep->nr, def->dim);
    def->own << prep->V1, odds_part.own;
    const int m = dist.size();
    const Matrix v1s = feature_support(opts.V1 ? *opts.V1 : pm.baseline[0], dist);
    def->Cs.resize(m, def->dim);
    def->Cs << v1s, odds_part.Cs;
    def->Ss.resize(m, def->dim);
    def->Ss << Matrix::Zero(m, d1), odds_part.Ss;
    u8 = std::move(def);
  }

  Blocks blocks(opts.frozen);
  declare_outcome_blocks(blocks, outcome, "beta", "log_sigma2");
  blocks.declare("alpha1", d1);
  blocks.declare("gamma", dg);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;
  const OutcomeModel oc = outcome;

  auto eval = [prep, u8, blocks, spec, oc, delta, d1, dg](const Vector& params, Vector& g,
                                                          Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector beta = blocks.get(params, "beta");
    const double ls = oc.family == OutcomeFamily::GaussianLinear
                          ? blocks.get(params, "log_sigma2")(0)
                          : 0.0;
    const Vector a1 = blocks.get(params, "alpha1");
    const Vector gam = blocks.get(params, "gamma");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    for (int i = 0; i < prep->nr; ++i) {
      if (prep->r1(i) > 0.5 && (!(pi1(i) > kPositivityEps) || !(pi1(i) < 1.0 - kPositivityEps))) {
        throw PositivityError(prep->orig[i], 0, pi1(i));
      }
    }
    const OutcomeState st = outcome_state(*prep, oc, beta, ls, gam2, true);

    // Second-call-only outcome score.
    add_outcome_score(asmb, blocks, *prep, oc, st, (prep->r2 - prep->r1), "beta", "log_sigma2");

    // Imputed-U calibration: {r1/pi1 - r2} U + r2 h_U vs E_f h_U.
    const Array coef_u = prep->r1 / pi1 - prep->r2;
    const Matrix h_u = u8->C + (u8->S.array().colwise() * st.h_y).matrix();
    const Matrix phi8 = colwise_scale(u8->own, coef_u) +
                        (h_u.array().colwise() * prep->r2).matrix();
    const Vector ef_hu = u8->Cs.transpose() * prep->mass + support_mean(*prep, u8->Ss, st.h_ys);
    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), phi8.leftCols(d1));
      asmb.add_constant(blocks.offset("alpha1"), -ef_hu.head(d1));
    }
    if (blocks.free("gamma")) {
      asmb.add_units(blocks.offset("gamma"), phi8.rightCols(dg));
      asmb.add_constant(blocks.offset("gamma"), -ef_hu.tail(dg));
    }

    if (blocks.free("theta")) {
      const Array fit_s = estimand_fit_support(*prep, spec, theta);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, prep->r2 * (prep->y.array() - st.h_y)));
      asmb.add_constant(blocks.offset("theta"),
                        support_mean(*prep, prep->Mfs, st.h_ys - fit_s));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

EquationSystem build_dr(const SurveyDataset& data, const PropensityModel& pm,
                        const OutcomeModel& outcome, const EstimandSpec& spec,
                        const CovariateDistribution& dist, const SystemOptions& opts) {
  dist.validate();
  require_tiltable(pm.odds, outcome);
  PrepareNeeds needs;
  needs.outcome = true;
  auto prep =
      std::make_shared<Prepared>(prepare(data, &pm, &outcome, spec, &dist, opts, needs));
  auto u13 = std::make_shared<AffineU>(
      opts.U ? affine_from_ufunction(*opts.U, data, *prep, nullptr, &outcome)
             : affine_from_odds(pm, *prep, false));
  if (u13->dim != pm.odds.dim) {
    throw std::invalid_argument("U override must match the odds-ratio dimension");
  }

  Blocks blocks(opts.frozen);
  blocks.declare("alpha1", pm.baseline[0].dim());
  blocks.declare("alpha2", pm.baseline[1].dim());
  declare_outcome_blocks(blocks, outcome, "beta", "log_sigma2");
  blocks.declare("gamma", pm.odds.dim);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;
  const OutcomeModel oc = outcome;

  auto eval = [prep, u13, blocks, spec, oc, delta](const Vector& params, Vector& g,
                                                   Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector a1 = blocks.get(params, "alpha1");
    const Vector a2 = blocks.get(params, "alpha2");
    const Vector beta = blocks.get(params, "beta");
    const double ls = oc.family == OutcomeFamily::GaussianLinear
                          ? blocks.get(params, "log_sigma2")(0)
                          : 0.0;
    const Vector gam = blocks.get(params, "gamma");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    const Array pi2 = expit_array(prep->B2 * a2 + prep->Uown * gam2);
    check_positivity(pi1, *prep, 0);
    check_positivity(pi2, *prep, 1);
    const OutcomeState st = outcome_state(*prep, oc, beta, ls, gam2, true);

    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), colwise_scale(prep->V1, prep->r1 / pi1));
      asmb.add_constant(blocks.offset("alpha1"), -prep->EfV1);
    }
    if (blocks.free("alpha2")) {
      const Array coef = (1.0 - prep->r1) / pi2 + prep->r1;
      asmb.add_units(blocks.offset("alpha2"), colwise_scale(prep->V2, coef));
      asmb.add_constant(blocks.offset("alpha2"), -prep->EfV2);
    }
    add_outcome_score(asmb, blocks, *prep, oc, st, (prep->r2 - prep->r1), "beta", "log_sigma2");

    if (blocks.free("gamma")) {
      const Array coef = prep->r1 - (pi1 / (1.0 - pi1)) * ((1.0 - prep->r1) / pi2);
      const Matrix g_u = u13->C + (u13->S.array().colwise() * st.g_y).matrix();
      asmb.add_units(blocks.offset("gamma"),
                     colwise_scale(Matrix(u13->own - g_u), coef));
    }
    if (blocks.free("theta")) {
      const Array coef = prep->r1 + (1.0 - prep->r1) / pi2;
      const Array fit_s = estimand_fit_support(*prep, spec, theta);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, coef * (prep->y.array() - st.h_y)));
      asmb.add_constant(blocks.offset("theta"),
                        support_mean(*prep, prep->Mfs, st.h_ys - fit_s));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

EquationSystem build_mar(const SurveyDataset& data, const PropensityModel& pm,
                         const EstimandSpec& spec, const CovariateDistribution& dist,
                         const SystemOptions& options) {
  SystemOptions opts = options;
  opts.frozen["gamma"] = Vector::Zero(pm.odds.dim);
  return build_ipw(data, pm, spec, dist, opts);
}

EquationSystem build_cc(const SurveyDataset& data, const EstimandSpec& spec) {
  SystemOptions opts;
  PrepareNeeds needs;
  needs.multicall = true;  // respondents through the final call
  auto prep =
      std::make_shared<Prepared>(prepare(data, nullptr, nullptr, spec, nullptr, opts, needs));
  Blocks blocks({});
  blocks.declare("theta", spec.dim());

  auto eval = [prep, blocks, spec](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};
    const Vector theta = blocks.get(params, "theta");
    const Array fit = estimand_fit(*prep, spec, theta);
    asmb.add_units(0, colwise_scale(prep->Mf, prep->y.array() - fit));
  };
  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

EquationSystem build_cor(const SurveyDataset& data, const EstimandSpec& spec) {
  SystemOptions opts;
  PrepareNeeds needs;
  needs.multicall = true;
  auto prep =
      std::make_shared<Prepared>(prepare(data, nullptr, nullptr, spec, nullptr, opts, needs));
  if ((prep->rlast > 0.5).count() == 0) {
    throw std::invalid_argument("no final-call respondents for the continuum-of-resistance proxy");
  }
  Blocks blocks({});
  const int dt = spec.dim();
  blocks.declare("nu", dt);
  blocks.declare("theta", dt);

  auto eval = [prep, blocks, spec, dt](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};
    const Vector nu = blocks.get(params, "nu");
    const Vector theta = blocks.get(params, "theta");
    const Array fit = estimand_fit(*prep, spec, theta);
    const Matrix m = colwise_scale(prep->Mf, prep->y.array() - fit);
    // nu is the last-call weighted mean of m.
    asmb.add_units(blocks.offset("nu"),
                   colwise_scale(Matrix(m.rowwise() - nu.transpose()), prep->rlast));
    asmb.add_units(blocks.offset("theta"), m);
    asmb.add_nonrespondent_constant(blocks.offset("theta"), nu);
  };
  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

CorxSystem build_corx(const SurveyDataset& data, const EstimandSpec& spec,
                      const OutcomeModel& outcome_last, const CovariateDistribution& dist) {
  dist.validate();
  SystemOptions opts;
  PrepareNeeds needs;
  needs.multicall = true;
  needs.outcome = true;
  auto prep = std::make_shared<Prepared>(
      prepare(data, nullptr, &outcome_last, spec, &dist, opts, needs));

  // Nonrespondent covariate law: f(X) minus the weighted respondent law,
  // clipped at zero and renormalized.
  CorxSystem out;
  Vector resp_mass = Vector::Zero(dist.size());
  double unmatched = 0.0;
  double resp_share = 0.0;
  for (int i = 0; i < prep->nr; ++i) {
    const Vector x = data.covariate_row(prep->orig[i]);
    resp_share += prep->w(i);
    bool matched = false;
    for (int j = 0; j < dist.size(); ++j) {
      if ((dist.support.row(j).transpose() - x).lpNorm<Eigen::Infinity>() == 0.0) {
        resp_mass(j) += prep->w(i);
        matched = true;
        break;
      }
    }
    if (!matched) unmatched += prep->w(i);
  }
  const double nr_share = 1.0 - resp_share;
  if (!(nr_share > 0.0)) {
    throw std::invalid_argument("no nonrespondents; the covariate-adjusted proxy is undefined");
  }
  Vector nr_mass(dist.size());
  int clipped = 0;
  for (int j = 0; j < dist.size(); ++j) {
    const double v = (dist.mass(j) - resp_mass(j)) / nr_share;
    if (v < 0.0) {
      ++clipped;
      nr_mass(j) = 0.0;
    } else {
      nr_mass(j) = v;
    }
  }
  nr_mass /= nr_mass.sum();
  out.clipped_cells = clipped;
  out.unmatched_weight = unmatched;
  out.nonrespondent.support = dist.support;
  out.nonrespondent.mass = nr_mass;

  Blocks blocks({});
  declare_outcome_blocks(blocks, outcome_last, "beta_last", "log_sigma2_last");
  blocks.declare("theta", spec.dim());
  const OutcomeModel oc = outcome_last;
  auto nr_mass_ptr = std::make_shared<Vector>(nr_mass);

  auto eval = [prep, blocks, spec, oc, nr_mass_ptr](const Vector& params, Vector& g,
                                                    Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};
    const Vector beta = blocks.get(params, "beta_last");
    const double ls = oc.family == OutcomeFamily::GaussianLinear
                          ? blocks.get(params, "log_sigma2_last")(0)
                          : 0.0;
    const Vector theta = blocks.get(params, "theta");
    OutcomeState st;  // untilted fit of the last-call outcome model
    st.lp = (prep->OD * beta).array();
    st.sigma2 = std::exp(ls);
    st.g_y = oc.family == OutcomeFamily::BinaryLogistic ? expit_array(prep->OD * beta)
                                                        : Array(st.lp);
    add_outcome_score(asmb, blocks, *prep, oc, st, prep->rlast, "beta_last", "log_sigma2_last");

    const Array fit = estimand_fit(*prep, spec, theta);
    asmb.add_units(blocks.offset("theta"), colwise_scale(prep->Mf, prep->y.array() - fit));
    // Imputed estimand mean over the nonrespondent covariate law.
    const Array fit_s = estimand_fit_support(*prep, spec, theta);
    Array mean_s;
    if (oc.family == OutcomeFamily::BinaryLogistic) {
      mean_s = expit_array(prep->ODs * beta);
    } else {
      mean_s = (prep->ODs * beta).array();
    }
    const Vector k = prep->Mfs.transpose() * (nr_mass_ptr->array() * (mean_s - fit_s)).matrix();
    asmb.add_nonrespondent_constant(blocks.offset("theta"), k);
  };

  out.system = EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
  return out;
}

namespace {

struct PcCells {
  double p3, p4, p5, p6, rem;
};

PcCells pc_cells(const SurveyDataset& data) {
  const int K = data.calls();
  PcCells c{0, 0, 0, 0, 0};
  double total = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const double w = data.weight(i);
    total += w;
    const bool first = data.response(i, 0) == 1;
    const bool last = data.response(i, K - 1) == 1;
    if (!last) continue;
    const double y = data.outcome(i);
    if (y != 0.0 && y != 1.0) {
      throw std::invalid_argument("parameter-counting estimator requires a binary outcome");
    }
    if (first) {
      (y == 1.0 ? c.p6 : c.p5) += w;
    } else {
      (y == 1.0 ? c.p4 : c.p3) += w;
    }
  }
  c.p3 /= total;
  c.p4 /= total;
  c.p5 /= total;
  c.p6 /= total;
  c.rem = 1.0 - c.p3 - c.p4 - c.p5 - c.p6;
  return c;
}

// Equal-odds-ratio constraint in cross-multiplied form.
double pc_constraint(double p1, const PcCells& c) {
  const double p2 = c.rem - p1;
  return c.p6 * (p1 + c.p3) * p2 * c.p3 - c.p4 * p1 * c.p5 * (p2 + c.p4);
}

}  // namespace

PcSolution pc_point_estimate(const SurveyDataset& data) {
  const PcCells c = pc_cells(data);
  if (!(c.p3 > 0.0 && c.p4 > 0.0 && c.p5 > 0.0 && c.p6 > 0.0 && c.rem > 0.0)) {
    throw std::runtime_error(
        "parameter-counting identification failed: a response/outcome cell is empty");
  }
  double lo = 0.0, hi = c.rem;
  double flo = pc_constraint(lo, c);
  double fhi = pc_constraint(hi, c);
  if (!(flo > 0.0) || !(fhi < 0.0)) {
    throw std::runtime_error(
        "parameter-counting identification failed: no sign change over the p1 bracket");
  }
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const double fmid = pc_constraint(mid, c);
    if (fmid > 0.0) {
      lo = mid;
      flo = fmid;
    } else {
      hi = mid;
      fhi = fmid;
    }
    if (hi - lo < 1e-16 * c.rem) break;
  }
  PcSolution s;
  s.p[0] = 0.5 * (lo + hi);
  s.p[1] = c.rem - s.p[0];
  s.p[2] = c.p3;
  s.p[3] = c.p4;
  s.p[4] = c.p5;
  s.p[5] = c.p6;
  s.theta = s.p[1] + s.p[3] + s.p[5];
  return s;
}

EquationSystem build_pc(const SurveyDataset& data) {
  const int n = data.n();
  const int K = data.calls();
  Vector w_all = data.weight / static_cast<double>(n);
  // Cell indicators per unit: columns (p3, p4, p5, p6).
  Matrix ind = Matrix::Zero(n, 4);
  for (int i = 0; i < n; ++i) {
    if (data.response(i, K - 1) != 1) continue;
    const bool first = data.response(i, 0) == 1;
    const bool voted = data.outcome(i) == 1.0;
    const int col = first ? (voted ? 3 : 2) : (voted ? 1 : 0);
    ind(i, col) = 1.0;
  }

  ParameterLayout layout;
  layout.add("p3", 1);
  layout.add("p4", 1);
  layout.add("p5", 1);
  layout.add("p6", 1);
  layout.add("p1", 1);
  layout.add("theta", 1);

  auto eval = [n, w_all, ind](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(6);
    if (rows != nullptr) rows->setZero(n, 6);
    PcCells c{params(0), params(1), params(2), params(3), 0.0};
    c.rem = 1.0 - c.p3 - c.p4 - c.p5 - c.p6;
    const double p1 = params(4);
    const double theta = params(5);
    for (int j = 0; j < 4; ++j) {
      g(j) = w_all.dot(ind.col(j)) - params(j);
      if (rows != nullptr) {
        rows->col(j) = w_all.array() * (ind.col(j).array() - params(j));
      }
    }
    g(4) = pc_constraint(p1, c);
    g(5) = (c.rem - p1) + c.p4 + c.p6 - theta;
    // The last two equations have no per-unit randomness of their own; their
    // variance flows through the Jacobian (delta method).
  };

  return EquationSystem(layout, n, std::move(eval));
}

EquationSystem build_multicall_ipw(const SurveyDataset& data, const PropensityModel& pm,
                                   const MulticallConfig& mc, const EstimandSpec& spec,
                                   const CovariateDistribution& dist,
                                   const SystemOptions& opts) {
  dist.validate();
  if (data.calls() < 3) throw std::invalid_argument("multicall systems require K >= 3");
  PrepareNeeds needs;
  needs.multicall = true;
  auto prep = std::make_shared<Prepared>(prepare(data, &pm, nullptr, spec, &dist, opts, needs));
  auto u5 = std::make_shared<AffineU>(affine_from_odds(pm, *prep, false));

  // Final-call designs.
  auto bk = std::make_shared<Matrix>(feature_rows(mc.baseline_K, data, prep->orig));
  auto ukown = std::make_shared<Matrix>(Matrix(prep->nr, mc.odds_K.dim));
  for (int i = 0; i < prep->nr; ++i) {
    ukown->row(i) = mc.odds_K.eval(data.covariate_row(prep->orig[i]), prep->y(i)).transpose();
  }
  const int daK = mc.baseline_K.dim();
  const int dgK = mc.odds_K.dim;
  std::shared_ptr<AffineU> wfn;
  if (mc.W) {
    if (mc.W->dim != daK + dgK) {
      throw std::invalid_argument("W must have dimension " + std::to_string(daK + dgK));
    }
    wfn = std::make_shared<AffineU>(affine_from_ufunction(*mc.W, data, *prep, nullptr, nullptr));
  } else {
    auto def = std::make_shared<AffineU>();
    def->dim = daK + dgK;
    def->own.resize(prep->nr, def->dim);
    def->own << *bk, *ukown;
    wfn = std::move(def);
  }

  Blocks blocks(opts.frozen);
  blocks.declare("alpha1", pm.baseline[0].dim());
  blocks.declare("alpha2", pm.baseline[1].dim());
  blocks.declare("gamma", pm.odds.dim);
  blocks.declare("alphaK", daK);
  blocks.declare("gammaK", dgK);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;

  auto eval = [prep, u5, bk, ukown, wfn, blocks, spec, delta, daK, dgK](
                  const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector a1 = blocks.get(params, "alpha1");
    const Vector a2 = blocks.get(params, "alpha2");
    const Vector gam = blocks.get(params, "gamma");
    const Vector aK = blocks.get(params, "alphaK");
    const Vector gK = blocks.get(params, "gammaK");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    const Array pi2 = expit_array(prep->B2 * a2 + prep->Uown * gam2);
    const Array piK = expit_array(*bk * aK + *ukown * gK);
    check_positivity(pi1, *prep, 0);
    check_positivity(pi2, *prep, 1);
    check_positivity(piK, *prep, 2);
    const Array p2 = pi1 + pi2 * (1.0 - pi1);
    const Array pK = p2 + (1.0 - p2) * piK;

    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), colwise_scale(prep->V1, prep->r1 / pi1));
      asmb.add_constant(blocks.offset("alpha1"), -prep->EfV1);
    }
    if (blocks.free("alpha2")) {
      const Array coef = (prep->r2 - prep->r1) / pi2 + prep->r1;
      asmb.add_units(blocks.offset("alpha2"), colwise_scale(prep->V2, coef));
      asmb.add_constant(blocks.offset("alpha2"), -prep->EfV2);
    }
    if (blocks.free("gamma")) {
      const Array coef = (prep->r2 - prep->r1) / pi2 - prep->r1 * (1.0 - pi1) / pi1;
      asmb.add_units(blocks.offset("gamma"), colwise_scale(u5->own, coef));
    }
    const Array coefW = (1.0 - prep->r2) / piK - prep->r2 * (1.0 - p2) / p2;
    if (blocks.free("alphaK")) {
      asmb.add_units(blocks.offset("alphaK"),
                     colwise_scale(wfn->own.leftCols(daK), coefW));
    }
    if (blocks.free("gammaK")) {
      asmb.add_units(blocks.offset("gammaK"),
                     colwise_scale(wfn->own.rightCols(dgK), coefW));
    }
    if (blocks.free("theta")) {
      const Array fit = estimand_fit(*prep, spec, theta);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, (prep->y.array() - fit) / pK));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

namespace {

// Final-call outcome tilting state under (beta_K, gamma_K).
struct KState {
  Array h_yK;   // respondent-level tilted mean
  Array h_yKs;  // support-level
  Array lpK;
  Array g_yK;
  double sigma2 = 1.0;
};

KState k_state(const OutcomeModel& oc, const Matrix& ODK, const Matrix& UK1,
               const Matrix& ODKs, const Matrix& UK1s, const Vector& betaK, double lsK,
               const Vector& gK) {
  KState s;
  s.lpK = (ODK * betaK).array();
  const Array tilt = (UK1 * gK).array();
  if (oc.family == OutcomeFamily::BinaryLogistic) {
    s.g_yK = expit_array(ODK * betaK);
    s.h_yK = expit_array((s.lpK - tilt).matrix());
  } else {
    s.sigma2 = std::exp(lsK);
    s.g_yK = s.lpK;
    s.h_yK = s.lpK - tilt * s.sigma2;
  }
  const Array lps = (ODKs * betaK).array();
  const Array tilts = (UK1s * gK).array();
  if (oc.family == OutcomeFamily::BinaryLogistic) {
    s.h_yKs = expit_array((lps - tilts).matrix());
  } else {
    s.h_yKs = lps - tilts * s.sigma2;
  }
  return s;
}

void add_k_outcome_score(Assembler& asmb, const Blocks& blocks, const Prepared& prep,
                         const OutcomeModel& oc, const Matrix& ODK, const KState& st,
                         const Array& coef) {
  if (oc.family == OutcomeFamily::BinaryLogistic) {
    if (blocks.free("betaK")) {
      asmb.add_units(blocks.offset("betaK"),
                     colwise_scale(ODK, coef * (prep.y.array() - st.g_yK)));
    }
    return;
  }
  const Array resid = prep.y.array() - st.lpK;
  if (blocks.free("betaK")) {
    asmb.add_units(blocks.offset("betaK"), colwise_scale(ODK, coef * resid / st.sigma2));
  }
  if (blocks.free("log_sigma2K")) {
    const Array score_ls = 0.5 * (resid.square() / st.sigma2 - 1.0);
    asmb.add_units(blocks.offset("log_sigma2K"), Matrix((coef * score_ls).matrix()));
  }
}

}  // namespace

EquationSystem build_multicall_reg(const SurveyDataset& data, const PropensityModel& pm,
                                   const OutcomeModel& outcome, const MulticallConfig& mc,
                                   const EstimandSpec& spec, const CovariateDistribution& dist,
                                   const SystemOptions& opts) {
  dist.validate();
  if (data.calls() < 3) throw std::invalid_argument("multicall systems require K >= 3");
  if (!mc.outcome_K) throw std::invalid_argument("multicall REG requires a final-call outcome model");
  require_tiltable(pm.odds, outcome);
  require_tiltable(mc.odds_K, *mc.outcome_K);
  PrepareNeeds needs;
  needs.outcome = true;
  needs.multicall = true;
  auto prep =
      std::make_shared<Prepared>(prepare(data, &pm, &outcome, spec, &dist, opts, needs));

  const int d1 = pm.baseline[0].dim();
  const int dg = pm.odds.dim;
  auto u8 = std::make_shared<AffineU>();
  {
    const auto odds_part = affine_from_odds(pm, *prep, true);
    u8->dim = d1 + dg;
    u8->C.resize(prep->nr, u8->dim);
    u8->C << prep->V1, odds_part.C;
    u8->S.resize(prep->nr, u8->dim);
    u8->S << Matrix::Zero(prep->nr, d1), odds_part.S;
    u8->own.resize(prep->nr, u8->dim);
    u8->own << prep->V1, odds_part.own;
    const Matrix v1s = feature_support(opts.V1 ? *opts.V1 : pm.baseline[0], dist);
    u8->Cs.resize(dist.size(), u8->dim);
    u8->Cs << v1s, odds_part.Cs;
    u8->Ss.resize(dist.size(), u8->dim);
    u8->Ss << Matrix::Zero(dist.size(), d1), odds_part.Ss;
  }

  const OutcomeModel ocK = *mc.outcome_K;
  auto odk = std::make_shared<Matrix>(feature_rows(ocK.design, data, prep->orig));
  auto odks = std::make_shared<Matrix>(feature_support(ocK.design, dist));
  auto uk1 = std::make_shared<Matrix>(odds_at_one_rows(mc.odds_K, data, prep->orig));
  auto uk1s = std::make_shared<Matrix>(odds_at_one_support(mc.odds_K, dist));
  const int dgK = mc.odds_K.dim;
  // W in the final-call calibration has the dimension of gamma_K; default is
  // the odds-K feature, W = u_K(x, y).
  auto ukown = std::make_shared<Matrix>(Matrix(prep->nr, dgK));
  for (int i = 0; i < prep->nr; ++i) {
    ukown->row(i) = mc.odds_K.eval(data.covariate_row(prep->orig[i]), prep->y(i)).transpose();
  }

  Blocks blocks(opts.frozen);
  declare_outcome_blocks(blocks, outcome, "beta", "log_sigma2");
  blocks.declare("alpha1", d1);
  blocks.declare("gamma", dg);
  declare_outcome_blocks(blocks, ocK, "betaK", "log_sigma2K");
  blocks.declare("gammaK", dgK);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;
  const OutcomeModel oc = outcome;

  auto eval = [prep, u8, odk, odks, uk1, uk1s, ukown, blocks, spec, oc, ocK, delta, d1, dg,
               dgK](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector beta = blocks.get(params, "beta");
    const double ls = oc.family == OutcomeFamily::GaussianLinear
                          ? blocks.get(params, "log_sigma2")(0)
                          : 0.0;
    const Vector a1 = blocks.get(params, "alpha1");
    const Vector gam = blocks.get(params, "gamma");
    const Vector betaK = blocks.get(params, "betaK");
    const double lsK = ocK.family == OutcomeFamily::GaussianLinear
                           ? blocks.get(params, "log_sigma2K")(0)
                           : 0.0;
    const Vector gK = blocks.get(params, "gammaK");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    for (int i = 0; i < prep->nr; ++i) {
      if (prep->r1(i) > 0.5 && (!(pi1(i) > kPositivityEps) || !(pi1(i) < 1.0 - kPositivityEps))) {
        throw PositivityError(prep->orig[i], 0, pi1(i));
      }
    }
    const OutcomeState st = outcome_state(*prep, oc, beta, ls, gam2, true);
    const KState stK = k_state(ocK, *odk, *uk1, *odks, *uk1s, betaK, lsK, gK);

    add_outcome_score(asmb, blocks, *prep, oc, st, (prep->r2 - prep->r1), "beta", "log_sigma2");

    const Array coef_u = prep->r1 / pi1 - prep->r2;
    const Matrix h_u = u8->C + (u8->S.array().colwise() * st.h_y).matrix();
    const Matrix phi8 = colwise_scale(u8->own, coef_u) +
                        (h_u.array().colwise() * prep->r2).matrix();
    const Vector ef_hu = u8->Cs.transpose() * prep->mass + support_mean(*prep, u8->Ss, st.h_ys);
    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), phi8.leftCols(d1));
      asmb.add_constant(blocks.offset("alpha1"), -ef_hu.head(d1));
    }
    if (blocks.free("gamma")) {
      asmb.add_units(blocks.offset("gamma"), phi8.rightCols(dg));
      asmb.add_constant(blocks.offset("gamma"), -ef_hu.tail(dg));
    }

    add_k_outcome_score(asmb, blocks, *prep, ocK, *odk, stK, (1.0 - prep->r2));

    if (blocks.free("gammaK")) {
      // {r1/pi1 - rK} W + rK h_{K,W} calibrated against E_f h_{K,W};
      // W = u_K so h_{K,W} = h_yK * uK1.
      const Array coefW = prep->r1 / pi1 - 1.0;
      const Matrix h_w = uk1->array().colwise() * stK.h_yK;
      asmb.add_units(blocks.offset("gammaK"), colwise_scale(*ukown, coefW) + h_w);
      asmb.add_constant(blocks.offset("gammaK"), -support_mean(*prep, *uk1s, stK.h_yKs));
    }
    if (blocks.free("theta")) {
      const Array fit_s = estimand_fit_support(*prep, spec, theta);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, prep->y.array() - stK.h_yK));
      asmb.add_constant(blocks.offset("theta"),
                        support_mean(*prep, prep->Mfs, stK.h_yKs - fit_s));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

EquationSystem build_multicall_dr(const SurveyDataset& data, const PropensityModel& pm,
                                  const OutcomeModel& outcome, const MulticallConfig& mc,
                                  const EstimandSpec& spec, const CovariateDistribution& dist,
                                  const SystemOptions& opts) {
  dist.validate();
  if (data.calls() < 3) throw std::invalid_argument("multicall systems require K >= 3");
  if (!mc.outcome_K) throw std::invalid_argument("multicall DR requires a final-call outcome model");
  require_tiltable(pm.odds, outcome);
  require_tiltable(mc.odds_K, *mc.outcome_K);
  PrepareNeeds needs;
  needs.outcome = true;
  needs.multicall = true;
  auto prep =
      std::make_shared<Prepared>(prepare(data, &pm, &outcome, spec, &dist, opts, needs));
  auto u13 = std::make_shared<AffineU>(affine_from_odds(pm, *prep, false));

  const OutcomeModel ocK = *mc.outcome_K;
  auto bk = std::make_shared<Matrix>(feature_rows(mc.baseline_K, data, prep->orig));
  const FeatureMap v3 = mc.V3 ? *mc.V3 : mc.baseline_K;
  if (v3.dim() != mc.baseline_K.dim()) {
    throw std::invalid_argument("V3 must match the final-call baseline dimension");
  }
  auto v3rows = std::make_shared<Matrix>(feature_rows(v3, data, prep->orig));
  auto odk = std::make_shared<Matrix>(feature_rows(ocK.design, data, prep->orig));
  auto odks = std::make_shared<Matrix>(feature_support(ocK.design, dist));
  auto uk1 = std::make_shared<Matrix>(odds_at_one_rows(mc.odds_K, data, prep->orig));
  auto uk1s = std::make_shared<Matrix>(odds_at_one_support(mc.odds_K, dist));
  auto ukown = std::make_shared<Matrix>(Matrix(prep->nr, mc.odds_K.dim));
  for (int i = 0; i < prep->nr; ++i) {
    ukown->row(i) = mc.odds_K.eval(data.covariate_row(prep->orig[i]), prep->y(i)).transpose();
  }
  const int daK = mc.baseline_K.dim();
  const int dgK = mc.odds_K.dim;

  Blocks blocks(opts.frozen);
  blocks.declare("alpha1", pm.baseline[0].dim());
  blocks.declare("alpha2", pm.baseline[1].dim());
  declare_outcome_blocks(blocks, outcome, "beta", "log_sigma2");
  blocks.declare("gamma", pm.odds.dim);
  declare_outcome_blocks(blocks, ocK, "betaK", "log_sigma2K");
  blocks.declare("alphaK", daK);
  blocks.declare("gammaK", dgK);
  blocks.declare("theta", spec.dim());
  const double delta = opts.delta;
  const OutcomeModel oc = outcome;

  auto eval = [prep, u13, bk, v3rows, odk, odks, uk1, uk1s, ukown, blocks, spec, oc, ocK,
               delta](const Vector& params, Vector& g, Matrix* rows) {
    g.setZero(blocks.layout().dim());
    if (rows != nullptr) rows->setZero(prep->n_all, blocks.layout().dim());
    Assembler asmb{g, rows, *prep};

    const Vector a1 = blocks.get(params, "alpha1");
    const Vector a2 = blocks.get(params, "alpha2");
    const Vector beta = blocks.get(params, "beta");
    const double ls = oc.family == OutcomeFamily::GaussianLinear
                          ? blocks.get(params, "log_sigma2")(0)
                          : 0.0;
    const Vector gam = blocks.get(params, "gamma");
    const Vector betaK = blocks.get(params, "betaK");
    const double lsK = ocK.family == OutcomeFamily::GaussianLinear
                           ? blocks.get(params, "log_sigma2K")(0)
                           : 0.0;
    const Vector aK = blocks.get(params, "alphaK");
    const Vector gK = blocks.get(params, "gammaK");
    const Vector theta = blocks.get(params, "theta");
    const Vector gam2 = second_call_gamma(gam, delta);

    const Array pi1 = expit_array(prep->B1 * a1 + prep->Uown * gam);
    const Array pi2 = expit_array(prep->B2 * a2 + prep->Uown * gam2);
    const Array piK = expit_array(*bk * aK + *ukown * gK);
    check_positivity(pi1, *prep, 0);
    check_positivity(pi2, *prep, 1);
    check_positivity(piK, *prep, 2);
    const OutcomeState st = outcome_state(*prep, oc, beta, ls, gam2, true);
    const KState stK = k_state(ocK, *odk, *uk1, *odks, *uk1s, betaK, lsK, gK);

    if (blocks.free("alpha1")) {
      asmb.add_units(blocks.offset("alpha1"), colwise_scale(prep->V1, prep->r1 / pi1));
      asmb.add_constant(blocks.offset("alpha1"), -prep->EfV1);
    }
    if (blocks.free("alpha2")) {
      const Array coef = (prep->r2 - prep->r1) / pi2 + prep->r1;
      asmb.add_units(blocks.offset("alpha2"), colwise_scale(prep->V2, coef));
      asmb.add_constant(blocks.offset("alpha2"), -prep->EfV2);
    }
    add_outcome_score(asmb, blocks, *prep, oc, st, (prep->r2 - prep->r1), "beta", "log_sigma2");
    if (blocks.free("gamma")) {
      const Array coef = prep->r1 - (pi1 / (1.0 - pi1)) * ((prep->r2 - prep->r1) / pi2);
      const Matrix g_u = u13->C + (u13->S.array().colwise() * st.g_y).matrix();
      asmb.add_units(blocks.offset("gamma"), colwise_scale(Matrix(u13->own - g_u), coef));
    }
    add_k_outcome_score(asmb, blocks, *prep, ocK, *odk, stK, (1.0 - prep->r2));

    const Array coefD = (1.0 - prep->r2) / piK + prep->r2 - prep->r1 / pi1;
    if (blocks.free("alphaK")) {
      asmb.add_units(blocks.offset("alphaK"), colwise_scale(*v3rows, coefD));
    }
    if (blocks.free("gammaK")) {
      const Matrix h_u = uk1->array().colwise() * stK.h_yK;
      asmb.add_units(blocks.offset("gammaK"),
                     colwise_scale(Matrix(*ukown - h_u), coefD));
    }
    if (blocks.free("theta")) {
      const Array coef = prep->r2 + (1.0 - prep->r2) / piK;
      const Array fit_s = estimand_fit_support(*prep, spec, theta);
      asmb.add_units(blocks.offset("theta"),
                     colwise_scale(prep->Mf, coef * (prep->y.array() - stK.h_yK)));
      asmb.add_constant(blocks.offset("theta"),
                        support_mean(*prep, prep->Mfs, stK.h_yKs - fit_s));
    }
  };

  return EquationSystem(blocks.layout(), prep->n_all, std::move(eval));
}

}  // namespace sor
