#include "nudge/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "nudge/compliance.hpp"
#include "nudge/csv.hpp"
#include "nudge/error.hpp"

namespace nudge {

namespace {

constexpr std::uint32_t kMonteCarloStream = 0x5EED1u;
constexpr std::uint32_t kOracleStream = 0x0AC1Eu;

std::mt19937_64 derived_stream(std::uint32_t tag, std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{tag,
                    static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

// Column roles in the synthetic covariate matrix: 0 is the intercept, score_col the score.
bool is_normal_column(std::size_t j, std::size_t score_col) { return j != 0 && j != score_col; }

std::vector<std::string> synthetic_names(std::size_t d, std::size_t score_col) {
  std::vector<std::string> names(d);
  for (std::size_t j = 0; j < d; ++j) {
    names[j] = j == 0 ? "(intercept)" : (j == score_col ? "score" : "x" + std::to_string(j));
  }
  return names;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

double BaselineFn::operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x, std::size_t score_col) const {
  if (kind == Kind::zero) return 0.0;
  const auto d = static_cast<std::size_t>(x.size());
  const double r = x[static_cast<Eigen::Index>(score_col)];
  auto column = [&](std::size_t j) -> std::optional<double> {
    if (j >= d || !is_normal_column(j, score_col)) return std::nullopt;
    return x[static_cast<Eigen::Index>(j)];
  };
  double value = 0.0;
  const auto x2 = column(2);
  const auto x3 = column(3);
  if (kind == Kind::smooth_nonlinear) {
    value += a * std::sin(std::numbers::pi * r);
    if (x2) value += b * *x2 * *x2;
  } else {
    value += a * r;
    if (x2) value += b * *x2;
  }
  if (x3) value += c * *x3;
  return value;
}

std::string to_string(BaselineFn::Kind kind) {
  switch (kind) {
    case BaselineFn::Kind::smooth_nonlinear: return "smooth_nonlinear";
    case BaselineFn::Kind::affine: return "affine";
    case BaselineFn::Kind::zero: return "zero";
  }
  return "zero";
}

BaselineFn::Kind parse_baseline_kind(const std::string& name) {
  if (name == "smooth_nonlinear") return BaselineFn::Kind::smooth_nonlinear;
  if (name == "affine") return BaselineFn::Kind::affine;
  if (name == "zero") return BaselineFn::Kind::zero;
  throw Error(ErrorCode::InvalidConfig, "unknown baseline '" + name + "' (smooth_nonlinear, affine, zero)");
}

Vector DgpConfig::default_gamma() {
  Vector g(7);
  g << -6.35, -32.31, -10.65, 11.19, -2.59, 62.03, -3.40;
  return g;
}

void DgpConfig::validate() const {
  if (d() < 2) throw Error(ErrorCode::InvalidConfig, "the DGP needs d >= 2 (intercept and score)");
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "the DGP needs n >= 1");
  if (score_column() == 0 || score_column() >= d()) {
    throw Error(ErrorCode::InvalidConfig, "score column must be in 1..d-1 (column 0 is the intercept)");
  }
  if (!gamma_true.allFinite()) throw Error(ErrorCode::InvalidConfig, "gamma must be finite");
  if (!(noise_var >= 0.0) || !std::isfinite(noise_var)) throw Error(ErrorCode::InvalidConfig, "noise_var must be >= 0");
  if (!std::isfinite(class_shift)) throw Error(ErrorCode::InvalidConfig, "class_shift must be finite");
  Vector grid = Vector::LinSpaced(1001, 0.0, 1.0);
  (void)compliance_curves(grid, curves);
}

Matrix generate_covariates(const DgpConfig& config, std::mt19937_64& rng) {
  config.validate();
  const auto n = static_cast<Eigen::Index>(config.n);
  const auto d = static_cast<Eigen::Index>(config.d());
  const auto score_col = config.score_column();
  Matrix x(n, d);
  x.col(0).setOnes();

  std::vector<double> ranks(config.n);
  for (std::size_t i = 0; i < config.n; ++i) ranks[i] = static_cast<double>(i + 1) / static_cast<double>(config.n + 1);
  std::shuffle(ranks.begin(), ranks.end(), rng);
  x.col(static_cast<Eigen::Index>(score_col)) = Eigen::Map<const Vector>(ranks.data(), n);

  std::normal_distribution<double> normal;
  for (Eigen::Index j = 1; j < d; ++j) {
    if (!is_normal_column(static_cast<std::size_t>(j), score_col)) continue;
    for (Eigen::Index i = 0; i < n; ++i) x(i, j) = normal(rng);
    const double mean = x.col(j).mean();
    x.col(j).array() -= mean;
    const double sd = std::sqrt(x.col(j).squaredNorm() / static_cast<double>(n));
    if (sd > 0.0) x.col(j) /= sd;
  }
  return x;
}

ComplianceProbabilities compliance_curves(const Vector& score, const CurveParams& params) {
  ComplianceProbabilities p;
  const auto n = score.size();
  p.p_at.resize(n);
  p.p_nt.resize(n);
  p.p_c.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = score[i];
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorCode::DomainViolation, "scores must lie in [0, 1]");
    const double at = params.a * std::exp(-params.b * (1.0 - r)) + params.floor;
    const double nt = params.a * std::exp(-params.b * r) + params.floor;
    const double c = 1.0 - at - nt;
    if (!(c > 0.0) || at < 0.0 || nt < 0.0 || at > 1.0 || nt > 1.0) {
      throw Error(ErrorCode::InvalidCurve, "compliance curves leave no complier mass at score " + csv::format_double(r));
    }
    p.p_at[i] = at;
    p.p_nt[i] = nt;
    p.p_c[i] = c;
  }
  return p;
}

SimulatedStudy generate_dataset(const DgpConfig& config, const Matrix& x, const NudgePropensity& e_z,
                                std::mt19937_64& rng) {
  config.validate();
  if (static_cast<std::size_t>(x.cols()) != config.d()) throw Error(ErrorCode::DimensionMismatch, "covariates vs gamma");
  if (static_cast<Eigen::Index>(e_z.size()) != x.rows()) throw Error(ErrorCode::LengthMismatch, "e_z vs covariates");
  const auto n = x.rows();
  const std::size_t score_col = config.score_column();

  SimulatedStudy study;
  study.e_z = e_z;
  study.true_probs = compliance_curves(x.col(static_cast<Eigen::Index>(score_col)), config.curves);
  study.classes.resize(static_cast<std::size_t>(n));
  auto& data = study.data;
  data.x = x;
  data.z.resize(n);
  data.w.resize(n);
  data.y = Vector(n);
  data.score_col = score_col;
  data.column_names = synthetic_names(config.d(), score_col);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal;
  const double noise_sd = std::sqrt(config.noise_var);
  const Vector effect = x * config.gamma_true;
  for (Eigen::Index i = 0; i < n; ++i) {
    // Fixed per-row draw order keeps rows aligned across designs sharing a stream.
    const double u_z = unif(rng);
    const double u_class = unif(rng);
    const double eps = normal(rng);
    const int z = u_z < e_z[static_cast<std::size_t>(i)] ? 1 : 0;
    ComplianceClass cls = ComplianceClass::always_taker;
    if (u_class < study.true_probs.p_nt[i]) {
      cls = ComplianceClass::never_taker;
    } else if (u_class < study.true_probs.p_nt[i] + study.true_probs.p_c[i]) {
      cls = ComplianceClass::complier;
    }
    const int w = cls == ComplianceClass::always_taker ? 1 : (cls == ComplianceClass::complier ? z : 0);
    double shift = 0.0;
    if (cls == ComplianceClass::always_taker) shift = config.class_shift;
    if (cls == ComplianceClass::never_taker) shift = -config.class_shift;
    data.z[i] = z;
    data.w[i] = w;
    (*data.y)[i] = config.baseline(x.row(i), score_col) + w * effect[i] + shift + noise_sd * eps;
    study.classes[static_cast<std::size_t>(i)] = cls;
  }
  return study;
}

SimulatedStudy generate_dataset(const DgpConfig& config, const NudgePropensity& e_z, std::mt19937_64& rng) {
  const Matrix x = generate_covariates(config, rng);
  return generate_dataset(config, x, e_z, rng);
}

Vector true_m_star(const DgpConfig& config, const EncouragementDataset& data, const NudgePropensity& e_z) {
  const std::size_t score_col = config.score_column();
  if (data.cols() != config.d()) throw Error(ErrorCode::DimensionMismatch, "covariates vs gamma");
  if (e_z.size() != data.rows()) throw Error(ErrorCode::LengthMismatch, "e_z vs data");
  const auto probs = compliance_curves(data.x.col(static_cast<Eigen::Index>(score_col)), config.curves);
  const Vector e_w = induced_treatment_propensity(probs, e_z);
  const Vector effect = data.x * config.gamma_true;
  const double s = config.class_shift;
  Vector out(data.x.rows());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double at = probs.p_at[i], nt = probs.p_nt[i], c = probs.p_c[i];
    double cell_shift = 0.0;
    if (data.z[i] == 0) {
      cell_shift = data.w[i] == 1 ? s : -s * nt / (nt + c);
    } else {
      cell_shift = data.w[i] == 1 ? s * at / (at + c) : -s;
    }
    out[i] = config.baseline(data.x.row(i), score_col) + e_w[i] * effect[i] + cell_shift;
  }
  return out;
}

Nuisances OracleNuisances::fit_predict(const EncouragementDataset&, const EncouragementDataset& target,
                                       const NudgePropensity& target_e_z) const {
  Nuisances out;
  out.probs = compliance_curves(target.x.col(static_cast<Eigen::Index>(config_.score_column())), config_.curves);
  out.m_star = true_m_star(config_, target, target_e_z);
  return out;
}

LateOracle true_late(const DgpConfig& config, std::size_t n_oracle, std::uint64_t seed) {
  config.validate();
  if (n_oracle < 2) throw Error(ErrorCode::DomainViolation, "oracle needs at least two rows");
  const std::size_t d = config.d();
  const std::size_t score_col = config.score_column();
  std::vector<std::size_t> normals;
  for (std::size_t j = 1; j < d; ++j) {
    if (is_normal_column(j, score_col)) normals.push_back(j);
  }
  const auto draw_rows = [&](auto&& visit) {
    auto rng = derived_stream(kOracleStream, seed, n_oracle);
    std::normal_distribution<double> normal;
    std::vector<double> row(normals.size());
    for (std::size_t i = 0; i < n_oracle; ++i) {
      for (auto& v : row) v = normal(rng);
      visit(i, row);
    }
  };

  // Pass 1: column moments for the standardization.
  std::vector<long double> sum(normals.size(), 0.0L), sumsq(normals.size(), 0.0L);
  draw_rows([&](std::size_t, const std::vector<double>& row) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      sum[k] += row[k];
      sumsq[k] += static_cast<long double>(row[k]) * row[k];
    }
  });
  const auto nn = static_cast<long double>(n_oracle);
  std::vector<double> mean(normals.size()), sd(normals.size());
  for (std::size_t k = 0; k < normals.size(); ++k) {
    mean[k] = static_cast<double>(sum[k] / nn);
    const long double var = sumsq[k] / nn - (sum[k] / nn) * (sum[k] / nn);
    sd[k] = var > 0.0L ? static_cast<double>(std::sqrt(var)) : 1.0;
  }

  // Pass 2: complier-weighted mean of X'gamma.
  long double s_p = 0.0L, s_pv = 0.0L, s_p2 = 0.0L, s_p2v = 0.0L, s_p2v2 = 0.0L;
  const CurveParams& cp = config.curves;
  draw_rows([&](std::size_t i, const std::vector<double>& row) {
    const double r = static_cast<double>(i + 1) / static_cast<double>(n_oracle + 1);
    double v = config.gamma_true[0] + config.gamma_true[static_cast<Eigen::Index>(score_col)] * r;
    for (std::size_t k = 0; k < normals.size(); ++k) {
      v += config.gamma_true[static_cast<Eigen::Index>(normals[k])] * (row[k] - mean[k]) / sd[k];
    }
    const double p = 1.0 - (cp.a * std::exp(-cp.b * (1.0 - r)) + cp.floor) - (cp.a * std::exp(-cp.b * r) + cp.floor);
    s_p += p;
    s_pv += p * v;
    s_p2 += static_cast<long double>(p) * p;
    s_p2v += static_cast<long double>(p) * p * v;
    s_p2v2 += static_cast<long double>(p) * p * v * v;
  });
  LateOracle out;
  const long double ratio = s_pv / s_p;
  const long double resid = s_p2v2 - 2.0L * ratio * s_p2v + ratio * ratio * s_p2;
  out.value = static_cast<double>(ratio);
  out.mc_se = static_cast<double>(std::sqrt(std::max(resid, 0.0L)) / s_p);
  return out;
}

std::string to_string(DesignStrategy::Kind kind) {
  switch (kind) {
    case DesignStrategy::Kind::rct: return "rct";
    case DesignStrategy::Kind::optimal: return "optimal";
    case DesignStrategy::Kind::rdd: return "rdd";
  }
  return "optimal";
}

DesignStrategy::Kind parse_strategy_kind(const std::string& name) {
  if (name == "rct") return DesignStrategy::Kind::rct;
  if (name == "optimal") return DesignStrategy::Kind::optimal;
  if (name == "rdd") return DesignStrategy::Kind::rdd;
  throw Error(ErrorCode::InvalidConfig, "unknown design kind '" + name + "' (rct, optimal, rdd)");
}

StrategyOutcome apply_strategy(const DesignStrategy& strategy, const Matrix& x, const ComplianceProbabilities& probs,
                               std::size_t score_col, const SolverOptions& solver) {
  const Vector score = x.col(static_cast<Eigen::Index>(score_col));
  const DesignProblem prob = DesignProblem::from_cohort(x, probs);
  StrategyOutcome out;
  switch (strategy.kind) {
    case DesignStrategy::Kind::rct: {
      double e = strategy.rct_propensity;
      if (strategy.budget) {
        e = (*strategy.budget - probs.p_at.mean()) / probs.p_c.mean();
        if (e < -1e-12 || e > 1.0 + 1e-12) {
          throw Error(ErrorCode::Infeasible, "no constant nudge propensity meets the budget");
        }
      }
      out.e_z = NudgePropensity::constant(probs.size(), std::clamp(e, 0.0, 1.0));
      break;
    }
    case DesignStrategy::Kind::rdd:
      if (!strategy.budget) throw Error(ErrorCode::InvalidConfig, "rdd design '" + strategy.name + "' needs a budget");
      out.e_z = rdd_design(score, *strategy.budget, probs);
      break;
    case DesignStrategy::Kind::optimal: {
      ConstraintSet cons;
      cons.budget = strategy.budget;
      cons.monotone_in_score = strategy.monotone;
      if (strategy.gain_rho) cons.gain = GainConstraint{*strategy.gain_rho, std::nullopt};
      cons.score = score;
      DesignSolution sol = solve(prob, cons, solver);
      out.objective = sol.objective;
      out.e_z = std::move(sol.e_z_star);
      return out;
    }
  }
  try {
    out.objective = evaluate_objective(out.e_z.values(), prob, 0.0, false).value;
  } catch (const Error&) {
    out.objective = std::numeric_limits<double>::infinity();
  }
  return out;
}

MonteCarloConfig MonteCarloConfig::defaults() {
  MonteCarloConfig c;
  c.n_grid = {1000};
  c.pilot_compliance.recipe = FeatureRecipe::Kind::score_spline;
  c.estimator.nuisance.compliance.recipe = FeatureRecipe::Kind::score_spline;
  // m* divides by p_C; a floor below the DGP's smallest true p_C (about 0.095)
  // keeps boundary fit noise from being amplified without biasing the truth.
  c.pilot_compliance.clip_epsilon = 0.05;
  c.estimator.nuisance.compliance.clip_epsilon = 0.05;
  c.estimator.nuisance.outcome.basis = FeatureRecipe::Kind::flexible;
  c.estimator.nuisance.outcome.design = OutcomeDesign::cell_saturated;
  return c;
}

void MonteCarloConfig::validate() const {
  dgp.validate();
  if (designs.empty()) throw Error(ErrorCode::InvalidConfig, "simulation needs at least one design");
  std::set<std::string> names;
  for (const auto& d : designs) {
    if (d.name.empty() || !names.insert(d.name).second) {
      throw Error(ErrorCode::InvalidConfig, "design names must be nonempty and unique ('" + d.name + "')");
    }
    if (d.kind == DesignStrategy::Kind::rdd && !d.budget) {
      throw Error(ErrorCode::InvalidConfig, "rdd design '" + d.name + "' needs a budget");
    }
    if (d.budget && !(*d.budget >= 0.0 && *d.budget <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "budget of '" + d.name + "' must lie in [0, 1]");
    }
    if (d.gain_rho && !(*d.gain_rho >= 0.0 && *d.gain_rho <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "gain_rho of '" + d.name + "' must lie in [0, 1]");
    }
    if (!(d.rct_propensity >= 0.0 && d.rct_propensity <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "rct_propensity of '" + d.name + "' must lie in [0, 1]");
    }
  }
  if (n_grid.empty()) throw Error(ErrorCode::InvalidConfig, "n_grid is empty");
  for (std::size_t n : n_grid) {
    if (n < 50) throw Error(ErrorCode::InvalidConfig, "every n in n_grid must be at least 50");
  }
  if (replications < 2) throw Error(ErrorCode::InvalidConfig, "replications must be at least 2");
  if (!(pilot_fraction > 0.0 && pilot_fraction < 1.0)) throw Error(ErrorCode::InvalidConfig, "pilot_fraction in (0, 1)");
  if (!(pilot_propensity > 0.0 && pilot_propensity < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "pilot_propensity in (0, 1)");
  }
  if (n_oracle < 1000) throw Error(ErrorCode::InvalidConfig, "n_oracle must be at least 1000");
}

const CellSummary& SimulationReport::cell(const std::string& design, std::size_t n) const {
  for (const auto& c : cells) {
    if (c.design == design && c.n == n) return c;
  }
  throw Error(ErrorCode::DomainViolation, "no cell for design '" + design + "' at n=" + std::to_string(n));
}

SimulationReport run_monte_carlo(const MonteCarloConfig& config) {
  config.validate();
  SimulationReport report;
  report.truth = true_late(config.dgp, config.n_oracle, config.seed);

  struct Slot {
    bool ok = false;
    std::string reason;
    double estimate = 0.0;
    double objective = 0.0;
    double ratio = 0.0;
  };
  const std::size_t designs = config.designs.size();
  const std::size_t grid = config.n_grid.size();
  const std::size_t reps = config.replications;
  std::vector<Slot> slots(designs * grid * reps);
  auto slot = [&](std::size_t d, std::size_t k, std::size_t r) -> Slot& { return slots[(d * grid + k) * reps + r]; };

  auto run_task = [&](std::size_t k, std::size_t r) {
    auto rng = derived_stream(kMonteCarloStream, config.seed, k, r);
    DgpConfig dgp = config.dgp;
    dgp.n = config.n_grid[k];
    const std::size_t score_col = dgp.score_column();
    const Matrix x = generate_covariates(dgp, rng);

    std::vector<std::size_t> perm(dgp.n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n_pilot = static_cast<std::size_t>(std::lround(config.pilot_fraction * static_cast<double>(dgp.n)));
    Matrix x_pilot(static_cast<Eigen::Index>(n_pilot), x.cols());
    Matrix x_main(static_cast<Eigen::Index>(dgp.n - n_pilot), x.cols());
    for (std::size_t i = 0; i < dgp.n; ++i) {
      if (i < n_pilot) {
        x_pilot.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
      } else {
        x_main.row(static_cast<Eigen::Index>(i - n_pilot)) = x.row(static_cast<Eigen::Index>(perm[i]));
      }
    }
    const NudgePropensity pilot_e = NudgePropensity::constant(n_pilot, config.pilot_propensity);
    const SimulatedStudy pilot = generate_dataset(dgp, x_pilot, pilot_e, rng);
    const std::uint64_t main_seed = rng();

    std::optional<ComplianceProbabilities> probs;
    double unconstrained = std::numeric_limits<double>::quiet_NaN();
    try {
      probs = predict_probs(fit_compliance(pilot.data, config.pilot_compliance), x_main);
      const DesignProblem prob = DesignProblem::from_cohort(x_main, *probs);
      unconstrained = objective(closed_form_unconstrained(*probs), prob);
    } catch (const Error& e) {
      if (!probs) {  // every design fails for this replication
        for (std::size_t d = 0; d < designs; ++d) slot(d, k, r).reason = std::string(to_string(e.code()));
        return;
      }
    }

    for (std::size_t d = 0; d < designs; ++d) {
      Slot& s = slot(d, k, r);
      try {
        const StrategyOutcome design = apply_strategy(config.designs[d], x_main, *probs, score_col);
        std::mt19937_64 main_rng(main_seed);
        const SimulatedStudy main = generate_dataset(dgp, x_main, design.e_z, main_rng);
        const EncouragementDataset merged = merge(pilot.data, main.data);
        Vector e_merged(static_cast<Eigen::Index>(merged.rows()));
        e_merged << pilot_e.values(), design.e_z.values();
        s.estimate = estimate_tau(merged, NudgePropensity(std::move(e_merged)), config.estimator);
        s.objective = design.objective;
        s.ratio = design.objective / unconstrained;
        s.ok = std::isfinite(s.estimate);
      } catch (const Error& e) {
        s.ok = false;
        s.reason = std::string(to_string(e.code()));
      }
    }
  };

  const std::size_t tasks = grid * reps;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks; t = next++) {
      try {
        run_task(t / reps, t % reps);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  unsigned threads = config.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : config.threads;
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(tasks)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  const double tau = report.truth.value;
  for (std::size_t d = 0; d < designs; ++d) {
    for (std::size_t k = 0; k < grid; ++k) {
      CellSummary c;
      c.design = config.designs[d].name;
      c.n = config.n_grid[k];
      double obj_sum = 0.0, ratio_sum = 0.0;
      for (std::size_t r = 0; r < reps; ++r) {
        const Slot& s = slot(d, k, r);
        if (!s.ok) {
          ++c.failures;
          ++c.failure_reasons[s.reason.empty() ? "NonFinite" : s.reason];
          continue;
        }
        c.estimates.push_back(s.estimate);
        obj_sum += s.objective;
        ratio_sum += s.ratio;
      }
      c.replications = reps;
      c.completed = c.estimates.size();
      if (c.completed > 0) {
        const double m = static_cast<double>(c.completed);
        c.mean = std::accumulate(c.estimates.begin(), c.estimates.end(), 0.0) / m;
        c.bias = c.mean - tau;
        double ss = 0.0;
        for (double e : c.estimates) ss += (e - c.mean) * (e - c.mean);
        c.variance = ss / m;
        c.mse = c.variance + c.bias * c.bias;
        c.mean_objective = obj_sum / m;
        c.mean_objective_ratio = ratio_sum / m;
      }
      report.cells.push_back(std::move(c));
    }
  }
  return report;
}

std::string format_results_csv(const SimulationReport& report) {
  std::string out = "design,n,metric,value\n";
  for (const auto& c : report.cells) {
    const std::vector<std::pair<std::string, double>> metrics{
        {"mean", c.mean},
        {"bias", c.bias},
        {"variance", c.variance},
        {"mse", c.mse},
        {"replications", static_cast<double>(c.replications)},
        {"completed", static_cast<double>(c.completed)},
        {"failures", static_cast<double>(c.failures)},
    };
    for (const auto& [name, value] : metrics) {
      out += csv::join({c.design, std::to_string(c.n), name, csv::format_double(value)});
      out += '\n';
    }
  }
  return out;
}

std::string format_objectives_csv(const SimulationReport& report) {
  std::string out = "design,n,objective,ratio\n";
  for (const auto& c : report.cells) {
    out += csv::join({c.design, std::to_string(c.n), csv::format_double(c.mean_objective),
                      csv::format_double(c.mean_objective_ratio)});
    out += '\n';
  }
  return out;
}

std::string render_svg(const SimulationReport& report, const std::string& metric) {
  if (metric != "variance" && metric != "mse") throw Error(ErrorCode::DomainViolation, "metric must be variance or mse");
  auto value_of = [&](const CellSummary& c) { return metric == "variance" ? c.variance : c.mse; };

  std::vector<std::string> designs;
  std::vector<std::size_t> ns;
  double y_max = 0.0;
  for (const auto& c : report.cells) {
    if (std::find(designs.begin(), designs.end(), c.design) == designs.end()) designs.push_back(c.design);
    if (std::find(ns.begin(), ns.end(), c.n) == ns.end()) ns.push_back(c.n);
    if (c.completed > 0 && std::isfinite(value_of(c))) y_max = std::max(y_max, value_of(c));
  }
  std::sort(ns.begin(), ns.end());
  if (y_max <= 0.0) y_max = 1.0;
  const double width = 640, height = 400, left = 70, right = 170, top = 40, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const double n_lo = ns.empty() ? 0.0 : static_cast<double>(ns.front());
  const double n_hi = ns.empty() ? 1.0 : static_cast<double>(ns.back());
  auto px = [&](double n) { return n_hi > n_lo ? left + plot_w * (n - n_lo) / (n_hi - n_lo) : left + plot_w / 2; };
  auto py = [&](double v) { return top + plot_h * (1.0 - v / (1.05 * y_max)); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << left + plot_w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"16\">" << (metric == "variance" ? "Variance" : "MSE") << " of the LATE estimate</text>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
      << "\" stroke=\"black\"/>\n";
  for (std::size_t n : ns) {
    svg << "<text x=\"" << px(static_cast<double>(n)) << "\" y=\"" << top + plot_h + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << n << "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double v = 1.05 * y_max * t / 4.0;
    svg << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">n</text>\n";

  for (std::size_t d = 0; d < designs.size(); ++d) {
    const char* colour = palette[d % (sizeof(palette) / sizeof(palette[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& c : report.cells) {
      if (c.design != designs[d] || c.completed == 0) continue;
      svg << (first ? "" : " ") << px(static_cast<double>(c.n)) << ',' << py(value_of(c));
      first = false;
    }
    svg << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(d);
    svg << "<line x1=\"" << left + plot_w + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + plot_w + 32 << "\" y2=\""
        << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << left + plot_w + 38 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(designs[d]) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_report(const SimulationReport& report, const std::filesystem::path& out_dir) {
  if (report.cells.empty()) throw Error(ErrorCode::DomainViolation, "empty simulation report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());
  csv::write_file(out_dir / "results.csv", format_results_csv(report));
  csv::write_file(out_dir / "objectives.csv", format_objectives_csv(report));
  csv::write_file(out_dir / "variance.svg", render_svg(report, "variance"));
  csv::write_file(out_dir / "mse.svg", render_svg(report, "mse"));
}

}  // namespace nudge
