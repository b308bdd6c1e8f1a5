#include "nudge/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nudge/compliance.hpp"
#include "nudge/csv.hpp"
#include "nudge/dataset.hpp"
#include "nudge/design.hpp"
#include "nudge/estimation.hpp"
#include "nudge/simulation.hpp"
#include "toml.hpp"

namespace nudge::cli {

ExitCode exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedCsv:
    case ErrorCode::SchemaViolation:
    case ErrorCode::DomainViolation:
    case ErrorCode::LengthMismatch:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::PreconditionViolated:
    case ErrorCode::FoldTooSmall:
    case ErrorCode::InvalidCurve:
    case ErrorCode::InvalidConfig:
    case ErrorCode::IoError:
      return kUsage;
    default:
      return kFailure;
  }
}

namespace {

namespace fs = std::filesystem;

// A TOML table whose keys are checked against an allow-list before use.
class Config {
 public:
  Config() = default;
  Config(toml::table table, std::string where) : table_(std::move(table)), where_(std::move(where)) {}

  static Config load(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    try {
      return Config(toml::parse_file(path.string()), path.string());
    } catch (const toml::parse_error& e) {
      std::ostringstream os;
      os << path.string() << ":" << e.source().begin.line << ": " << e.description();
      throw Error(ErrorCode::InvalidConfig, os.str());
    }
  }

  void allow(const std::vector<std::string_view>& keys) const {
    const std::set<std::string_view> allowed(keys.begin(), keys.end());
    for (const auto& [key, _] : table_) {
      if (!allowed.count(key.str())) {
        throw Error(ErrorCode::InvalidConfig, "unknown key '" + std::string(key.str()) + "' in " + where_);
      }
    }
  }

  bool has(std::string_view key) const { return table_.contains(key); }

  std::optional<double> number(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    if (auto v = node->value<double>(); v && (node->is_floating_point() || node->is_integer())) return *v;
    throw type_error(key, "a number");
  }

  std::optional<std::int64_t> integer(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    if (node->is_integer()) return *node->value<std::int64_t>();
    throw type_error(key, "an integer");
  }

  std::optional<std::size_t> count(std::string_view key) const {
    const auto v = integer(key);
    if (!v) return std::nullopt;
    if (*v < 0) throw type_error(key, "a nonnegative integer");
    return static_cast<std::size_t>(*v);
  }

  std::optional<bool> boolean(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    if (node->is_boolean()) return *node->value<bool>();
    throw type_error(key, "true or false");
  }

  std::optional<std::string> string(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    if (node->is_string()) return *node->value<std::string>();
    throw type_error(key, "a string");
  }

  template <class T>
  std::optional<std::vector<T>> array(std::string_view key, const char* what) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    const auto* arr = node->as_array();
    if (!arr) throw type_error(key, what);
    std::vector<T> out;
    for (const auto& item : *arr) {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!item.is_string()) throw type_error(key, what);
      } else if constexpr (std::is_same_v<T, std::int64_t>) {
        if (!item.is_integer()) throw type_error(key, what);
      } else {
        if (!item.is_integer() && !item.is_floating_point()) throw type_error(key, what);
      }
      out.push_back(*item.value<T>());
    }
    return out;
  }

  std::optional<Config> table(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return std::nullopt;
    if (!node->is_table()) throw type_error(key, "a table");
    return Config(*node->as_table(), where_ + " [" + std::string(key) + "]");
  }

  std::vector<Config> tables(std::string_view key) const {
    const auto* node = table_.get(key);
    if (!node) return {};
    const auto* arr = node->as_array();
    if (!arr || !arr->is_array_of_tables()) throw type_error(key, "an array of tables ([[" + std::string(key) + "]])");
    std::vector<Config> out;
    for (std::size_t i = 0; i < arr->size(); ++i) {
      out.emplace_back(*(*arr)[i].as_table(), where_ + " [[" + std::string(key) + "]] #" + std::to_string(i + 1));
    }
    return out;
  }

 private:
  Error type_error(std::string_view key, const std::string& what) const {
    return Error(ErrorCode::InvalidConfig, "key '" + std::string(key) + "' in " + where_ + " must be " + what);
  }

  toml::table table_;
  std::string where_ = "(defaults)";
};

// Flag value if given on the command line, else file value, else the default.
template <class T>
T pick(const CLI::Option* flag, const T& flag_value, const std::optional<T>& file_value, const T& fallback) {
  if (flag && flag->count() > 0) return flag_value;
  return file_value.value_or(fallback);
}

template <class T>
std::optional<T> pick_optional(const CLI::Option* flag, const T& flag_value, const std::optional<T>& file_value) {
  if (flag && flag->count() > 0) return flag_value;
  return file_value;
}

void require_unit(double v, const std::string& name) {
  if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::InvalidConfig, name + " must lie in [0, 1]");
}

// Pilot and cohort files predate outcomes, so those stages pass use_outcome = false.
ColumnSchema load_schema(const fs::path& path, bool require_treatment, bool use_outcome) {
  const Config cfg = Config::load(path);
  cfg.allow({"x", "z", "w", "y", "score", "intercept"});
  ColumnSchema schema;
  const auto x = cfg.array<std::string>("x", "an array of column names");
  if (!x || x->empty()) throw Error(ErrorCode::InvalidConfig, "schema " + path.string() + " needs a nonempty x list");
  schema.x = *x;
  schema.z = cfg.string("z").value_or("z");
  schema.w = cfg.string("w").value_or("w");
  if (use_outcome) schema.y = cfg.string("y");
  schema.score = cfg.string("score");
  schema.intercept = cfg.boolean("intercept").value_or(false);
  schema.require_treatment = require_treatment;
  return schema;
}

void write_json(const fs::path& path, const nlohmann::json& j) { csv::write_file(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

fs::path sidecar_path(const fs::path& out) {
  return out.parent_path() / (out.stem().string() + ".diagnostics.json");
}

// ---- fit-pilot -------------------------------------------------------------

struct FitPilotArgs {
  std::string pilot, schema, out, config;
  double ridge_lambda = 0.0, clip_epsilon = 0.0;
  std::string basis;
  std::size_t spline_knots = 0;
  CLI::Option *ridge_opt = nullptr, *clip_opt = nullptr, *basis_opt = nullptr, *knots_opt = nullptr;
};

int cmd_fit_pilot(const FitPilotArgs& a, std::ostream& out) {
  Config cfg;
  if (!a.config.empty()) cfg = Config::load(a.config);
  cfg.allow({"ridge_lambda", "clip_epsilon", "basis", "spline_knots"});
  ComplianceOptions opts;
  opts.ridge_lambda = pick(a.ridge_opt, a.ridge_lambda, cfg.number("ridge_lambda"), opts.ridge_lambda);
  opts.clip_epsilon = pick(a.clip_opt, a.clip_epsilon, cfg.number("clip_epsilon"), opts.clip_epsilon);
  opts.recipe = parse_recipe_kind(pick(a.basis_opt, a.basis, cfg.string("basis"), to_string(opts.recipe)));
  opts.spline_knots = pick(a.knots_opt, a.spline_knots, cfg.count("spline_knots"), opts.spline_knots);

  const EncouragementDataset pilot = load_dataset(a.pilot, load_schema(a.schema, true, false));
  const ComplianceModel model = fit_compliance(pilot, opts);
  save_model(model, a.out);

  std::size_t arm[2] = {0, 0}, treated[2] = {0, 0};
  for (Eigen::Index i = 0; i < pilot.x.rows(); ++i) {
    ++arm[pilot.z[i]];
    treated[pilot.z[i]] += static_cast<std::size_t>(pilot.w[i]);
  }
  const Matrix f = model.recipe.expand(pilot.x);
  const Vector eta0 = f * model.beta_z0, eta1 = f * model.beta_z1;
  std::size_t clipped_c = 0, clipped_at = 0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const double at = sigmoid(eta0[i]);
    const double c = sigmoid(eta1[i]) - at;
    if (c < model.clip_epsilon) ++clipped_c;
    if (at > 1.0 - std::clamp(c, model.clip_epsilon, 1.0)) ++clipped_at;
  }
  out << "pilot rows: " << pilot.rows() << " (Z=0: " << arm[0] << ", Z=1: " << arm[1] << ")\n"
      << "treated: " << treated[0] << " with Z=0, " << treated[1] << " with Z=1\n"
      << "p_C raised to the clip floor " << model.clip_epsilon << " on " << clipped_c << " rows; p_AT capped on "
      << clipped_at << " rows\n"
      << "model written to " << a.out << "\n";
  return kOk;
}

// ---- design ----------------------------------------------------------------

struct DesignArgs {
  std::string cohort, model, schema, out, constraints;
  double budget = 0.0, gain_rho = 0.0;
  bool monotone = false;
  CLI::Option *budget_opt = nullptr, *gain_opt = nullptr, *monotone_opt = nullptr;
};

int cmd_design(const DesignArgs& a, std::ostream& out, std::ostream& err) {
  Config cfg;
  if (!a.constraints.empty()) cfg = Config::load(a.constraints);
  cfg.allow({"budget", "monotone", "gain_rho", "gain_reference_sum", "max_iterations"});
  ConstraintSet cons;
  cons.budget = pick_optional(a.budget_opt, a.budget, cfg.number("budget"));
  cons.monotone_in_score = pick(a.monotone_opt, a.monotone, cfg.boolean("monotone"), false);
  const auto rho = pick_optional(a.gain_opt, a.gain_rho, cfg.number("gain_rho"));
  if (cons.budget) require_unit(*cons.budget, "budget");
  if (rho) {
    require_unit(*rho, "gain_rho");
    cons.gain = GainConstraint{*rho, cfg.number("gain_reference_sum")};
  } else if (cfg.has("gain_reference_sum")) {
    throw Error(ErrorCode::InvalidConfig, "gain_reference_sum needs gain_rho");
  }
  SolverOptions solver;
  if (const auto it = cfg.count("max_iterations")) {
    if (*it == 0) throw Error(ErrorCode::InvalidConfig, "max_iterations must be positive");
    solver.max_iterations = static_cast<int>(std::min<std::size_t>(*it, 1'000'000));
  }

  const ColumnSchema schema = load_schema(a.schema, false, false);
  if ((cons.monotone_in_score || cons.gain) && !schema.score) {
    throw Error(ErrorCode::InvalidConfig, "monotone and gain constraints need a score column in the schema");
  }
  const EncouragementDataset cohort = load_dataset(a.cohort, schema);
  const ComplianceModel model = load_model(a.model);
  const ComplianceProbabilities probs = predict_probs(model, cohort.x);
  const DesignProblem prob = DesignProblem::from_cohort(cohort.x, probs);
  if (cohort.score_col) cons.score = cohort.score();

  const DesignSolution sol = solve(prob, cons, solver);
  write_design_csv(sol.e_z_star, a.out);

  nlohmann::json diag = sol;
  diag["n"] = cohort.rows();
  diag["mean_e_w"] = induced_treatment_propensity(probs, sol.e_z_star).mean();
  nlohmann::json jc = {{"budget", nullptr}, {"monotone", cons.monotone_in_score}, {"gain_rho", nullptr}};
  if (cons.budget) jc["budget"] = *cons.budget;
  if (cons.gain) jc["gain_rho"] = cons.gain->rho;
  diag["constraints"] = jc;
  diag["unconstrained_objective"] = nullptr;
  diag["objective_ratio"] = nullptr;
  try {
    const double base = objective(closed_form_unconstrained(probs), prob);
    diag["unconstrained_objective"] = base;
    diag["objective_ratio"] = sol.objective / base;
  } catch (const Error&) {
    // No finite unconstrained optimum to compare against (e_W pinned at 0 or 1 everywhere).
  }
  write_json(sidecar_path(a.out), diag);

  out << "rows: " << cohort.rows() << "\n"
      << "objective: " << sol.objective << "\n";
  if (diag["objective_ratio"].is_number()) out << "ratio to unconstrained optimum: " << diag["objective_ratio"].get<double>() << "\n";
  out << "iterations: " << sol.iterations << ", KKT residual: " << sol.kkt_residual << "\n"
      << "design written to " << a.out << " (diagnostics: " << sidecar_path(a.out).string() << ")\n";
  if (sol.status != SolveStatus::converged) err << "warning: solver stopped at the iteration limit\n";
  return kOk;
}

// ---- estimate --------------------------------------------------------------

struct EstimateArgs {
  std::string data, schema, design, model, out, config;
  bool refit = false;
  std::string method;
  std::size_t folds = 0, bootstrap = 0;
  double level = 0.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  CLI::Option *method_opt = nullptr, *folds_opt = nullptr, *bootstrap_opt = nullptr, *level_opt = nullptr,
              *seed_opt = nullptr, *threads_opt = nullptr, *model_opt = nullptr, *refit_opt = nullptr;
};

EstimatorSpec estimator_from(const Config& cfg, EstimatorSpec spec) {
  if (const auto m = cfg.string("method")) spec.method = parse_estimation_method(*m);
  spec.folds = cfg.count("folds").value_or(spec.folds);
  spec.bootstrap = cfg.count("bootstrap").value_or(spec.bootstrap);
  spec.level = cfg.number("level").value_or(spec.level);
  if (const auto s = cfg.count("seed")) spec.seed = *s;
  if (const auto t = cfg.count("threads")) spec.threads = static_cast<unsigned>(*t);
  auto& outcome = spec.nuisance.outcome;
  if (const auto l = cfg.string("learner")) {
    if (*l == "ridge") {
      outcome.kind = LearnerKind::ridge;
    } else if (*l == "knn") {
      outcome.kind = LearnerKind::knn;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown learner '" + *l + "' (ridge, knn)");
    }
  }
  outcome.ridge_lambda = cfg.number("ridge_lambda").value_or(outcome.ridge_lambda);
  if (const auto k = cfg.count("knn_k")) outcome.knn_k = *k;
  if (const auto b = cfg.string("outcome_basis")) outcome.basis = parse_recipe_kind(*b);
  if (const auto d = cfg.string("outcome_design")) {
    if (*d == "interacted") {
      outcome.design = OutcomeDesign::interacted;
    } else if (*d == "cell_saturated") {
      outcome.design = OutcomeDesign::cell_saturated;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown outcome_design '" + *d + "' (interacted, cell_saturated)");
    }
  }
  outcome.spline_knots = cfg.count("spline_knots").value_or(outcome.spline_knots);
  auto& comp = spec.nuisance.compliance;
  if (const auto b = cfg.string("compliance_basis")) comp.recipe = parse_recipe_kind(*b);
  comp.ridge_lambda = cfg.number("compliance_ridge_lambda").value_or(comp.ridge_lambda);
  comp.clip_epsilon = cfg.number("clip_epsilon").value_or(comp.clip_epsilon);
  comp.spline_knots = outcome.spline_knots;
  return spec;
}

const std::vector<std::string_view> kEstimatorKeys = {
    "method",        "folds",          "bootstrap",        "level",
    "seed",          "threads",        "learner",          "ridge_lambda",
    "knn_k",         "outcome_basis",  "outcome_design",   "spline_knots",
    "compliance_basis", "compliance_ridge_lambda", "clip_epsilon"};

void validate_estimator(const EstimatorSpec& spec) {
  if (spec.method == EstimationMethod::crossfit && spec.folds < 2) {
    throw Error(ErrorCode::InvalidConfig, "folds must be at least 2");
  }
  if (spec.bootstrap > 0 && spec.bootstrap < 100) throw Error(ErrorCode::InvalidConfig, "bootstrap needs B >= 100 (or 0)");
  if (!(spec.level > 0.0 && spec.level < 1.0)) throw Error(ErrorCode::InvalidConfig, "level must lie in (0, 1)");
  if (!(spec.nuisance.outcome.ridge_lambda >= 0.0)) throw Error(ErrorCode::InvalidConfig, "ridge_lambda must be >= 0");
  if (spec.nuisance.outcome.knn_k && *spec.nuisance.outcome.knn_k == 0) {
    throw Error(ErrorCode::InvalidConfig, "knn_k must be positive");
  }
  const double eps = spec.nuisance.compliance.clip_epsilon;
  if (!(eps > 0.0 && eps <= 0.1)) throw Error(ErrorCode::InvalidConfig, "clip_epsilon must lie in (0, 0.1]");
}

int cmd_estimate(const EstimateArgs& a, std::ostream& out) {
  Config cfg;
  if (!a.config.empty()) cfg = Config::load(a.config);
  cfg.allow(kEstimatorKeys);
  EstimatorSpec spec = estimator_from(cfg, EstimatorSpec{});
  if (a.method_opt->count()) spec.method = parse_estimation_method(a.method);
  if (a.folds_opt->count()) spec.folds = a.folds;
  if (a.bootstrap_opt->count()) spec.bootstrap = a.bootstrap;
  if (a.level_opt->count()) spec.level = a.level;
  if (a.seed_opt->count()) spec.seed = a.seed;
  if (a.threads_opt->count()) spec.threads = a.threads;
  spec.threads = std::max(1u, spec.threads);
  validate_estimator(spec);

  if (a.model_opt->count() == a.refit_opt->count()) {
    throw Error(ErrorCode::InvalidConfig, "pass exactly one of --model (use the pilot fit) or --refit");
  }
  const ColumnSchema schema = load_schema(a.schema, true, true);
  if (!schema.y) throw Error(ErrorCode::InvalidConfig, "estimation needs an outcome column (schema key y)");
  const EncouragementDataset data = load_dataset(a.data, schema);
  const NudgePropensity e_z = load_design_csv(a.design);
  if (e_z.size() != data.rows()) {
    throw Error(ErrorCode::LengthMismatch, "design has " + std::to_string(e_z.size()) + " rows but the data has " +
                                               std::to_string(data.rows()));
  }
  if (a.model_opt->count()) spec.nuisance.fixed_compliance = load_model(a.model);

  const LateEstimate est = estimate_late(data, e_z, spec);
  nlohmann::json j = est;
  j["spec"] = spec;
  write_json(a.out, j);

  out << "method: " << to_string(est.method) << "\n"
      << "tau_late: " << est.tau_late << "\n";
  if (est.ci) {
    out << "bootstrap " << est.ci->level * 100.0 << "% interval: [" << est.ci->lo << ", " << est.ci->hi << "] ("
        << est.ci->replicates << " replicates, " << est.ci->redraws << " redraws)\n";
  }
  out << "estimate written to " << a.out << "\n";
  return kOk;
}

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string config, out;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  CLI::Option *seed_opt = nullptr, *threads_opt = nullptr;
};

MonteCarloConfig monte_carlo_from(const Config& cfg) {
  cfg.allow({"seed", "threads", "replications", "n_grid", "n_oracle", "pilot_fraction", "pilot_propensity", "dgp",
             "estimator", "pilot", "designs"});
  MonteCarloConfig mc = MonteCarloConfig::defaults();
  if (const auto s = cfg.count("seed")) mc.seed = *s;
  if (const auto t = cfg.count("threads")) mc.threads = static_cast<unsigned>(*t);
  mc.replications = cfg.count("replications").value_or(mc.replications);
  mc.n_oracle = cfg.count("n_oracle").value_or(mc.n_oracle);
  mc.pilot_fraction = cfg.number("pilot_fraction").value_or(mc.pilot_fraction);
  mc.pilot_propensity = cfg.number("pilot_propensity").value_or(mc.pilot_propensity);
  if (const auto grid = cfg.array<std::int64_t>("n_grid", "an array of integers")) {
    mc.n_grid.clear();
    for (auto n : *grid) {
      if (n <= 0) throw Error(ErrorCode::InvalidConfig, "n_grid entries must be positive");
      mc.n_grid.push_back(static_cast<std::size_t>(n));
    }
  }

  if (const auto dgp = cfg.table("dgp")) {
    dgp->allow({"gamma", "score_col", "baseline", "baseline_a", "baseline_b", "baseline_c", "noise_var", "class_shift",
                "curves"});
    if (const auto g = dgp->array<double>("gamma", "an array of numbers")) {
      mc.dgp.gamma_true = Eigen::Map<const Vector>(g->data(), static_cast<Eigen::Index>(g->size()));
    }
    if (const auto s = dgp->count("score_col")) mc.dgp.score_col = *s;
    if (const auto b = dgp->string("baseline")) mc.dgp.baseline.kind = parse_baseline_kind(*b);
    mc.dgp.baseline.a = dgp->number("baseline_a").value_or(mc.dgp.baseline.a);
    mc.dgp.baseline.b = dgp->number("baseline_b").value_or(mc.dgp.baseline.b);
    mc.dgp.baseline.c = dgp->number("baseline_c").value_or(mc.dgp.baseline.c);
    mc.dgp.noise_var = dgp->number("noise_var").value_or(mc.dgp.noise_var);
    mc.dgp.class_shift = dgp->number("class_shift").value_or(mc.dgp.class_shift);
    if (const auto curves = dgp->table("curves")) {
      curves->allow({"a", "b", "floor"});
      mc.dgp.curves.a = curves->number("a").value_or(mc.dgp.curves.a);
      mc.dgp.curves.b = curves->number("b").value_or(mc.dgp.curves.b);
      mc.dgp.curves.floor = curves->number("floor").value_or(mc.dgp.curves.floor);
    }
  }
  if (const auto est = cfg.table("estimator")) {
    est->allow(kEstimatorKeys);
    if (est->has("bootstrap")) throw Error(ErrorCode::InvalidConfig, "the simulation does not bootstrap; drop 'bootstrap'");
    mc.estimator = estimator_from(*est, mc.estimator);
    validate_estimator(mc.estimator);
  }
  if (const auto pilot = cfg.table("pilot")) {
    pilot->allow({"basis", "ridge_lambda", "clip_epsilon", "spline_knots"});
    auto& p = mc.pilot_compliance;
    if (const auto b = pilot->string("basis")) p.recipe = parse_recipe_kind(*b);
    p.ridge_lambda = pilot->number("ridge_lambda").value_or(p.ridge_lambda);
    p.clip_epsilon = pilot->number("clip_epsilon").value_or(p.clip_epsilon);
    p.spline_knots = pilot->count("spline_knots").value_or(p.spline_knots);
    if (!(p.clip_epsilon > 0.0 && p.clip_epsilon <= 0.1)) {
      throw Error(ErrorCode::InvalidConfig, "pilot clip_epsilon must lie in (0, 0.1]");
    }
  }
  for (const auto& d : cfg.tables("designs")) {
    d.allow({"name", "kind", "rct_propensity", "budget", "monotone", "gain_rho"});
    DesignStrategy s;
    const auto name = d.string("name");
    const auto kind = d.string("kind");
    if (!name || !kind) throw Error(ErrorCode::InvalidConfig, "every [[designs]] entry needs name and kind");
    s.name = *name;
    s.kind = parse_strategy_kind(*kind);
    s.rct_propensity = d.number("rct_propensity").value_or(s.rct_propensity);
    s.budget = d.number("budget");
    s.monotone = d.boolean("monotone").value_or(false);
    s.gain_rho = d.number("gain_rho");
    mc.designs.push_back(std::move(s));
  }
  return mc;
}

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  MonteCarloConfig mc = monte_carlo_from(Config::load(a.config));
  if (a.seed_opt->count()) mc.seed = a.seed;
  if (a.threads_opt->count()) {
    mc.threads = a.threads;
  } else if (mc.threads == 1 && !Config::load(a.config).has("threads")) {
    mc.threads = std::max(1u, std::thread::hardware_concurrency());
  }
  mc.validate();

  const SimulationReport report = run_monte_carlo(mc);
  emit_report(report, a.out);

  out << "true LATE: " << fixed(report.truth.value) << " (MC s.e. " << fixed(report.truth.mc_se) << ")\n";
  out << std::left << std::setw(16) << "design" << std::right << std::setw(8) << "n" << std::setw(10) << "done"
      << std::setw(12) << "mean" << std::setw(12) << "variance" << std::setw(12) << "mse" << std::setw(10) << "ratio"
      << "\n";
  for (const auto& c : report.cells) {
    out << std::left << std::setw(16) << c.design << std::right << std::setw(8) << c.n << std::setw(10)
        << (std::to_string(c.completed) + "/" + std::to_string(c.replications)) << std::setw(12) << fixed(c.mean)
        << std::setw(12) << fixed(c.variance) << std::setw(12) << fixed(c.mse) << std::setw(10)
        << fixed(c.mean_objective_ratio, 3) << "\n";
    for (const auto& [reason, count] : c.failure_reasons) out << "  failures (" << reason << "): " << count << "\n";
  }
  out << "report written to " << a.out << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Encouragement designs for LATE estimation", "nudge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "nudge 0.1.0");

  FitPilotArgs fp;
  auto* fit = app.add_subcommand("fit-pilot", "Fit compliance probabilities on a pilot study");
  fit->add_option("pilot", fp.pilot, "Pilot CSV with covariates, z and w")->required()->check(CLI::ExistingFile);
  fit->add_option("--schema", fp.schema, "TOML file mapping CSV columns to roles")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", fp.out, "Output model JSON")->required();
  fit->add_option("--config", fp.config, "TOML file with fit options")->check(CLI::ExistingFile);
  fp.ridge_opt = fit->add_option("--ridge-lambda", fp.ridge_lambda, "Logistic ridge penalty");
  fp.clip_opt = fit->add_option("--clip-epsilon", fp.clip_epsilon, "Floor for p_C");
  fp.basis_opt = fit->add_option("--basis", fp.basis, "linear, score_spline or flexible");
  fp.knots_opt = fit->add_option("--spline-knots", fp.spline_knots, "Interior knots of the score spline");

  DesignArgs da;
  auto* design = app.add_subcommand("design", "Optimize nudge propensities for a cohort");
  design->add_option("cohort", da.cohort, "Cohort CSV with covariates")->required()->check(CLI::ExistingFile);
  design->add_option("--model", da.model, "Compliance model JSON from fit-pilot")->required()->check(CLI::ExistingFile);
  design->add_option("--schema", da.schema, "TOML file mapping CSV columns to roles")->required()->check(CLI::ExistingFile);
  design->add_option("--out", da.out, "Output design CSV")->required();
  design->add_option("--constraints", da.constraints, "TOML file with constraints")->check(CLI::ExistingFile);
  da.budget_opt = design->add_option("--budget", da.budget, "Mean induced treatment propensity");
  da.monotone_opt = design->add_flag("--monotone", da.monotone, "Nudge propensity nondecreasing in the score");
  da.gain_opt = design->add_option("--gain-rho", da.gain_rho, "Keep this share of the score-weighted gain");

  EstimateArgs ea;
  auto* estimate = app.add_subcommand("estimate", "Estimate the LATE on merged pilot and main data");
  estimate->add_option("data", ea.data, "Merged CSV with covariates, z, w and y")->required()->check(CLI::ExistingFile);
  estimate->add_option("--schema", ea.schema, "TOML file mapping CSV columns to roles")->required()->check(CLI::ExistingFile);
  estimate->add_option("--design", ea.design, "Nudge propensity of every data row (CSV column e_z)")
      ->required()
      ->check(CLI::ExistingFile);
  ea.model_opt = estimate->add_option("--model", ea.model, "Use this compliance fit")->check(CLI::ExistingFile);
  ea.refit_opt = estimate->add_flag("--refit", ea.refit, "Refit compliance on the data");
  estimate->add_option("--out", ea.out, "Output estimate JSON")->required();
  estimate->add_option("--config", ea.config, "TOML file with estimator options")->check(CLI::ExistingFile);
  ea.method_opt = estimate->add_option("--method", ea.method, "plugin, crossfit or wls");
  ea.folds_opt = estimate->add_option("--folds", ea.folds, "Cross-fitting folds");
  ea.bootstrap_opt = estimate->add_option("--bootstrap", ea.bootstrap, "Bootstrap replicates (0: none)");
  ea.level_opt = estimate->add_option("--level", ea.level, "Interval level");
  ea.seed_opt = estimate->add_option("--seed", ea.seed, "Seed for folds and bootstrap");
  ea.threads_opt = estimate->add_option("--threads", ea.threads, "Bootstrap worker threads");

  SimulateArgs sa;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo comparison of designs on the synthetic DGP");
  simulate->add_option("config", sa.config, "Simulation TOML")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", sa.out, "Output directory")->required();
  sa.seed_opt = simulate->add_option("--seed", sa.seed, "Master seed");
  sa.threads_opt = simulate->add_option("--threads", sa.threads, "Worker threads (default: all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "nudge: " << e.what() << "\n";
    for (const auto* sub : app.get_subcommands()) err << sub->help();
    return kUsage;
  }

  try {
    if (*fit) return cmd_fit_pilot(fp, out);
    if (*design) return cmd_design(da, out, err);
    if (*estimate) return cmd_estimate(ea, out);
    if (*simulate) return cmd_simulate(sa, out);
  } catch (const Error& e) {
    err << "nudge: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "nudge: unexpected failure: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace nudge::cli
