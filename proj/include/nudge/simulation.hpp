#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nudge/design.hpp"
#include "nudge/estimation.hpp"

namespace nudge {

/// Analytic stand-in for the baseline f(X), in terms of the score r and the
/// covariate columns x2, x3 (terms for absent columns are dropped):
///  - smooth_nonlinear: a sin(pi r) + b x2^2 + c x3
///  - affine:           a r + b x2 + c x3
///  - zero:             0
struct BaselineFn {
  enum class Kind { smooth_nonlinear, affine, zero };
  Kind kind = Kind::smooth_nonlinear;
  double a = 5.0;
  double b = 2.0;
  double c = -3.0;

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x, std::size_t score_col) const;
};

std::string to_string(BaselineFn::Kind kind);
BaselineFn::Kind parse_baseline_kind(const std::string& name);

/// p_AT = a exp(-b (1 - r)) + floor, p_NT = a exp(-b r) + floor, p_C = 1 - p_AT - p_NT.
struct CurveParams {
  double a = 0.8;
  double b = 5.0;
  double floor = 0.05;
};

/// Semi-synthetic data-generating process. Column 0 is the intercept; the score
/// column holds evenly spaced ranks; the rest are standardized normals.
struct DgpConfig {
  std::size_t n = 1000;
  Vector gamma_true = default_gamma();
  /// Defaults to the last column.
  std::optional<std::size_t> score_col;
  BaselineFn baseline;
  CurveParams curves;
  double noise_var = 20.0;
  double class_shift = 10.0;
  std::uint64_t seed = 1;

  std::size_t d() const { return static_cast<std::size_t>(gamma_true.size()); }
  std::size_t score_column() const { return score_col.value_or(d() - 1); }
  /// Throws InvalidConfig on inconsistent settings.
  void validate() const;

  static Vector default_gamma();
};

Matrix generate_covariates(const DgpConfig& config, std::mt19937_64& rng);

/// Throws InvalidCurve when the parameters leave no complier mass somewhere on [0, 1].
ComplianceProbabilities compliance_curves(const Vector& score, const CurveParams& params);

enum class ComplianceClass { never_taker, complier, always_taker };

/// A generated study together with the latent quantities an oracle needs.
struct SimulatedStudy {
  EncouragementDataset data;
  NudgePropensity e_z;
  ComplianceProbabilities true_probs;
  std::vector<ComplianceClass> classes;
};

/// Z ~ Bernoulli(e_Z), class ~ Categorical(p_NT, p_C, p_AT), W = Z 1{C} + 1{AT},
/// Y = f(X) + W X'gamma + shift 1{AT} - shift 1{NT} + N(0, noise_var).
SimulatedStudy generate_dataset(const DgpConfig& config, const Matrix& x, const NudgePropensity& e_z,
                                std::mt19937_64& rng);
/// Draws covariates of size config.n first.
SimulatedStudy generate_dataset(const DgpConfig& config, const NudgePropensity& e_z, std::mt19937_64& rng);

/// True m*(X, Z, W) = f(X) + e_W X'gamma + E[shift terms | X, Z, W].
Vector true_m_star(const DgpConfig& config, const EncouragementDataset& data, const NudgePropensity& e_z);

/// Nuisance source returning the true compliance curves and true m* (ignores the training rows).
class OracleNuisances : public NuisanceFitter {
 public:
  explicit OracleNuisances(DgpConfig config) : config_(std::move(config)) {}
  Nuisances fit_predict(const EncouragementDataset& train, const EncouragementDataset& target,
                        const NudgePropensity& target_e_z) const override;

 private:
  DgpConfig config_;
};

struct LateOracle {
  double value = 0.0;
  double mc_se = 0.0;
};

/// E[X | complier]' gamma from a fresh covariate draw of n_oracle rows, as the
/// p_C-weighted mean of X' gamma, with its delta-method standard error.
LateOracle true_late(const DgpConfig& config, std::size_t n_oracle = 1'000'000, std::uint64_t seed = 0);

/// How a Monte Carlo arm picks its nudge propensities from (X, predicted probs).
struct DesignStrategy {
  enum class Kind { rct, optimal, rdd };
  std::string name;
  Kind kind = Kind::optimal;
  /// rct: constant propensity when no budget is set.
  double rct_propensity = 0.5;
  std::optional<double> budget;
  bool monotone = false;
  std::optional<double> gain_rho;
};

std::string to_string(DesignStrategy::Kind kind);
DesignStrategy::Kind parse_strategy_kind(const std::string& name);

struct StrategyOutcome {
  NudgePropensity e_z;
  /// Plug-in design criterion of the chosen propensities under the predicted probabilities.
  double objective = 0.0;
};

/// rct with a budget uses the constant (mu - mean p_AT) / mean p_C.
StrategyOutcome apply_strategy(const DesignStrategy& strategy, const Matrix& x, const ComplianceProbabilities& probs,
                               std::size_t score_col, const SolverOptions& solver = {});

struct MonteCarloConfig {
  DgpConfig dgp;
  std::vector<DesignStrategy> designs;
  std::vector<std::size_t> n_grid;
  std::size_t replications = 2;
  EstimatorSpec estimator;
  ComplianceOptions pilot_compliance;
  double pilot_fraction = 0.2;
  double pilot_propensity = 0.5;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::size_t n_oracle = 1'000'000;

  /// Compliance and outcome bases suited to the default DGP (spline in the score,
  /// cell-saturated flexible outcome regression, p_C clipped at 0.05).
  static MonteCarloConfig defaults();
  void validate() const;
};

struct CellSummary {
  std::string design;
  std::size_t n = 0;
  /// Configured replications; completed + failures == replications.
  std::size_t replications = 0;
  std::size_t completed = 0;
  std::size_t failures = 0;
  double mean = 0.0;
  double bias = 0.0;
  /// Divides by the number of completed replications, so mse = variance + bias^2.
  double variance = 0.0;
  double mse = 0.0;
  double mean_objective = 0.0;
  /// Mean of objective / objective of the unconstrained optimum on the same cohort.
  double mean_objective_ratio = 0.0;
  std::vector<double> estimates;
  /// Error code name -> count over failed replications.
  std::map<std::string, std::size_t> failure_reasons;
};

struct SimulationReport {
  LateOracle truth;
  std::vector<CellSummary> cells;

  const CellSummary& cell(const std::string& design, std::size_t n) const;
};

/// Replication r at grid point k draws everything from a stream seeded by
/// (seed, k, r). The stream does not depend on the design, so all designs see the
/// same covariates, pilot and random draws (common random numbers), and two
/// identical strategies give identical cells.
SimulationReport run_monte_carlo(const MonteCarloConfig& config);

/// Writes results.csv, objectives.csv, variance.svg and mse.svg into out_dir.
void emit_report(const SimulationReport& report, const std::filesystem::path& out_dir);

std::string format_results_csv(const SimulationReport& report);
std::string format_objectives_csv(const SimulationReport& report);
/// Line plot of one metric ("variance" or "mse") against n, one polyline per design.
std::string render_svg(const SimulationReport& report, const std::string& metric);

}  // namespace nudge
