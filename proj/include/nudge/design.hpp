#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nudge/compliance.hpp"
#include "nudge/dataset.hpp"

namespace nudge {

/// Main-study covariates plus pilot-predicted compliance probabilities.
///
/// The design criterion is the plug-in C-optimal variance
///   V(e) = n * xbar_c' (X' diag(e_W (1 - e_W)) X)^{-1} xbar_c,   e_W = p_AT + p_C e,
/// which is convex in the nudge propensity e.
struct DesignProblem {
  Matrix x;
  ComplianceProbabilities probs;
  Vector x_bar_c;
  /// Multiply the criterion by n (the sqrt(n)-scaled variance).
  bool scale_n = true;

  /// Validates shapes and that X has full column rank.
  DesignProblem(Matrix x, ComplianceProbabilities probs, Vector x_bar_c, bool scale_n = true);

  /// Uses the complier mean of `x` under `probs` as the contrast vector.
  static DesignProblem from_cohort(Matrix x, ComplianceProbabilities probs, bool scale_n = true);

  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

struct GainConstraint {
  double rho = 0.0;
  /// Overrides the reference total score when set.
  std::optional<double> reference_sum;
};

/// Feasible region for the nudge propensity; the box [0, 1]^n is always implied.
struct ConstraintSet {
  /// Required mean induced treatment propensity (equality).
  std::optional<double> budget;
  /// Nudge propensity nondecreasing in score (ties ordered by row index).
  bool monotone_in_score = false;
  std::optional<GainConstraint> gain;
  /// Per-row score; required by the ordering and gain constraints.
  Vector score;

  bool only_box() const { return !budget && !monotone_in_score && !gain; }
};

/// Constraints reduced to linear data on a specific cohort.
struct ResolvedConstraints {
  std::size_t n = 0;
  /// Budget hyperplane sum_i p_C[i] e[i] = budget_target.
  std::optional<double> budget_target;
  Vector budget_weights;
  /// Row order (ascending score, then row index) when ordering is imposed.
  std::vector<std::size_t> order;
  /// Gain halfspace sum_i score[i] e[i] >= gain_threshold.
  std::optional<double> gain_threshold;
  Vector gain_weights;

  bool monotone() const { return !order.empty(); }
  /// Largest violation of any constraint by `e` (0 when feasible).
  double max_violation(const Vector& e) const;
};

/// Resolves the budget target and gain threshold; throws Infeasible when the budget
/// cannot be met by any e in [0, 1]^n and PreconditionViolated when the gain
/// reference cannot be determined.
ResolvedConstraints resolve_constraints(const ConstraintSet& cons, const ComplianceProbabilities& probs);

/// Reference total score for the gain constraint (before multiplying by rho).
double gain_reference_sum(const ConstraintSet& cons, const ComplianceProbabilities& probs);

double objective(const NudgePropensity& e_z, const DesignProblem& prob);
Vector gradient(const NudgePropensity& e_z, const DesignProblem& prob);

struct ObjectiveEvaluation {
  double value = 0.0;
  Vector gradient;
};

/// Objective and gradient from one factorization. With `propensity_floor` > 0 the
/// induced e_W is clamped to [floor, 1 - floor] before factorizing.
ObjectiveEvaluation evaluate_objective(const Vector& e_z, const DesignProblem& prob, double propensity_floor,
                                       bool with_gradient);

/// Euclidean projection onto the constraint intersection by Dykstra's alternating
/// projections over the box, budget hyperplane, ordering cone and gain halfspace.
Vector project(const Vector& v, const ConstraintSet& cons, const ComplianceProbabilities& probs, double tol = 1e-10);
Vector project(const Vector& v, const ResolvedConstraints& rc, double tol = 1e-10, int max_sweeps = 10000);

/// Exact projection onto the same intersection.
///
/// Box and ordering are handled jointly (isotonic fit then clipping); the budget
/// and gain constraints are dualized and their multipliers found by bracketed
/// root finding, so each call costs a few dozen isotonic passes.
///
/// With `metric` set, the projection minimizes sum_i metric[i] (e_i - v_i)^2
/// instead of the Euclidean distance; an empty vector means all ones.
class PolytopeProjector {
 public:
  explicit PolytopeProjector(ResolvedConstraints rc, Vector metric = Vector());
  Vector operator()(const Vector& v) const;
  const ResolvedConstraints& constraints() const { return rc_; }

 private:
  Vector project_box_order(const Vector& u) const;
  Vector solve_budget(const Vector& shifted) const;

  ResolvedConstraints rc_;
  Vector metric_;
  Vector budget_direction_;
  Vector gain_direction_;
};

enum class ProjectionMethod { exact, dykstra };

struct SolverOptions {
  int max_iterations = 5000;
  double initial_step = 1.0;
  double armijo_c = 1e-4;
  int max_halvings = 60;
  double relative_tolerance = 1e-10;
  int patience = 5;
  /// Spectral (Barzilai-Borwein) trial steps; when false every iteration starts at initial_step.
  bool spectral_steps = true;
  /// Largest coordinate move allowed once the objective has stalled.
  double step_tolerance = 1e-9;
  /// Take gradient steps in the metric diag(p_C^2), i.e. in treatment-propensity
  /// units. Rows with small p_C are otherwise too flat for the line search to resolve.
  bool scaled_metric = true;
  ProjectionMethod projection = ProjectionMethod::exact;
  double projection_tolerance = 1e-12;
  double propensity_floor = 1e-6;
};

enum class SolveStatus { converged, iteration_limit };

struct DesignSolution {
  NudgePropensity e_z_star;
  double objective = 0.0;
  int iterations = 0;
  double kkt_residual = 0.0;
  double projection_residual = 0.0;
  SolveStatus status = SolveStatus::converged;
};

/// Projected gradient descent with Armijo backtracking from the projection of 0.5 * 1.
DesignSolution solve(const DesignProblem& prob, const ConstraintSet& cons, const SolverOptions& opts = {});

/// Unconstrained optimum: e_W = 1/2 where attainable, otherwise the nearer box end.
NudgePropensity closed_form_unconstrained(const ComplianceProbabilities& probs);

/// Budget optimum for constant p_C with an intercept in span(X): (mu - mean p_AT) / p_C.
NudgePropensity closed_form_budget(const ComplianceProbabilities& probs, double mu);

/// Encourage the top-score rows (ties by ascending row index) while the mean induced
/// e_W stays at or below mu.
NudgePropensity rdd_design(const Vector& score, double mu, const ComplianceProbabilities& probs);

/// Pulls each (sigma0^2, sigma1^2) pair into ratio [1/2, 2] keeping 1/s0 + 1/s1 fixed.
std::pair<Vector, Vector> regularize_variances(const Vector& sigma2_w0, const Vector& sigma2_w1);

/// E[(W - e_W)^2 / sigma^2(W)] = e_W (1 - e_W)^2 / s1 + (1 - e_W) e_W^2 / s0.
double hetero_weight(double e_w, double sigma2_w0, double sigma2_w1);
/// d^2/de_W^2 of hetero_weight: (6 e_W - 4)/s1 + (2 - 6 e_W)/s0.
double hetero_second_derivative(double e_w, double sigma2_w0, double sigma2_w1);

/// Heteroscedastic criterion with weights hetero_weight; throws RatioOutOfRange when
/// some sigma1/sigma0 ratio leaves [1/2, 2] (convexity is then not guaranteed).
double objective_wls(const NudgePropensity& e_z, const DesignProblem& prob, const Vector& sigma2_w0,
                     const Vector& sigma2_w1);

std::string to_string(SolveStatus status);
void to_json(nlohmann::json& j, const DesignSolution& solution);
void write_design_csv(const NudgePropensity& e_z, const std::filesystem::path& path);
std::string format_design_csv(const NudgePropensity& e_z);
/// Reads a one-column nudge propensity CSV (header "e_z").
NudgePropensity load_design_csv(const std::filesystem::path& path);

}  // namespace nudge
