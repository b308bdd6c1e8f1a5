#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nudge/compliance.hpp"
#include "nudge/dataset.hpp"
#include "nudge/features.hpp"

namespace nudge {

enum class LearnerKind { ridge, knn };

/// How (Z, W) enter the outcome regression.
///  - interacted: one fit on [B, Z*B, W*B]; every (z, w) cell is predicted, empty
///    cells by extrapolation.
///  - cell_saturated: an independent fit of Y on B within each (z, w) cell.
/// B is the basis expansion of X (plus a constant column when X has none).
enum class OutcomeDesign { interacted, cell_saturated };

struct LearnerSpec {
  LearnerKind kind = LearnerKind::ridge;
  double ridge_lambda = 1e-4;
  /// Neighbour count for knn; defaults to ceil(n^0.4) with n the training size.
  std::optional<std::size_t> knn_k;
  FeatureRecipe::Kind basis = FeatureRecipe::Kind::linear;
  std::size_t spline_knots = 5;
  OutcomeDesign design = OutcomeDesign::interacted;
};

/// Fitted regression m(X, Z, W) = E[Y | X, Z, W].
///
/// The knn learner always works cell by cell on standardized X, so it needs every
/// predicted cell populated.
class OutcomeModel {
 public:
  /// Predictions with (Z, W) forced to (z, w) on every row.
  Vector predict(const Matrix& x, int z, int w) const;
  /// Predictions at each row's own (Z, W).
  Vector predict(const Matrix& x, const Eigen::VectorXi& z, const Eigen::VectorXi& w) const;

  const LearnerSpec& spec() const { return spec_; }
  const FeatureRecipe& recipe() const { return recipe_; }

 private:
  friend OutcomeModel fit_outcome_model(const EncouragementDataset& data, const LearnerSpec& spec);

  struct Neighbours {
    Matrix x;  // standardized
    Vector y;
  };

  Matrix basis(const Matrix& x) const;
  Vector predict_cell(const Matrix& x, int z, int w) const;

  LearnerSpec spec_;
  FeatureRecipe recipe_;
  bool add_constant_ = false;
  std::size_t input_dim_ = 0;
  // ridge, interacted
  Vector beta_;
  // ridge, cell_saturated: index 2*z + w
  std::array<Vector, 4> cell_beta_;
  // knn
  std::array<Neighbours, 4> cells_;
  Vector center_;
  Vector scale_;
  std::size_t k_ = 1;
};

OutcomeModel fit_outcome_model(const EncouragementDataset& data, const LearnerSpec& spec = {});

/// Ridge regression (F'F + lambda I) b = F'y. Throws SingularInformation when the
/// system is not positive definite.
Vector fit_ridge(const Matrix& features, const Vector& y, double lambda, const Vector* weights = nullptr);

/// m*(X, Z, W) = m(X, Z, W) + (e_W - W) / p_C * (m(X, 1) - m(X, 0)), where
/// m(X, z) marginalizes m(X, z, w) over P(W | X, z): P(W=1 | Z=0) = p_AT and
/// P(W=1 | Z=1) = p_AT + p_C. `e_z` is the nudge propensity each row was drawn with.
Vector m_star_hat(const OutcomeModel& model, const ComplianceProbabilities& probs, const EncouragementDataset& data,
                  const NudgePropensity& e_z);

enum class EstimationMethod { plugin, crossfit, wls };

std::string to_string(EstimationMethod method);
EstimationMethod parse_estimation_method(const std::string& name);

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.95;
  std::size_t replicates = 0;
  /// Resamples that could not be estimated and were redrawn.
  std::size_t redraws = 0;
};

/// gamma_hat with the complier mean it is contrasted against; tau_late is
/// x_bar_c' gamma_hat, computed once by make_estimate.
struct LateEstimate {
  Vector gamma_hat;
  Vector x_bar_c;
  double tau_late = 0.0;
  std::optional<ConfidenceInterval> ci;
  EstimationMethod method = EstimationMethod::plugin;
  nlohmann::json diagnostics = nlohmann::json::object();
};

LateEstimate make_estimate(Vector gamma_hat, Vector x_bar_c, EstimationMethod method);

/// Residual-on-residual regression gamma = (X' D Omega D X)^{-1} X' D Omega r with
/// D = diag(W - e_W) and Omega = diag(weights) (identity when null).
Vector residual_regression(const Matrix& x, const Eigen::VectorXi& w, const Vector& e_w, const Vector& response,
                           const Vector* weights = nullptr);

/// Plug-in estimator: regress Y - m*_hat on (W - e_W_hat) X.
LateEstimate estimate_gamma_plugin(const EncouragementDataset& data, const ComplianceProbabilities& probs,
                                   const NudgePropensity& e_z, const OutcomeModel& model);

/// Nuisance functions evaluated on a target set.
struct Nuisances {
  ComplianceProbabilities probs;
  Vector m_star;
};

/// Source of (compliance probabilities, m*) for cross-fitting. Simulations inject
/// the true nuisances through this interface.
class NuisanceFitter {
 public:
  virtual ~NuisanceFitter() = default;
  /// Fits on `train` and evaluates on `target`, whose rows were nudged with `target_e_z`.
  virtual Nuisances fit_predict(const EncouragementDataset& train, const EncouragementDataset& target,
                                const NudgePropensity& target_e_z) const = 0;
};

struct NuisanceSpec {
  ComplianceOptions compliance;
  LearnerSpec outcome;
  /// Use this compliance model instead of refitting (e.g. the archived pilot fit).
  std::optional<ComplianceModel> fixed_compliance;
};

class LearnedNuisances : public NuisanceFitter {
 public:
  explicit LearnedNuisances(NuisanceSpec spec) : spec_(std::move(spec)) {}
  Nuisances fit_predict(const EncouragementDataset& train, const EncouragementDataset& target,
                        const NudgePropensity& target_e_z) const override;

 private:
  NuisanceSpec spec_;
};

/// K-fold cross-fitting: one nuisance fit per fold; rows of fold k use the average
/// of the fits from the other folds, gamma^(k) is fit on fold k alone and gamma_hat
/// averages the K fold estimates. The complier mean uses the cross-fitted p_C.
LateEstimate estimate_gamma_crossfit(const EncouragementDataset& data, const NuisanceFitter& nuisances,
                                     const NudgePropensity& e_z, std::size_t folds, std::uint64_t seed);

/// Row-to-fold assignment by a seeded shuffle; fold sizes differ by at most one.
std::vector<std::size_t> assign_folds(std::size_t n, std::size_t folds, std::uint64_t seed);

/// Weighted variant with weights 1 / sigma2(X_i, W_i) selected by the realized W_i.
LateEstimate estimate_gamma_wls(const EncouragementDataset& data, const ComplianceProbabilities& probs,
                                const NudgePropensity& e_z, const OutcomeModel& model,
                                const std::pair<Vector, Vector>& sigma2);

/// Squared residuals (Y - m_hat(X, Z, W))^2 regressed on the outcome basis and W;
/// returns predictions at W=0 and W=1, floored at 1e-8.
std::pair<Vector, Vector> estimate_variance_fn(const EncouragementDataset& data, const OutcomeModel& model);

/// tau estimator evaluated on a (resampled) dataset and its per-row nudge propensities.
using TauEstimator = std::function<double(const EncouragementDataset&, const NudgePropensity&)>;

struct BootstrapOptions {
  std::size_t replicates = 400;
  double level = 0.95;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  /// Degenerate resamples tolerated per replicate before giving up.
  std::size_t max_redraws_per_replicate = 20;
};

/// Nonparametric row bootstrap of tau with a percentile interval. Replicate r
/// draws from its own stream seeded by (seed, r, attempt), so the result does not
/// depend on the thread count. Resamples whose estimate throws are redrawn and
/// counted; ResampleDegenerate when a replicate exhausts its redraws.
ConfidenceInterval bootstrap_ci(const EncouragementDataset& data, const NudgePropensity& e_z,
                                const TauEstimator& estimator, const BootstrapOptions& options);

/// Type-7 (linear interpolation) sample quantile of sorted values.
double sorted_quantile(const std::vector<double>& sorted, double p);

/// End-to-end estimator configuration used by the CLI and the simulation.
struct EstimatorSpec {
  EstimationMethod method = EstimationMethod::plugin;
  std::size_t folds = 5;
  NuisanceSpec nuisance;
  /// Bootstrap replicates; 0 disables the interval.
  std::size_t bootstrap = 0;
  double level = 0.95;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

/// Refits compliance on `data` (unless the spec fixes a model), fits the outcome
/// model and applies the chosen estimator; adds the bootstrap interval when asked.
LateEstimate estimate_late(const EncouragementDataset& data, const NudgePropensity& e_z, const EstimatorSpec& spec);

/// Point estimate of tau only (no bootstrap); the function bootstrapped by estimate_late.
double estimate_tau(const EncouragementDataset& data, const NudgePropensity& e_z, const EstimatorSpec& spec);

void to_json(nlohmann::json& j, const LateEstimate& estimate);
void to_json(nlohmann::json& j, const LearnerSpec& spec);
void to_json(nlohmann::json& j, const EstimatorSpec& spec);

}  // namespace nudge
