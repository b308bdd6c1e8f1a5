#pragma once

#include <filesystem>

#include "json.hpp"
#include "nudge/dataset.hpp"
#include "nudge/features.hpp"

namespace nudge {

/// Ridge-penalized logistic regression by damped Newton (IRLS).
///
/// Maximizes sum_i [y_i x_i'b - log(1 + exp(x_i'b))] - (lambda/2) |b|^2 over all
/// coefficients. Each Newton step is halved up to 30 times until the penalized
/// log-likelihood stops decreasing; iteration ends when the largest coefficient
/// change drops below 1e-10. Throws SingularHessian when the penalized Hessian is
/// not positive definite and NoConvergence after 100 iterations.
Vector fit_logistic(const Matrix& features, const Eigen::VectorXi& labels, double ridge_lambda);

double sigmoid(double eta);

struct ComplianceOptions {
  double ridge_lambda = 1e-4;
  double clip_epsilon = 1e-3;
  FeatureRecipe::Kind recipe = FeatureRecipe::Kind::linear;
  std::size_t spline_knots = 5;
};

/// Two logistic fits: P(W=1 | Z=0, X) = p_AT and P(W=1 | Z=1, X) = p_AT + p_C.
struct ComplianceModel {
  Vector beta_z0;
  Vector beta_z1;
  double ridge_lambda = 1e-4;
  double clip_epsilon = 1e-3;
  FeatureRecipe recipe;
  /// Covariate count the model was fitted on (before feature expansion).
  std::size_t input_dim = 0;
};

ComplianceModel fit_compliance(const EncouragementDataset& pilot, const ComplianceOptions& options = {});
ComplianceModel fit_compliance(const EncouragementDataset& pilot, double ridge_lambda, double clip_epsilon);

/// Applies the fitted curves and enforces the no-defier / some-complier floor:
/// p_C is clipped to [clip_epsilon, 1], p_AT to [0, 1 - p_C], p_NT takes the rest.
ComplianceProbabilities predict_probs(const ComplianceModel& model, const Matrix& x);

/// Clipping applied by predict_probs, exposed for callers holding raw curve values.
ComplianceProbabilities clip_probabilities(const Vector& p_at_raw, const Vector& p_at_plus_c_raw, double clip_epsilon);

struct ComplierMean {
  Vector x_bar_c;
  double p_c_marginal = 0.0;
};

/// Complier-weighted covariate mean: (1/n) sum_i X_i p_C(X_i) / mean(p_C).
ComplierMean complier_mean(const Matrix& x, const ComplianceProbabilities& probs);

void to_json(nlohmann::json& j, const ComplianceModel& model);
void from_json(const nlohmann::json& j, ComplianceModel& model);
void save_model(const ComplianceModel& model, const std::filesystem::path& path);
ComplianceModel load_model(const std::filesystem::path& path);

}  // namespace nudge
