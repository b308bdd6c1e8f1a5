#include "nudge/compliance.hpp"

#include <cmath>

#include "nudge/csv.hpp"
#include "nudge/error.hpp"

namespace nudge {

namespace {

constexpr int kMaxNewtonIterations = 100;
constexpr int kMaxHalvings = 30;
constexpr double kStepTolerance = 1e-10;

// log(1 + exp(eta)) without overflow.
double log1p_exp(double eta) { return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

double penalized_loglik(const Matrix& f, const Vector& y, const Vector& beta, double lambda) {
  const Vector eta = f * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y[i] * eta[i] - log1p_exp(eta[i]);
  return ll - 0.5 * lambda * beta.squaredNorm();
}

}  // namespace

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

Vector fit_logistic(const Matrix& features, const Eigen::VectorXi& labels, double ridge_lambda) {
  const auto m = features.rows();
  const auto d = features.cols();
  if (m < 1 || d < 1) throw Error(ErrorCode::DimensionMismatch, "logistic fit needs at least one row and column");
  if (labels.size() != m) throw Error(ErrorCode::LengthMismatch, "labels must have one entry per row");
  if (!features.allFinite()) throw Error(ErrorCode::DomainViolation, "non-finite logistic features");
  if (!(ridge_lambda >= 0.0)) throw Error(ErrorCode::DomainViolation, "ridge_lambda must be nonnegative");
  const Vector y = labels.cast<double>();

  Vector beta = Vector::Zero(d);
  double ll = penalized_loglik(features, y, beta, ridge_lambda);
  for (int iter = 0; iter < kMaxNewtonIterations; ++iter) {
    const Vector eta = features * beta;
    Vector p(m), weight(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      p[i] = sigmoid(eta[i]);
      weight[i] = p[i] * (1.0 - p[i]);
    }
    const Vector grad = features.transpose() * (y - p) - ridge_lambda * beta;
    Matrix hessian = features.transpose() * weight.asDiagonal() * features;
    hessian.diagonal().array() += ridge_lambda;

    Eigen::LLT<Matrix> llt(hessian);
    const double scale = std::max(hessian.diagonal().maxCoeff(), 1e-300);
    if (llt.info() != Eigen::Success || (llt.matrixLLT().diagonal().array().square() <= 1e-14 * scale).any()) {
      throw Error(ErrorCode::SingularHessian,
                  "penalized Hessian is not positive definite; increase ridge_lambda (data may be separable)");
    }
    const Vector step = llt.solve(grad);

    double t = 1.0;
    Vector candidate = beta + step;
    double candidate_ll = penalized_loglik(features, y, candidate, ridge_lambda);
    int halvings = 0;
    while (!(candidate_ll >= ll) && halvings < kMaxHalvings) {
      t *= 0.5;
      candidate = beta + t * step;
      candidate_ll = penalized_loglik(features, y, candidate, ridge_lambda);
      ++halvings;
    }
    if (!(candidate_ll >= ll)) {
      // No ascent along the Newton direction. A negligible Newton decrement means we
      // are at the optimum up to rounding (coefficient steps can stay large on
      // small-scale spline columns).
      if (grad.dot(step) <= 1e-10 * std::max(1.0, std::abs(ll))) return beta;
      throw Error(ErrorCode::NoConvergence, "logistic Newton step failed to improve the likelihood");
    }
    const double change = (t * step).lpNorm<Eigen::Infinity>();
    beta = candidate;
    ll = candidate_ll;
    if (change < kStepTolerance) return beta;
  }
  throw Error(ErrorCode::NoConvergence, "logistic regression did not converge in 100 iterations");
}

ComplianceModel fit_compliance(const EncouragementDataset& pilot, const ComplianceOptions& options) {
  pilot.validate();
  if (!(options.clip_epsilon > 0.0 && options.clip_epsilon <= 0.1)) {
    throw Error(ErrorCode::DomainViolation, "clip_epsilon must lie in (0, 0.1]");
  }
  std::vector<std::size_t> arm0, arm1;
  for (Eigen::Index i = 0; i < pilot.x.rows(); ++i) {
    (pilot.z[i] == 0 ? arm0 : arm1).push_back(static_cast<std::size_t>(i));
  }
  if (arm0.empty() || arm1.empty()) {
    throw Error(ErrorCode::EmptyArm, std::string("pilot has no rows with Z=") + (arm0.empty() ? "0" : "1"));
  }

  ComplianceModel model;
  model.ridge_lambda = options.ridge_lambda;
  model.clip_epsilon = options.clip_epsilon;
  model.input_dim = pilot.cols();
  if (options.recipe == FeatureRecipe::Kind::linear) {
    model.recipe = FeatureRecipe::linear();
  } else {
    if (!pilot.score_col) throw Error(ErrorCode::SchemaViolation, "spline compliance features need a score column");
    model.recipe = FeatureRecipe::with_quantile_knots(options.recipe, *pilot.score_col, pilot.score(),
                                                      options.spline_knots);
  }

  const Matrix features = model.recipe.expand(pilot.x);
  auto fit_arm = [&](const std::vector<std::size_t>& rows) {
    Matrix f(static_cast<Eigen::Index>(rows.size()), features.cols());
    Eigen::VectorXi labels(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      f.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
      labels[static_cast<Eigen::Index>(r)] = pilot.w[static_cast<Eigen::Index>(rows[r])];
    }
    return fit_logistic(f, labels, options.ridge_lambda);
  };
  model.beta_z0 = fit_arm(arm0);
  model.beta_z1 = fit_arm(arm1);
  return model;
}

ComplianceModel fit_compliance(const EncouragementDataset& pilot, double ridge_lambda, double clip_epsilon) {
  ComplianceOptions options;
  options.ridge_lambda = ridge_lambda;
  options.clip_epsilon = clip_epsilon;
  return fit_compliance(pilot, options);
}

ComplianceProbabilities clip_probabilities(const Vector& p_at_raw, const Vector& p_at_plus_c_raw,
                                           double clip_epsilon) {
  const auto n = p_at_raw.size();
  if (p_at_plus_c_raw.size() != n) throw Error(ErrorCode::LengthMismatch, "raw curve lengths differ");
  ComplianceProbabilities probs;
  probs.p_at.resize(n);
  probs.p_nt.resize(n);
  probs.p_c.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double c = std::clamp(p_at_plus_c_raw[i] - p_at_raw[i], clip_epsilon, 1.0);
    const double at = std::clamp(p_at_raw[i], 0.0, 1.0 - c);
    probs.p_c[i] = c;
    probs.p_at[i] = at;
    probs.p_nt[i] = std::max(0.0, 1.0 - at - c);
  }
  return probs;
}

ComplianceProbabilities predict_probs(const ComplianceModel& model, const Matrix& x) {
  if (model.input_dim != 0 && static_cast<std::size_t>(x.cols()) != model.input_dim) {
    throw Error(ErrorCode::DimensionMismatch, "covariate count differs from the fitted compliance model");
  }
  const Matrix features = model.recipe.expand(x);
  if (features.cols() != model.beta_z0.size() || features.cols() != model.beta_z1.size()) {
    throw Error(ErrorCode::DimensionMismatch, "feature count differs from the fitted compliance model");
  }
  const Vector eta0 = features * model.beta_z0;
  const Vector eta1 = features * model.beta_z1;
  const Vector p_at = eta0.unaryExpr([](double e) { return sigmoid(e); });
  const Vector p_at_c = eta1.unaryExpr([](double e) { return sigmoid(e); });
  return clip_probabilities(p_at, p_at_c, model.clip_epsilon);
}

ComplierMean complier_mean(const Matrix& x, const ComplianceProbabilities& probs) {
  const auto n = x.rows();
  if (probs.p_c.size() != n) throw Error(ErrorCode::LengthMismatch, "probabilities must have one entry per row");
  if (n == 0) throw Error(ErrorCode::LengthMismatch, "complier mean of an empty matrix");
  ComplierMean out;
  out.p_c_marginal = probs.p_c.mean();
  out.x_bar_c = x.transpose() * probs.p_c / (static_cast<double>(n) * out.p_c_marginal);
  return out;
}

void to_json(nlohmann::json& j, const ComplianceModel& model) {
  j = nlohmann::json{
      {"beta_z0", std::vector<double>(model.beta_z0.data(), model.beta_z0.data() + model.beta_z0.size())},
      {"beta_z1", std::vector<double>(model.beta_z1.data(), model.beta_z1.data() + model.beta_z1.size())},
      {"ridge_lambda", model.ridge_lambda},
      {"clip_epsilon", model.clip_epsilon},
      {"features", model.recipe},
      {"input_dim", model.input_dim},
  };
}

void from_json(const nlohmann::json& j, ComplianceModel& model) {
  const auto b0 = j.at("beta_z0").get<std::vector<double>>();
  const auto b1 = j.at("beta_z1").get<std::vector<double>>();
  model.beta_z0 = Eigen::Map<const Vector>(b0.data(), static_cast<Eigen::Index>(b0.size()));
  model.beta_z1 = Eigen::Map<const Vector>(b1.data(), static_cast<Eigen::Index>(b1.size()));
  model.ridge_lambda = j.at("ridge_lambda").get<double>();
  model.clip_epsilon = j.at("clip_epsilon").get<double>();
  model.recipe = j.contains("features") ? j.at("features").get<FeatureRecipe>() : FeatureRecipe::linear();
  model.input_dim = j.value("input_dim", static_cast<std::size_t>(model.beta_z0.size()));
  if (!model.beta_z0.allFinite() || !model.beta_z1.allFinite() || !(model.clip_epsilon > 0.0)) {
    throw Error(ErrorCode::DomainViolation, "compliance model JSON holds invalid values");
  }
}

void save_model(const ComplianceModel& model, const std::filesystem::path& path) {
  csv::write_file(path, nlohmann::json(model).dump(2) + "\n");
}

ComplianceModel load_model(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(csv::read_file(path)).get<ComplianceModel>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, "invalid compliance model JSON: " + std::string(e.what()));
  }
}

}  // namespace nudge
