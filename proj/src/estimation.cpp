#include "nudge/estimation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "nudge/design.hpp"
#include "nudge/error.hpp"

namespace nudge {

namespace {

constexpr double kVarianceFloor = 1e-8;
constexpr std::uint32_t kBootstrapStream = 0xB0075u;
constexpr std::uint32_t kFoldStream = 0xF01D5u;

int cell_index(int z, int w) { return 2 * z + w; }

NudgePropensity subset_propensity(const NudgePropensity& e_z, const std::vector<std::size_t>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Eigen::Index>(r)] = e_z[rows[r]];
  return NudgePropensity(std::move(out));
}

Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

Vector rows_of(const Vector& v, const std::vector<std::size_t>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Eigen::Index>(r)] = v[static_cast<Eigen::Index>(rows[r])];
  return out;
}

bool has_constant_column(const Matrix& x) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if ((x.col(j).array() == 1.0).all()) return true;
  }
  return false;
}

void require_outcome(const EncouragementDataset& data) {
  if (!data.has_outcome()) throw Error(ErrorCode::SchemaViolation, "estimation needs the outcome column Y");
}

void check_rows(const EncouragementDataset& data, const ComplianceProbabilities& probs, const NudgePropensity& e_z) {
  if (probs.size() != data.rows() || e_z.size() != data.rows()) {
    throw Error(ErrorCode::LengthMismatch, "probabilities, nudge propensities and data differ in row count");
  }
}

// Mean outcome of the k nearest training rows (Euclidean), ties broken by row index.
Vector knn_predict(const Matrix& train_x, const Vector& train_y, const Matrix& query, std::size_t k) {
  const auto m = static_cast<std::size_t>(train_x.rows());
  const std::size_t kk = std::min(k, m);
  Vector out(query.rows());
  std::vector<std::pair<double, std::size_t>> dist(m);
  for (Eigen::Index q = 0; q < query.rows(); ++q) {
    for (std::size_t i = 0; i < m; ++i) {
      dist[i] = {(train_x.row(static_cast<Eigen::Index>(i)) - query.row(q)).squaredNorm(), i};
    }
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk));
    double total = 0.0;
    for (std::size_t j = 0; j < kk; ++j) total += train_y[static_cast<Eigen::Index>(dist[j].second)];
    out[q] = total / static_cast<double>(kk);
  }
  return out;
}

std::size_t default_k(std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::pow(static_cast<double>(n), 0.4))));
}

std::mt19937_64 stream(std::uint32_t tag, std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{tag,
                    static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

Vector fit_ridge(const Matrix& features, const Vector& y, double lambda, const Vector* weights) {
  if (features.rows() != y.size()) throw Error(ErrorCode::LengthMismatch, "ridge features and response differ in rows");
  if (!(lambda >= 0.0)) throw Error(ErrorCode::DomainViolation, "ridge penalty must be nonnegative");
  Matrix gram;
  Vector rhs;
  if (weights) {
    const Matrix weighted = features.array().colwise() * weights->array();
    gram = features.transpose() * weighted;
    rhs = weighted.transpose() * y;
  } else {
    gram = features.transpose() * features;
    rhs = features.transpose() * y;
  }
  gram.diagonal().array() += lambda;
  // Symmetric equilibration; the solution is unchanged, only the conditioning improves.
  const Vector diag = gram.diagonal();
  if (!(diag.array() > 0.0).all()) throw Error(ErrorCode::SingularInformation, "ridge system has an all-zero column");
  const Vector s = diag.cwiseSqrt().cwiseInverse();
  const Matrix scaled = s.asDiagonal() * gram * s.asDiagonal();
  Eigen::LLT<Matrix> llt(scaled);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::SingularInformation, "ridge normal equations are not positive definite");
  }
  const auto& l = llt.matrixLLT();
  for (Eigen::Index j = 0; j < l.rows(); ++j) {
    if (!(l(j, j) * l(j, j) > 1e-14)) {
      throw Error(ErrorCode::SingularInformation, "ridge normal equations are numerically singular");
    }
  }
  return s.asDiagonal() * llt.solve(s.asDiagonal() * rhs);
}

Matrix OutcomeModel::basis(const Matrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim_) {
    throw Error(ErrorCode::DimensionMismatch, "covariate count differs from the fitted outcome model");
  }
  Matrix b = recipe_.expand(x);
  if (!add_constant_) return b;
  Matrix out(b.rows(), b.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(b.cols()) = b;
  return out;
}

Vector OutcomeModel::predict_cell(const Matrix& x, int z, int w) const {
  if ((z != 0 && z != 1) || (w != 0 && w != 1)) throw Error(ErrorCode::DomainViolation, "cell must be binary");
  if (spec_.kind == LearnerKind::knn) {
    const Neighbours& cell = cells_[static_cast<std::size_t>(cell_index(z, w))];
    if (static_cast<std::size_t>(x.cols()) != input_dim_) {
      throw Error(ErrorCode::DimensionMismatch, "covariate count differs from the fitted outcome model");
    }
    const Matrix q = (x.rowwise() - center_.transpose()).array().rowwise() / scale_.transpose().array();
    return knn_predict(cell.x, cell.y, q, k_);
  }
  const Matrix b = basis(x);
  if (spec_.design == OutcomeDesign::cell_saturated) return b * cell_beta_[static_cast<std::size_t>(cell_index(z, w))];
  const Eigen::Index p = b.cols();
  Vector coef = beta_.head(p);
  if (z == 1) coef += beta_.segment(p, p);
  if (w == 1) coef += beta_.segment(2 * p, p);
  return b * coef;
}

Vector OutcomeModel::predict(const Matrix& x, int z, int w) const { return predict_cell(x, z, w); }

Vector OutcomeModel::predict(const Matrix& x, const Eigen::VectorXi& z, const Eigen::VectorXi& w) const {
  if (z.size() != x.rows() || w.size() != x.rows()) throw Error(ErrorCode::LengthMismatch, "Z/W length differs from X");
  std::array<Vector, 4> cells;
  Vector out(x.rows());
  for (int c = 0; c < 4; ++c) {
    const int zc = c / 2, wc = c % 2;
    std::vector<std::size_t> rows;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (z[i] == zc && w[i] == wc) rows.push_back(static_cast<std::size_t>(i));
    }
    if (rows.empty()) continue;
    const Vector pred = predict_cell(rows_of(x, rows), zc, wc);
    for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Eigen::Index>(rows[r])] = pred[static_cast<Eigen::Index>(r)];
  }
  return out;
}

OutcomeModel fit_outcome_model(const EncouragementDataset& data, const LearnerSpec& spec) {
  data.validate();
  require_outcome(data);
  OutcomeModel model;
  model.spec_ = spec;
  model.input_dim_ = data.cols();
  const Vector& y = *data.y;

  std::array<std::vector<std::size_t>, 4> cell_rows;
  for (Eigen::Index i = 0; i < data.x.rows(); ++i) {
    cell_rows[static_cast<std::size_t>(cell_index(data.z[i], data.w[i]))].push_back(static_cast<std::size_t>(i));
  }
  const bool needs_cells = spec.kind == LearnerKind::knn || spec.design == OutcomeDesign::cell_saturated;
  if (needs_cells) {
    for (int c = 0; c < 4; ++c) {
      if (cell_rows[static_cast<std::size_t>(c)].empty()) {
        throw Error(ErrorCode::EmptyCell, "no rows with (Z, W) = (" + std::to_string(c / 2) + ", " +
                                              std::to_string(c % 2) + "); this learner fits every cell separately");
      }
    }
  }

  if (spec.kind == LearnerKind::knn) {
    model.center_ = data.x.colwise().mean().transpose();
    model.scale_ = Vector::Ones(data.x.cols());
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) {
      const double sd = std::sqrt((data.x.col(j).array() - model.center_[j]).square().mean());
      if (sd > 0.0) model.scale_[j] = sd;
    }
    const Matrix standardized =
        (data.x.rowwise() - model.center_.transpose()).array().rowwise() / model.scale_.transpose().array();
    model.k_ = spec.knn_k.value_or(default_k(data.rows()));
    if (model.k_ == 0) throw Error(ErrorCode::DomainViolation, "knn needs k >= 1");
    for (int c = 0; c < 4; ++c) {
      const auto& rows = cell_rows[static_cast<std::size_t>(c)];
      model.cells_[static_cast<std::size_t>(c)] = {rows_of(standardized, rows), rows_of(y, rows)};
    }
    return model;
  }

  if (spec.basis == FeatureRecipe::Kind::linear) {
    model.recipe_ = FeatureRecipe::linear();
  } else {
    if (!data.score_col) throw Error(ErrorCode::SchemaViolation, "spline outcome basis needs a score column");
    model.recipe_ = FeatureRecipe::with_quantile_knots(spec.basis, *data.score_col, data.score(), spec.spline_knots);
  }
  model.add_constant_ = !has_constant_column(data.x);
  const Matrix b = model.basis(data.x);

  if (spec.design == OutcomeDesign::cell_saturated) {
    for (int c = 0; c < 4; ++c) {
      const auto& rows = cell_rows[static_cast<std::size_t>(c)];
      model.cell_beta_[static_cast<std::size_t>(c)] = fit_ridge(rows_of(b, rows), rows_of(y, rows), spec.ridge_lambda);
    }
    return model;
  }
  const Eigen::Index p = b.cols();
  Matrix f(b.rows(), 3 * p);
  f.leftCols(p) = b;
  f.middleCols(p, p) = b.array().colwise() * data.z.cast<double>().array();
  f.rightCols(p) = b.array().colwise() * data.w.cast<double>().array();
  model.beta_ = fit_ridge(f, y, spec.ridge_lambda);
  return model;
}

Vector m_star_hat(const OutcomeModel& model, const ComplianceProbabilities& probs, const EncouragementDataset& data,
                  const NudgePropensity& e_z) {
  check_rows(data, probs, e_z);
  const Vector e_w = induced_treatment_propensity(probs, e_z);
  const Vector m00 = model.predict(data.x, 0, 0);
  const Vector m01 = model.predict(data.x, 0, 1);
  const Vector m10 = model.predict(data.x, 1, 0);
  const Vector m11 = model.predict(data.x, 1, 1);
  const Vector m_obs = model.predict(data.x, data.z, data.w);
  Vector out(e_w.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double p0 = probs.p_at[i];
    const double p1 = probs.p_at[i] + probs.p_c[i];
    const double m_z0 = m01[i] * p0 + m00[i] * (1.0 - p0);
    const double m_z1 = m11[i] * p1 + m10[i] * (1.0 - p1);
    out[i] = m_obs[i] + (e_w[i] - data.w[i]) / probs.p_c[i] * (m_z1 - m_z0);
  }
  return out;
}

std::string to_string(EstimationMethod method) {
  switch (method) {
    case EstimationMethod::plugin: return "plugin";
    case EstimationMethod::crossfit: return "crossfit";
    case EstimationMethod::wls: return "wls";
  }
  return "plugin";
}

EstimationMethod parse_estimation_method(const std::string& name) {
  if (name == "plugin") return EstimationMethod::plugin;
  if (name == "crossfit") return EstimationMethod::crossfit;
  if (name == "wls") return EstimationMethod::wls;
  throw Error(ErrorCode::InvalidConfig, "unknown estimation method '" + name + "' (plugin, crossfit, wls)");
}

LateEstimate make_estimate(Vector gamma_hat, Vector x_bar_c, EstimationMethod method) {
  if (gamma_hat.size() != x_bar_c.size()) throw Error(ErrorCode::DimensionMismatch, "gamma and complier mean lengths");
  LateEstimate est;
  est.tau_late = x_bar_c.dot(gamma_hat);
  est.gamma_hat = std::move(gamma_hat);
  est.x_bar_c = std::move(x_bar_c);
  est.method = method;
  return est;
}

Vector residual_regression(const Matrix& x, const Eigen::VectorXi& w, const Vector& e_w, const Vector& response,
                           const Vector* weights) {
  const auto n = x.rows();
  if (w.size() != n || e_w.size() != n || response.size() != n || (weights && weights->size() != n)) {
    throw Error(ErrorCode::LengthMismatch, "residual regression inputs differ in length");
  }
  const Vector d = w.cast<double>() - e_w;
  const Matrix xd = x.array().colwise() * d.array();
  Matrix gram;
  Vector rhs;
  if (weights) {
    const Matrix xdw = xd.array().colwise() * weights->array();
    gram = xd.transpose() * xdw;
    rhs = xdw.transpose() * response;
  } else {
    gram = xd.transpose() * xd;
    rhs = xd.transpose() * response;
  }
  Eigen::LLT<Matrix> llt(gram);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const auto& l = llt.matrixLLT();
    for (Eigen::Index j = 0; j < l.rows() && ok; ++j) ok = l(j, j) * l(j, j) > 1e-13 * gram(j, j) && gram(j, j) > 0.0;
  }
  if (!ok) {
    throw Error(ErrorCode::SingularInformation, "X' D^2 X is singular: treatment residuals W - e_W carry no signal");
  }
  return llt.solve(rhs);
}

LateEstimate estimate_gamma_plugin(const EncouragementDataset& data, const ComplianceProbabilities& probs,
                                   const NudgePropensity& e_z, const OutcomeModel& model) {
  require_outcome(data);
  check_rows(data, probs, e_z);
  const Vector e_w = induced_treatment_propensity(probs, e_z);
  const Vector response = *data.y - m_star_hat(model, probs, data, e_z);
  Vector gamma = residual_regression(data.x, data.w, e_w, response);
  return make_estimate(std::move(gamma), complier_mean(data.x, probs).x_bar_c, EstimationMethod::plugin);
}

Nuisances LearnedNuisances::fit_predict(const EncouragementDataset& train, const EncouragementDataset& target,
                                        const NudgePropensity& target_e_z) const {
  const ComplianceModel cm = spec_.fixed_compliance ? *spec_.fixed_compliance : fit_compliance(train, spec_.compliance);
  Nuisances out;
  out.probs = predict_probs(cm, target.x);
  const OutcomeModel om = fit_outcome_model(train, spec_.outcome);
  out.m_star = m_star_hat(om, out.probs, target, target_e_z);
  return out;
}

std::vector<std::size_t> assign_folds(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw Error(ErrorCode::FoldTooSmall, "cross-fitting needs K >= 2 folds");
  if (n < 2 * folds) {
    throw Error(ErrorCode::FoldTooSmall, "cross-fitting with K=" + std::to_string(folds) + " needs at least " +
                                             std::to_string(2 * folds) + " rows, got " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto rng = stream(kFoldStream, seed, n, folds);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> fold(n);
  for (std::size_t k = 0; k < n; ++k) fold[perm[k]] = k % folds;
  return fold;
}

LateEstimate estimate_gamma_crossfit(const EncouragementDataset& data, const NuisanceFitter& nuisances,
                                     const NudgePropensity& e_z, std::size_t folds, std::uint64_t seed) {
  data.validate();
  require_outcome(data);
  const std::size_t n = data.rows();
  if (e_z.size() != n) throw Error(ErrorCode::LengthMismatch, "nudge propensities and data differ in row count");
  const std::vector<std::size_t> fold_of = assign_folds(n, folds, seed);
  std::vector<std::vector<std::size_t>> members(folds);
  for (std::size_t i = 0; i < n; ++i) members[fold_of[i]].push_back(i);

  const auto m = static_cast<Eigen::Index>(n);
  ComplianceProbabilities avg{Vector::Zero(m), Vector::Zero(m), Vector::Zero(m)};
  Vector m_star = Vector::Zero(m);
  const double share = 1.0 / static_cast<double>(folds - 1);
  for (std::size_t j = 0; j < folds; ++j) {
    std::vector<std::size_t> others;
    others.reserve(n - members[j].size());
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of[i] != j) others.push_back(i);
    }
    const Nuisances fit = nuisances.fit_predict(data.subset(members[j]), data.subset(others), subset_propensity(e_z, others));
    for (std::size_t r = 0; r < others.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(others[r]);
      const auto rr = static_cast<Eigen::Index>(r);
      avg.p_at[i] += share * fit.probs.p_at[rr];
      avg.p_nt[i] += share * fit.probs.p_nt[rr];
      avg.p_c[i] += share * fit.probs.p_c[rr];
      m_star[i] += share * fit.m_star[rr];
    }
  }

  const Vector e_w = induced_treatment_propensity(avg, e_z);
  const Vector response = *data.y - m_star;
  Vector gamma = Vector::Zero(data.x.cols());
  for (std::size_t k = 0; k < folds; ++k) {
    const auto& rows = members[k];
    gamma += residual_regression(rows_of(data.x, rows), data.subset(rows).w, rows_of(e_w, rows), rows_of(response, rows));
  }
  gamma /= static_cast<double>(folds);
  LateEstimate est = make_estimate(std::move(gamma), complier_mean(data.x, avg).x_bar_c, EstimationMethod::crossfit);
  est.diagnostics["folds"] = folds;
  return est;
}

LateEstimate estimate_gamma_wls(const EncouragementDataset& data, const ComplianceProbabilities& probs,
                                const NudgePropensity& e_z, const OutcomeModel& model,
                                const std::pair<Vector, Vector>& sigma2) {
  require_outcome(data);
  check_rows(data, probs, e_z);
  const auto& [s0, s1] = sigma2;
  if (static_cast<std::size_t>(s0.size()) != data.rows() || static_cast<std::size_t>(s1.size()) != data.rows()) {
    throw Error(ErrorCode::LengthMismatch, "variance vectors must have one entry per row");
  }
  Vector weights(s0.size());
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const double v = data.w[i] == 1 ? s1[i] : s0[i];
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw Error(ErrorCode::NonpositiveVariance, "variance at row " + std::to_string(i) + " is not positive");
    }
    weights[i] = 1.0 / v;
  }
  const Vector e_w = induced_treatment_propensity(probs, e_z);
  const Vector response = *data.y - m_star_hat(model, probs, data, e_z);
  Vector gamma = residual_regression(data.x, data.w, e_w, response, &weights);
  return make_estimate(std::move(gamma), complier_mean(data.x, probs).x_bar_c, EstimationMethod::wls);
}

std::pair<Vector, Vector> estimate_variance_fn(const EncouragementDataset& data, const OutcomeModel& model) {
  require_outcome(data);
  const Vector resid2 = (*data.y - model.predict(data.x, data.z, data.w)).array().square();
  const LearnerSpec& spec = model.spec();
  Vector s0, s1;
  if (spec.kind == LearnerKind::knn) {
    std::array<std::vector<std::size_t>, 2> groups;
    for (Eigen::Index i = 0; i < data.x.rows(); ++i) groups[static_cast<std::size_t>(data.w[i])].push_back(static_cast<std::size_t>(i));
    for (const auto& g : groups) {
      if (g.empty()) throw Error(ErrorCode::EmptyCell, "variance function needs rows with W=0 and W=1");
    }
    const Vector center = data.x.colwise().mean().transpose();
    Vector scale = Vector::Ones(data.x.cols());
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) {
      const double sd = std::sqrt((data.x.col(j).array() - center[j]).square().mean());
      if (sd > 0.0) scale[j] = sd;
    }
    const Matrix xs = (data.x.rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
    const std::size_t k = spec.knn_k.value_or(default_k(data.rows()));
    s0 = knn_predict(rows_of(xs, groups[0]), rows_of(resid2, groups[0]), xs, k);
    s1 = knn_predict(rows_of(xs, groups[1]), rows_of(resid2, groups[1]), xs, k);
  } else {
    FeatureRecipe recipe = model.recipe();
    Matrix b = recipe.expand(data.x);
    if (!has_constant_column(data.x)) {
      Matrix with_const(b.rows(), b.cols() + 1);
      with_const.col(0).setOnes();
      with_const.rightCols(b.cols()) = b;
      b = std::move(with_const);
    }
    const Eigen::Index p = b.cols();
    Matrix f(b.rows(), 2 * p);
    f.leftCols(p) = b;
    f.rightCols(p) = b.array().colwise() * data.w.cast<double>().array();
    const Vector beta = fit_ridge(f, resid2, spec.ridge_lambda);
    s0 = b * beta.head(p);
    s1 = b * (beta.head(p) + beta.tail(p));
  }
  return {s0.cwiseMax(kVarianceFloor), s1.cwiseMax(kVarianceFloor)};
}

double sorted_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::DomainViolation, "quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

ConfidenceInterval bootstrap_ci(const EncouragementDataset& data, const NudgePropensity& e_z,
                                const TauEstimator& estimator, const BootstrapOptions& options) {
  if (options.replicates < 100) throw Error(ErrorCode::DomainViolation, "bootstrap needs at least 100 replicates");
  if (!(options.level > 0.0 && options.level < 1.0)) throw Error(ErrorCode::DomainViolation, "level must lie in (0, 1)");
  const std::size_t n = data.rows();
  if (e_z.size() != n) throw Error(ErrorCode::LengthMismatch, "nudge propensities and data differ in row count");

  std::vector<double> taus(options.replicates);
  std::vector<std::size_t> redraws(options.replicates, 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    std::vector<std::size_t> rows(n);
    for (std::size_t r = next++; r < options.replicates; r = next++) {
      bool done = false;
      for (std::size_t attempt = 0; attempt <= options.max_redraws_per_replicate && !done; ++attempt) {
        auto rng = stream(kBootstrapStream, options.seed, r, attempt);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (auto& row : rows) row = pick(rng);
        try {
          taus[r] = estimator(data.subset(rows), subset_propensity(e_z, rows));
          done = std::isfinite(taus[r]);
        } catch (const Error&) {
          done = false;
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
        if (!done) ++redraws[r];
      }
      if (!done) {
        std::lock_guard lock(failure_mutex);
        if (!failure) {
          failure = std::make_exception_ptr(Error(
              ErrorCode::ResampleDegenerate, "bootstrap replicate " + std::to_string(r) + " stayed degenerate after " +
                                                 std::to_string(options.max_redraws_per_replicate) + " redraws"));
        }
        return;
      }
    }
  };

  const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(options.replicates)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::sort(taus.begin(), taus.end());
  const double alpha = 1.0 - options.level;
  ConfidenceInterval ci;
  ci.lo = sorted_quantile(taus, alpha / 2.0);
  ci.hi = sorted_quantile(taus, 1.0 - alpha / 2.0);
  ci.level = options.level;
  ci.replicates = options.replicates;
  ci.redraws = std::accumulate(redraws.begin(), redraws.end(), std::size_t{0});
  return ci;
}

namespace {

LateEstimate point_estimate(const EncouragementDataset& data, const NudgePropensity& e_z, const EstimatorSpec& spec) {
  require_outcome(data);
  if (spec.method == EstimationMethod::crossfit) {
    return estimate_gamma_crossfit(data, LearnedNuisances(spec.nuisance), e_z, spec.folds, spec.seed);
  }
  const ComplianceModel cm =
      spec.nuisance.fixed_compliance ? *spec.nuisance.fixed_compliance : fit_compliance(data, spec.nuisance.compliance);
  const ComplianceProbabilities probs = predict_probs(cm, data.x);
  const OutcomeModel om = fit_outcome_model(data, spec.nuisance.outcome);
  if (spec.method == EstimationMethod::plugin) return estimate_gamma_plugin(data, probs, e_z, om);

  const auto raw = estimate_variance_fn(data, om);
  const auto regularized = regularize_variances(raw.first, raw.second);
  LateEstimate est = estimate_gamma_wls(data, probs, e_z, om, regularized);
  const Vector raw_ratio = raw.second.cwiseQuotient(raw.first);
  const Vector reg_ratio = regularized.second.cwiseQuotient(regularized.first);
  est.diagnostics["variance_ratio_raw"] = {{"min", raw_ratio.minCoeff()}, {"max", raw_ratio.maxCoeff()}};
  est.diagnostics["variance_ratio_regularized"] = {{"min", reg_ratio.minCoeff()}, {"max", reg_ratio.maxCoeff()}};
  est.diagnostics["rows_regularized"] = (raw_ratio.array() < 0.5 || raw_ratio.array() > 2.0).count();
  return est;
}

}  // namespace

double estimate_tau(const EncouragementDataset& data, const NudgePropensity& e_z, const EstimatorSpec& spec) {
  return point_estimate(data, e_z, spec).tau_late;
}

LateEstimate estimate_late(const EncouragementDataset& data, const NudgePropensity& e_z, const EstimatorSpec& spec) {
  data.validate();
  LateEstimate est = point_estimate(data, e_z, spec);
  est.diagnostics["n"] = data.rows();
  est.diagnostics["compliance"] = spec.nuisance.fixed_compliance ? "fixed" : "refit";
  if (spec.bootstrap > 0) {
    BootstrapOptions opts;
    opts.replicates = spec.bootstrap;
    opts.level = spec.level;
    opts.seed = spec.seed;
    opts.threads = spec.threads;
    est.ci = bootstrap_ci(
        data, e_z, [&spec](const EncouragementDataset& d, const NudgePropensity& e) { return estimate_tau(d, e, spec); },
        opts);
  }
  return est;
}

void to_json(nlohmann::json& j, const LateEstimate& estimate) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  j = nlohmann::json{
      {"method", to_string(estimate.method)},
      {"gamma_hat", vec(estimate.gamma_hat)},
      {"x_bar_c", vec(estimate.x_bar_c)},
      {"tau_late", estimate.tau_late},
      {"ci", nullptr},
      {"diagnostics", estimate.diagnostics},
  };
  if (estimate.ci) {
    j["ci"] = {{"lo", estimate.ci->lo},
               {"hi", estimate.ci->hi},
               {"level", estimate.ci->level},
               {"replicates", estimate.ci->replicates},
               {"redraws", estimate.ci->redraws}};
  }
}

void to_json(nlohmann::json& j, const LearnerSpec& spec) {
  j = nlohmann::json{
      {"learner", spec.kind == LearnerKind::ridge ? "ridge" : "knn"},
      {"ridge_lambda", spec.ridge_lambda},
      {"basis", to_string(spec.basis)},
      {"design", spec.design == OutcomeDesign::interacted ? "interacted" : "cell_saturated"},
  };
  if (spec.knn_k) j["knn_k"] = *spec.knn_k;
}

void to_json(nlohmann::json& j, const EstimatorSpec& spec) {
  j = nlohmann::json{
      {"method", to_string(spec.method)},
      {"folds", spec.folds},
      {"outcome", spec.nuisance.outcome},
      {"compliance_basis", to_string(spec.nuisance.compliance.recipe)},
      {"bootstrap", spec.bootstrap},
      {"level", spec.level},
      {"seed", spec.seed},
  };
}

}  // namespace nudge
