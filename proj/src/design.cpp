#include "nudge/design.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nudge/csv.hpp"
#include "nudge/error.hpp"
#include "nudge/isotonic.hpp"

namespace nudge {

namespace {

constexpr double kPivotTolerance = 1e-13;

// Cholesky of a symmetric matrix that must be positive definite; a pivot that
// loses 13 digits relative to its diagonal entry counts as singular.
bool factor_spd(const Matrix& m, Eigen::LLT<Matrix>& llt) {
  llt.compute(m);
  if (llt.info() != Eigen::Success) return false;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index j = 0; j < m.rows(); ++j) {
    const double pivot = l(j, j) * l(j, j);
    if (!(pivot > kPivotTolerance * m(j, j)) || !std::isfinite(pivot)) return false;
  }
  return true;
}

Matrix weighted_gram(const Matrix& x, const Vector& weights) {
  return x.transpose() * (x.array().colwise() * weights.array()).matrix();
}

double criterion_scale(const DesignProblem& prob) { return prob.scale_n ? static_cast<double>(prob.size()) : 1.0; }

void check_lengths(const Vector& e_z, const DesignProblem& prob) {
  if (static_cast<std::size_t>(e_z.size()) != prob.size()) {
    throw Error(ErrorCode::LengthMismatch, "nudge propensity length differs from the cohort size");
  }
}

std::vector<std::size_t> ascending_score_order(const Vector& score) {
  std::vector<std::size_t> order(static_cast<std::size_t>(score.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score[static_cast<Eigen::Index>(a)] < score[static_cast<Eigen::Index>(b)];
  });
  return order;
}

Vector clip_unit(const Vector& v) { return v.cwiseMax(0.0).cwiseMin(1.0); }

Vector isotonic_in_order(const Vector& v, const std::vector<std::size_t>& order, const Vector* weights = nullptr) {
  std::vector<double> buffer(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) buffer[k] = v[static_cast<Eigen::Index>(order[k])];
  if (weights) {
    std::vector<double> w(order.size());
    for (std::size_t k = 0; k < order.size(); ++k) w[k] = (*weights)[static_cast<Eigen::Index>(order[k])];
    pava_nondecreasing(buffer, w);
  } else {
    pava_nondecreasing(buffer);
  }
  Vector out(v.size());
  for (std::size_t k = 0; k < order.size(); ++k) out[static_cast<Eigen::Index>(order[k])] = buffer[k];
  return out;
}

Vector project_hyperplane(const Vector& v, const Vector& a, double b) {
  return v - a * ((a.dot(v) - b) / a.squaredNorm());
}

Vector project_halfspace(const Vector& v, const Vector& s, double t) {
  const double value = s.dot(v);
  if (value >= t) return v;
  return v + s * ((t - value) / s.squaredNorm());
}

// Root of a nonincreasing (sign = -1) or nondecreasing (sign = +1) continuous
// function on [lo, hi] by the Illinois variant of regula falsi. Returns the
// abscissa of the final iterate on the requested side of the root.
template <typename F>
double illinois(F&& f, double lo, double hi, double f_lo, double f_hi, double f_tol, bool prefer_nonnegative) {
  int side = 0;
  double best_x = prefer_nonnegative ? (f_lo >= 0.0 ? lo : hi) : (std::abs(f_lo) < std::abs(f_hi) ? lo : hi);
  for (int iter = 0; iter < 300; ++iter) {
    double x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
    const double fx = f(x);
    if (prefer_nonnegative) {
      if (fx >= 0.0) best_x = x;
      if (fx >= 0.0 && fx <= f_tol) return x;
    } else if (std::abs(fx) <= f_tol) {
      return x;
    }
    // Keep [lo, hi] bracketing the sign change of f.
    if ((fx > 0.0) == (f_lo > 0.0)) {
      lo = x;
      f_lo = fx;
      if (side == -1) f_hi *= 0.5;
      side = -1;
    } else {
      hi = x;
      f_hi = fx;
      if (side == 1) f_lo *= 0.5;
      side = 1;
    }
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(lo), std::abs(hi), 1.0})) break;
    if (!prefer_nonnegative) best_x = std::abs(f_lo) < std::abs(f_hi) ? lo : hi;
  }
  return best_x;
}

}  // namespace

DesignProblem::DesignProblem(Matrix x_in, ComplianceProbabilities probs_in, Vector x_bar_c_in, bool scale_n_in)
    : x(std::move(x_in)), probs(std::move(probs_in)), x_bar_c(std::move(x_bar_c_in)), scale_n(scale_n_in) {
  if (x.rows() < 1 || x.cols() < 1) throw Error(ErrorCode::DimensionMismatch, "design cohort is empty");
  if (probs.p_c.size() != x.rows() || probs.p_at.size() != x.rows()) {
    throw Error(ErrorCode::LengthMismatch, "compliance probabilities must have one entry per cohort row");
  }
  if (x_bar_c.size() != x.cols()) throw Error(ErrorCode::DimensionMismatch, "complier mean length differs from d");
  Eigen::LLT<Matrix> llt;
  if (!factor_spd(x.transpose() * x, llt)) {
    throw Error(ErrorCode::SingularInformation, "design covariates do not have full column rank");
  }
}

DesignProblem DesignProblem::from_cohort(Matrix x, ComplianceProbabilities probs, bool scale_n) {
  Vector xbar = complier_mean(x, probs).x_bar_c;
  return DesignProblem(std::move(x), std::move(probs), std::move(xbar), scale_n);
}

ObjectiveEvaluation evaluate_objective(const Vector& e_z, const DesignProblem& prob, double propensity_floor,
                                       bool with_gradient) {
  check_lengths(e_z, prob);
  Vector e_w = prob.probs.p_at + prob.probs.p_c.cwiseProduct(e_z);
  if (propensity_floor > 0.0) e_w = e_w.cwiseMax(propensity_floor).cwiseMin(1.0 - propensity_floor);
  const Vector bernoulli_var = e_w.cwiseProduct((1.0 - e_w.array()).matrix());

  Eigen::LLT<Matrix> llt;
  if (!factor_spd(weighted_gram(prob.x, bernoulli_var), llt)) {
    throw Error(ErrorCode::SingularInformation,
                "X' diag(e_W (1 - e_W)) X is not positive definite; treatment propensities are degenerate");
  }
  const Vector s = llt.solve(prob.x_bar_c);
  const double scale = criterion_scale(prob);

  ObjectiveEvaluation out;
  out.value = scale * prob.x_bar_c.dot(s);
  if (with_gradient) {
    const Vector leverage = prob.x * s;
    out.gradient = -scale * (prob.probs.p_c.array() * (1.0 - 2.0 * e_w.array()) * leverage.array().square()).matrix();
  }
  return out;
}

double objective(const NudgePropensity& e_z, const DesignProblem& prob) {
  return evaluate_objective(e_z.values(), prob, 0.0, false).value;
}

Vector gradient(const NudgePropensity& e_z, const DesignProblem& prob) {
  return evaluate_objective(e_z.values(), prob, 0.0, true).gradient;
}

double gain_reference_sum(const ConstraintSet& cons, const ComplianceProbabilities& probs) {
  if (!cons.gain) throw Error(ErrorCode::PreconditionViolated, "no gain constraint configured");
  if (cons.gain->reference_sum) return *cons.gain->reference_sum;
  if (static_cast<std::size_t>(cons.score.size()) != probs.size()) {
    throw Error(ErrorCode::LengthMismatch, "gain constraint needs one score per row");
  }
  Vector encouraged;
  if (cons.budget) {
    encouraged = rdd_design(cons.score, *cons.budget, probs).values();
  } else {
    encouraged = closed_form_unconstrained(probs).values();
    if (!(encouraged.array() == 1.0).any()) {
      throw Error(ErrorCode::PreconditionViolated,
                  "gain constraint without a budget needs an explicit reference sum "
                  "(the unconstrained optimum encourages no row with certainty)");
    }
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < encouraged.size(); ++i) {
    if (encouraged[i] == 1.0) total += cons.score[i];
  }
  return total;
}

ResolvedConstraints resolve_constraints(const ConstraintSet& cons, const ComplianceProbabilities& probs) {
  ResolvedConstraints rc;
  rc.n = probs.size();
  const double n = static_cast<double>(rc.n);
  if (cons.budget) {
    const double mu = *cons.budget;
    if (!(mu >= 0.0 && mu <= 1.0)) throw Error(ErrorCode::Infeasible, "budget must lie in [0, 1]");
    rc.budget_weights = probs.p_c;
    double target = n * mu - probs.p_at.sum();
    const double reachable = probs.p_c.sum();
    const double slack = 1e-12 * std::max(1.0, n);
    if (target < -slack || target > reachable + slack) {
      throw Error(ErrorCode::Infeasible, "budget " + csv::format_double(mu) + " is outside the attainable range [" +
                                             csv::format_double(probs.p_at.mean()) + ", " +
                                             csv::format_double((probs.p_at.sum() + reachable) / n) + "]");
    }
    rc.budget_target = std::clamp(target, 0.0, reachable);
  }
  if (cons.monotone_in_score || cons.gain) {
    if (static_cast<std::size_t>(cons.score.size()) != rc.n) {
      throw Error(ErrorCode::LengthMismatch, "ordering and gain constraints need one score per row");
    }
    if (!cons.score.allFinite()) throw Error(ErrorCode::DomainViolation, "non-finite score");
  }
  if (cons.monotone_in_score) rc.order = ascending_score_order(cons.score);
  if (cons.gain) {
    const double rho = cons.gain->rho;
    if (!(rho >= 0.0 && rho <= 1.0)) throw Error(ErrorCode::DomainViolation, "gain rho must lie in [0, 1]");
    rc.gain_threshold = rho * gain_reference_sum(cons, probs);
    rc.gain_weights = cons.score;
  }
  return rc;
}

double ResolvedConstraints::max_violation(const Vector& e) const {
  double worst = std::max((-e.array()).maxCoeff(), (e.array() - 1.0).maxCoeff());
  worst = std::max(worst, 0.0);
  if (budget_target) {
    worst = std::max(worst, std::abs(budget_weights.dot(e) - *budget_target) / static_cast<double>(n));
  }
  for (std::size_t k = 1; k < order.size(); ++k) {
    worst = std::max(worst, e[static_cast<Eigen::Index>(order[k - 1])] - e[static_cast<Eigen::Index>(order[k])]);
  }
  if (gain_threshold) {
    const double shortfall = *gain_threshold - gain_weights.dot(e);
    worst = std::max(worst, shortfall / std::max(1.0, std::abs(*gain_threshold)));
  }
  return worst;
}

Vector project(const Vector& v, const ConstraintSet& cons, const ComplianceProbabilities& probs, double tol) {
  return project(v, resolve_constraints(cons, probs), tol);
}

Vector project(const Vector& v, const ResolvedConstraints& rc, double tol, int max_sweeps) {
  if (static_cast<std::size_t>(v.size()) != rc.n) throw Error(ErrorCode::LengthMismatch, "projection input length");
  std::vector<std::function<Vector(const Vector&)>> sets;
  sets.emplace_back(clip_unit);
  if (rc.budget_target) {
    sets.emplace_back([&](const Vector& u) { return project_hyperplane(u, rc.budget_weights, *rc.budget_target); });
  }
  if (rc.monotone()) sets.emplace_back([&](const Vector& u) { return isotonic_in_order(u, rc.order); });
  if (rc.gain_threshold) {
    sets.emplace_back([&](const Vector& u) { return project_halfspace(u, rc.gain_weights, *rc.gain_threshold); });
  }
  if (sets.size() == 1) return clip_unit(v);

  std::vector<Vector> increments(sets.size(), Vector::Zero(v.size()));
  Vector x = v;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const Vector previous = x;
    for (std::size_t k = 0; k < sets.size(); ++k) {
      const Vector y = x + increments[k];
      x = sets[k](y);
      increments[k] = y - x;
    }
    if ((x - previous).lpNorm<Eigen::Infinity>() < tol) return x;
  }
  throw Error(ErrorCode::Infeasible, "alternating projections did not settle; the constraint intersection looks empty");
}

PolytopeProjector::PolytopeProjector(ResolvedConstraints rc, Vector metric)
    : rc_(std::move(rc)), metric_(std::move(metric)) {
  const auto n = static_cast<Eigen::Index>(rc_.n);
  if (metric_.size() == 0) metric_ = Vector::Ones(n);
  if (metric_.size() != n) throw Error(ErrorCode::LengthMismatch, "projection metric length");
  if (!(metric_.array() > 0.0).all() || !metric_.allFinite()) {
    throw Error(ErrorCode::DomainViolation, "projection metric must be positive");
  }
  if (rc_.budget_target) {
    if (!(rc_.budget_weights.array() > 0.0).all()) {
      throw Error(ErrorCode::DomainViolation, "budget weights (complier probabilities) must be positive");
    }
    budget_direction_ = rc_.budget_weights.cwiseQuotient(metric_);
  }
  if (rc_.gain_threshold) gain_direction_ = rc_.gain_weights.cwiseQuotient(metric_);
}

Vector PolytopeProjector::project_box_order(const Vector& u) const {
  return rc_.monotone() ? clip_unit(isotonic_in_order(u, rc_.order, &metric_)) : clip_unit(u);
}

Vector PolytopeProjector::solve_budget(const Vector& u) const {
  if (!rc_.budget_target) return project_box_order(u);
  const Vector& a = rc_.budget_weights;
  const Vector& dir = budget_direction_;
  const double b = *rc_.budget_target;
  auto residual = [&](double lambda) { return a.dot(project_box_order(u - lambda * dir)) - b; };

  // At lo every coordinate saturates at 1, at hi every coordinate reaches 0.
  const double lo = ((u.array() - 1.0) / dir.array()).minCoeff() - 1.0;
  const double hi = (u.array() / dir.array()).maxCoeff() + 1.0;
  const double f_lo = residual(lo);
  const double f_hi = residual(hi);
  const double f_tol = 1e-13 * std::max(1.0, a.sum());
  if (std::abs(f_lo) <= f_tol) return project_box_order(u - lo * dir);
  if (std::abs(f_hi) <= f_tol) return project_box_order(u - hi * dir);
  const double lambda = illinois(residual, lo, hi, f_lo, f_hi, f_tol, false);
  return project_box_order(u - lambda * dir);
}

Vector PolytopeProjector::operator()(const Vector& v) const {
  if (static_cast<std::size_t>(v.size()) != rc_.n) throw Error(ErrorCode::LengthMismatch, "projection input length");
  if (!rc_.gain_threshold) return solve_budget(v);

  const Vector& s = rc_.gain_weights;
  const Vector& dir = gain_direction_;
  const double t = *rc_.gain_threshold;
  const double g_tol = 1e-13 * std::max(1.0, std::abs(t));
  auto surplus = [&](double kappa) { return s.dot(solve_budget(v + kappa * dir)) - t; };

  const double f0 = surplus(0.0);
  if (f0 >= -g_tol) return solve_budget(v);
  const double unit = (v.cwiseAbs().maxCoeff() + 1.0) / std::max(dir.cwiseAbs().maxCoeff(), 1e-300);
  double hi = unit;
  double f_hi = surplus(hi);
  while (f_hi < 0.0) {
    hi *= 4.0;
    if (hi > 1e15 * unit) {
      throw Error(ErrorCode::Infeasible, "gain constraint cannot be met together with the other constraints");
    }
    f_hi = surplus(hi);
  }
  const double kappa = illinois(surplus, 0.0, hi, f0, f_hi, g_tol, true);
  return solve_budget(v + kappa * dir);
}

DesignSolution solve(const DesignProblem& prob, const ConstraintSet& cons, const SolverOptions& opts) {
  const ResolvedConstraints rc = resolve_constraints(cons, prob.probs);
  const auto n = static_cast<Eigen::Index>(prob.size());
  const bool scaled = opts.scaled_metric && opts.projection == ProjectionMethod::exact &&
                      (prob.probs.p_c.array() > 0.0).all();
  const Vector metric = scaled ? Vector(prob.probs.p_c.array().square()) : Vector::Ones(n);

  std::function<Vector(const Vector&)> proj;
  std::function<Vector(const Vector&)> euclidean;
  if (opts.projection == ProjectionMethod::exact) {
    proj = [p = PolytopeProjector(rc, metric)](const Vector& v) { return p(v); };
    euclidean = [p = PolytopeProjector(rc)](const Vector& v) { return p(v); };
  } else {
    proj = [&rc, tol = opts.projection_tolerance](const Vector& v) { return project(v, rc, tol); };
    euclidean = proj;
  }
  auto eval = [&](const Vector& e, bool with_gradient) {
    return evaluate_objective(e, prob, opts.propensity_floor, with_gradient);
  };

  Vector e = proj(Vector::Constant(n, 0.5));
  ObjectiveEvaluation current = eval(e, true);
  double step = opts.initial_step;
  int stalled = 0;
  int iter = 0;
  bool hit_limit = true;
  for (; iter < opts.max_iterations; ++iter) {
    const Vector direction_full = current.gradient.cwiseQuotient(metric);
    // Objective differences below this are rounding noise; without the allowance
    // the search stalls long before the iterate settles.
    const double noise = 16.0 * std::numeric_limits<double>::epsilon() * std::abs(current.value);
    bool accepted = false;
    Vector candidate;
    ObjectiveEvaluation next;
    double move = 0.0;
    for (int h = 0; h <= opts.max_halvings; ++h) {
      candidate = proj(e - step * direction_full);
      const Vector direction = candidate - e;
      move = direction.lpNorm<Eigen::Infinity>();
      if (move == 0.0) break;
      try {
        next = eval(candidate, true);
      } catch (const Error& err) {
        if (err.code() != ErrorCode::SingularInformation) throw;
        step *= 0.5;
        continue;
      }
      if (next.value <= current.value + opts.armijo_c * current.gradient.dot(direction) + noise) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // The projected step vanished or no trial step decreased the objective:
      // stationary to working precision.
      hit_limit = false;
      break;
    }
    const double decrease = (current.value - next.value) / std::max(std::abs(current.value), 1e-300);
    stalled = (decrease < opts.relative_tolerance) ? stalled + 1 : 0;

    const Vector s = candidate - e;
    const Vector y = next.gradient - current.gradient;
    if (opts.spectral_steps) {
      const double sy = s.dot(y);
      step = sy > 0.0 ? s.cwiseProduct(metric).dot(s) / sy : step * 4.0;
      step = std::clamp(step, 1e-20, 1e20);
    } else {
      step = opts.initial_step;
    }
    e = std::move(candidate);
    current = std::move(next);
    if (stalled >= opts.patience && move < opts.step_tolerance) {
      hit_limit = false;
      ++iter;
      break;
    }
  }

  DesignSolution out;
  out.e_z_star = NudgePropensity(clip_unit(e));
  out.objective = eval(out.e_z_star.values(), false).value;
  out.iterations = iter;
  out.kkt_residual = (e - euclidean(e - current.gradient)).lpNorm<Eigen::Infinity>();
  out.projection_residual = rc.max_violation(out.e_z_star.values());
  out.status = hit_limit ? SolveStatus::iteration_limit : SolveStatus::converged;
  return out;
}

NudgePropensity closed_form_unconstrained(const ComplianceProbabilities& probs) {
  Vector e(static_cast<Eigen::Index>(probs.size()));
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double at = probs.p_at[i];
    const double c = probs.p_c[i];
    if (at > 0.5) {
      e[i] = 0.0;
    } else if (at + c < 0.5) {
      e[i] = 1.0;
    } else {
      e[i] = std::clamp((1.0 - 2.0 * at) / (2.0 * c), 0.0, 1.0);
    }
  }
  return NudgePropensity(std::move(e));
}

NudgePropensity closed_form_budget(const ComplianceProbabilities& probs, double mu) {
  if (probs.size() == 0) throw Error(ErrorCode::PreconditionViolated, "empty cohort");
  if (probs.p_c.maxCoeff() - probs.p_c.minCoeff() > 1e-9) {
    throw Error(ErrorCode::PreconditionViolated, "closed-form budget design needs a constant complier probability");
  }
  const double value = (mu - probs.p_at.mean()) / probs.p_c.mean();
  if (value < -1e-12 || value > 1.0 + 1e-12) {
    throw Error(ErrorCode::PreconditionViolated,
                "(mu - mean p_AT) / p_C = " + csv::format_double(value) + " is outside [0, 1]");
  }
  return NudgePropensity::constant(probs.size(), std::clamp(value, 0.0, 1.0));
}

NudgePropensity rdd_design(const Vector& score, double mu, const ComplianceProbabilities& probs) {
  const auto n = static_cast<std::size_t>(score.size());
  if (probs.size() != n) throw Error(ErrorCode::LengthMismatch, "score and probabilities differ in length");
  if (!score.allFinite()) throw Error(ErrorCode::DomainViolation, "non-finite score");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score[static_cast<Eigen::Index>(a)] > score[static_cast<Eigen::Index>(b)];
  });
  const double limit = static_cast<double>(n) * mu + 1e-12 * std::max(1.0, static_cast<double>(n));
  double treated = probs.p_at.sum();
  Vector e = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t idx : order) {
    const auto i = static_cast<Eigen::Index>(idx);
    if (treated + probs.p_c[i] > limit) break;
    treated += probs.p_c[i];
    e[i] = 1.0;
  }
  return NudgePropensity(std::move(e));
}

std::pair<Vector, Vector> regularize_variances(const Vector& sigma2_w0, const Vector& sigma2_w1) {
  if (sigma2_w0.size() != sigma2_w1.size()) throw Error(ErrorCode::LengthMismatch, "variance vectors differ in length");
  Vector s0 = sigma2_w0;
  Vector s1 = sigma2_w1;
  for (Eigen::Index i = 0; i < s0.size(); ++i) {
    if (!(s0[i] > 0.0 && s1[i] > 0.0) || !std::isfinite(s0[i]) || !std::isfinite(s1[i])) {
      throw Error(ErrorCode::NonpositiveVariance, "variances must be positive and finite (row " + std::to_string(i) + ")");
    }
    const double ratio = s1[i] / s0[i];
    if (ratio >= 0.5 && ratio <= 2.0) continue;
    const double tau2 = 1.5 / (1.0 / s0[i] + 1.0 / s1[i]);
    if (s0[i] < s1[i]) {
      s0[i] = tau2;
      s1[i] = 2.0 * tau2;
    } else {
      s1[i] = tau2;
      s0[i] = 2.0 * tau2;
    }
  }
  return {s0, s1};
}

double hetero_weight(double e_w, double sigma2_w0, double sigma2_w1) {
  return e_w * (1.0 - e_w) * (1.0 - e_w) / sigma2_w1 + (1.0 - e_w) * e_w * e_w / sigma2_w0;
}

double hetero_second_derivative(double e_w, double sigma2_w0, double sigma2_w1) {
  return (6.0 * e_w - 4.0) / sigma2_w1 + (2.0 - 6.0 * e_w) / sigma2_w0;
}

double objective_wls(const NudgePropensity& e_z, const DesignProblem& prob, const Vector& sigma2_w0,
                     const Vector& sigma2_w1) {
  check_lengths(e_z.values(), prob);
  if (static_cast<std::size_t>(sigma2_w0.size()) != prob.size() ||
      static_cast<std::size_t>(sigma2_w1.size()) != prob.size()) {
    throw Error(ErrorCode::LengthMismatch, "variance vectors must have one entry per cohort row");
  }
  const Vector e_w = induced_treatment_propensity(prob.probs, e_z);
  Vector weights(e_w.size());
  for (Eigen::Index i = 0; i < e_w.size(); ++i) {
    if (!(sigma2_w0[i] > 0.0 && sigma2_w1[i] > 0.0)) {
      throw Error(ErrorCode::NonpositiveVariance, "variances must be positive (row " + std::to_string(i) + ")");
    }
    const double ratio = sigma2_w1[i] / sigma2_w0[i];
    if (ratio < 0.5 - 1e-12 || ratio > 2.0 + 1e-12) {
      throw Error(ErrorCode::RatioOutOfRange, "variance ratio " + csv::format_double(ratio) + " at row " +
                                                  std::to_string(i) + " is outside [1/2, 2]; regularize first");
    }
    weights[i] = hetero_weight(e_w[i], sigma2_w0[i], sigma2_w1[i]);
  }
  Eigen::LLT<Matrix> llt;
  if (!factor_spd(weighted_gram(prob.x, weights), llt)) {
    throw Error(ErrorCode::SingularInformation, "weighted information matrix is not positive definite");
  }
  return criterion_scale(prob) * prob.x_bar_c.dot(llt.solve(prob.x_bar_c));
}

std::string to_string(SolveStatus status) {
  return status == SolveStatus::converged ? "converged" : "iteration_limit";
}

void to_json(nlohmann::json& j, const DesignSolution& solution) {
  const Vector& e = solution.e_z_star.values();
  j = nlohmann::json{
      {"e_z_star", std::vector<double>(e.data(), e.data() + e.size())},
      {"objective", solution.objective},
      {"iterations", solution.iterations},
      {"kkt_residual", solution.kkt_residual},
      {"projection_residual", solution.projection_residual},
      {"status", to_string(solution.status)},
  };
}

std::string format_design_csv(const NudgePropensity& e_z) {
  std::string out = "e_z\n";
  for (std::size_t i = 0; i < e_z.size(); ++i) {
    out += csv::format_double(e_z[i]);
    out += '\n';
  }
  return out;
}

void write_design_csv(const NudgePropensity& e_z, const std::filesystem::path& path) {
  csv::write_file(path, format_design_csv(e_z));
}

NudgePropensity load_design_csv(const std::filesystem::path& path) {
  const auto rows = csv::parse(csv::read_file(path));
  if (rows.empty()) throw Error(ErrorCode::MalformedCsv, "empty design file");
  const auto& header = rows.front();
  auto it = std::find(header.begin(), header.end(), "e_z");
  if (it == header.end()) throw Error(ErrorCode::SchemaViolation, "design file needs an 'e_z' column");
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<double> values;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() == 1 && rows[r][0].empty()) continue;
    double v = 0.0;
    if (rows[r].size() != header.size() || !csv::parse_double(rows[r][col], v)) {
      throw Error(ErrorCode::MalformedCsv, "design file line " + std::to_string(r + 1) + " is not numeric");
    }
    values.push_back(v);
  }
  return NudgePropensity(Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
}

}  // namespace nudge
