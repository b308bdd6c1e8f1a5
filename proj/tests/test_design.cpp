#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "nudge/compliance.hpp"
#include "nudge/design.hpp"
#include "support.hpp"

using namespace nudge;

namespace {

double max_abs(const Vector& v) { return v.cwiseAbs().maxCoeff(); }

DesignProblem random_problem(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  Matrix x = testing::random_design_matrix(rng, n, d);
  return DesignProblem::from_cohort(std::move(x), testing::random_probs(rng, n));
}

// Curves used throughout the synthetic benchmark.
ComplianceProbabilities exponential_curves(const Vector& r) {
  ComplianceProbabilities p;
  p.p_at = (0.8 * (-5.0 * (1.0 - r.array())).exp() + 0.05).matrix();
  p.p_nt = (0.8 * (-5.0 * r.array()).exp() + 0.05).matrix();
  p.p_c = (1.0 - p.p_at.array() - p.p_nt.array()).matrix();
  return p;
}

}  // namespace

TEST_CASE("objective hand instance and homogeneity") {
  Matrix x = Matrix::Ones(2, 1);
  const auto probs = testing::constant_probs(2, 0.0, 1.0);
  const DesignProblem prob(x, probs, Vector::Ones(1));
  CHECK(objective(NudgePropensity::constant(2, 0.5), prob) == doctest::Approx(4.0).epsilon(1e-14));

  const DesignProblem doubled(x, probs, Vector::Constant(1, 2.0));
  CHECK(objective(NudgePropensity::constant(2, 0.5), doubled) == doctest::Approx(16.0).epsilon(1e-14));

  CHECK_ERROR_CODE(objective(NudgePropensity::constant(2, 0.0), prob), ErrorCode::SingularInformation);
  CHECK_ERROR_CODE(objective(NudgePropensity::constant(3, 0.5), prob), ErrorCode::LengthMismatch);
}

TEST_CASE("DesignProblem rejects rank-deficient covariates") {
  Matrix x(4, 2);
  x << 1, 2, 1, 2, 1, 2, 1, 2;
  CHECK_ERROR_CODE(DesignProblem(x, testing::constant_probs(4, 0.1, 0.5), Vector::Ones(2)),
                   ErrorCode::SingularInformation);
  CHECK_ERROR_CODE(DesignProblem(Matrix::Ones(4, 1), testing::constant_probs(3, 0.1, 0.5), Vector::Ones(1)),
                   ErrorCode::LengthMismatch);
}

TEST_CASE("gradient vanishes where e_W = 1/2 and on rows without compliers") {
  std::mt19937_64 rng(1);
  Matrix x = testing::random_design_matrix(rng, 6, 2);
  auto probs = testing::random_probs(rng, 6);
  probs.p_c[3] = 0.0;
  probs.p_nt[3] = 1.0 - probs.p_at[3];
  // Choose e_z[0] so that e_W[0] = 1/2.
  probs.p_at[0] = 0.2;
  probs.p_c[0] = 0.6;
  probs.p_nt[0] = 0.2;
  Vector e = Vector::Constant(6, 0.4);
  e[0] = 0.5;
  const DesignProblem prob(x, probs, Vector::Ones(2));
  const Vector g = gradient(NudgePropensity(e), prob);
  CHECK(g[0] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("gradient matches central finite differences") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prob = random_problem(rng, 50, 5);
    const Vector e = testing::random_uniform(rng, 50, 0.1, 0.9);
    const Vector g = gradient(NudgePropensity(e), prob);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < 50; ++i) {
      Vector up = e, down = e;
      up[i] += h;
      down[i] -= h;
      const double fd = (objective(NudgePropensity(up), prob) - objective(NudgePropensity(down), prob)) / (2 * h);
      CHECK(std::abs(fd - g[i]) <= 1e-5 * std::max(std::abs(g[i]), 1e-3 * max_abs(g)));
    }
  }
}

TEST_CASE("projection examples") {
  const auto probs = testing::constant_probs(2, 0.1, 0.5);
  ConstraintSet box;
  Vector v(2);
  v << 1.5, -0.5;
  const Vector clipped = project(v, box, probs);
  CHECK(clipped[0] == 1.0);
  CHECK(clipped[1] == 0.0);

  ConstraintSet mono;
  mono.monotone_in_score = true;
  mono.score = Vector(2);
  mono.score << 0.1, 0.9;
  Vector w(2);
  w << 0.9, 0.1;
  const Vector pooled = project(w, mono, probs);
  CHECK(pooled[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(pooled[1] == doctest::Approx(0.5).epsilon(1e-9));
  const Vector pooled_exact = PolytopeProjector(resolve_constraints(mono, probs))(w);
  CHECK(max_abs(pooled_exact - pooled) < 1e-9);
}

TEST_CASE("Dykstra and the exact projector agree and both are idempotent and non-expansive") {
  std::mt19937_64 rng(8);
  const Eigen::Index n = 40;
  for (int trial = 0; trial < 12; ++trial) {
    const auto probs = testing::random_probs(rng, n, 0.1);
    ConstraintSet cons;
    cons.score = testing::random_uniform(rng, n);
    cons.monotone_in_score = trial % 2 == 0;
    if (trial % 3 != 0) cons.budget = probs.p_at.mean() + 0.5 * probs.p_c.mean();
    if (trial % 4 == 1) cons.gain = GainConstraint{0.9, std::nullopt};
    const auto rc = resolve_constraints(cons, probs);
    const PolytopeProjector exact(rc);

    const Vector u = testing::random_uniform(rng, n, -0.5, 1.5);
    const Vector v = testing::random_uniform(rng, n, -0.5, 1.5);
    const Vector pu = exact(u);
    const Vector pv = exact(v);
    const Vector du = project(u, rc, 1e-12, 200000);
    CHECK(max_abs(pu - du) < 1e-7);
    CHECK(rc.max_violation(pu) < 1e-10);
    CHECK(max_abs(exact(pu) - pu) < 1e-10);
    CHECK((pu - pv).norm() <= (u - v).norm() + 1e-9);
    // Variational inequality: (u - P u)'(y - P u) <= 0 for feasible y.
    CHECK((u - pu).dot(pv - pu) <= 1e-9);
  }
}

TEST_CASE("unconstrained solve reproduces the closed form") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prob = random_problem(rng, 120, 4);
    const auto sol = solve(prob, ConstraintSet{});
    const Vector oracle = closed_form_unconstrained(prob.probs).values();
    CHECK(max_abs(sol.e_z_star.values() - oracle) <= 1e-5);
    CHECK(sol.status == SolveStatus::converged);
    CHECK(sol.objective == doctest::Approx(objective(sol.e_z_star, prob)).epsilon(1e-15));
  }
}

TEST_CASE("budget solve with constant complier probability is constant") {
  std::mt19937_64 rng(321);
  for (int trial = 0; trial < 5; ++trial) {
    const auto probs = testing::constant_probs(150, 0.15, 0.6);
    const DesignProblem prob = DesignProblem::from_cohort(testing::random_design_matrix(rng, 150, 4), probs);
    ConstraintSet cons;
    cons.budget = 0.3 + 0.05 * trial;
    const auto sol = solve(prob, cons);
    const Vector oracle = closed_form_budget(probs, *cons.budget).values();
    CHECK(max_abs(sol.e_z_star.values() - oracle) <= 1e-4);
    CHECK(sol.projection_residual <= 1e-8);
  }
}

TEST_CASE("solve rejects an unreachable budget") {
  std::mt19937_64 rng(4);
  const auto prob = random_problem(rng, 30, 2);
  ConstraintSet cons;
  cons.budget = prob.probs.p_at.mean() - 0.01;
  CHECK_ERROR_CODE(solve(prob, cons), ErrorCode::Infeasible);
  cons.budget = (prob.probs.p_at + prob.probs.p_c).mean() + 0.01;
  CHECK_ERROR_CODE(solve(prob, cons), ErrorCode::Infeasible);
}

TEST_CASE("contradictory budget and explicit gain reference are infeasible") {
  std::mt19937_64 rng(6);
  const auto prob = random_problem(rng, 30, 2);
  ConstraintSet cons;
  cons.score = testing::random_uniform(rng, 30);
  cons.budget = prob.probs.p_at.mean() + 0.1 * prob.probs.p_c.mean();
  cons.gain = GainConstraint{1.0, cons.score.sum()};
  CHECK_ERROR_CODE(solve(prob, cons), ErrorCode::Infeasible);
}

TEST_CASE("closed forms") {
  auto single = testing::constant_probs(1, 0.1, 0.8);
  CHECK(closed_form_unconstrained(single)[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(closed_form_unconstrained(testing::constant_probs(1, 0.6, 0.3))[0] == 0.0);
  CHECK(closed_form_unconstrained(testing::constant_probs(1, 0.1, 0.2))[0] == 1.0);

  const auto flat = testing::constant_probs(5, 0.1, 0.5);
  CHECK(closed_form_budget(flat, 0.4)[2] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(closed_form_budget(flat, 0.1)[0] == doctest::Approx(0.0).epsilon(1e-14));
  auto varying = flat;
  varying.p_c[1] = 0.4;
  varying.p_nt[1] = 0.5;
  CHECK_ERROR_CODE(closed_form_budget(varying, 0.4), ErrorCode::PreconditionViolated);
  CHECK_ERROR_CODE(closed_form_budget(flat, 0.9), ErrorCode::PreconditionViolated);
}

TEST_CASE("rdd design") {
  Vector score(4);
  score << 0.3, 0.9, 0.1, 0.5;
  const auto half = rdd_design(score, 0.5, testing::constant_probs(4, 0.0, 1.0));
  CHECK(half[0] == 0.0);
  CHECK(half[1] == 1.0);
  CHECK(half[2] == 0.0);
  CHECK(half[3] == 1.0);
  CHECK(rdd_design(score, 1.0, testing::constant_probs(4, 0.2, 0.8)).values().minCoeff() == 1.0);

  Vector ties(3);
  ties << 0.5, 0.5, 0.5;
  const auto tie = rdd_design(ties, 1.0 / 3.0, testing::constant_probs(3, 0.0, 1.0));
  CHECK(tie[0] == 1.0);
  CHECK(tie[1] == 0.0);

  std::mt19937_64 rng(10);
  const Vector r = testing::random_uniform(rng, 1000);
  const auto probs = exponential_curves(r);
  const auto e = rdd_design(r, 0.4, probs);
  const double mean_w = induced_treatment_propensity(probs, e).mean();
  CHECK(mean_w <= 0.4 + 1e-12);
  CHECK(mean_w >= 0.4 - 1.0 / 1000.0);
}

TEST_CASE("variance regularization") {
  Vector a(3), b(3);
  a << 1, 1, 10;
  b << 1, 10, 1;
  const auto [s0, s1] = regularize_variances(a, b);
  CHECK(s0[0] == 1.0);
  CHECK(s1[0] == 1.0);
  CHECK(s0[1] == doctest::Approx(15.0 / 11.0).epsilon(1e-14));
  CHECK(s1[1] == doctest::Approx(30.0 / 11.0).epsilon(1e-14));
  CHECK(s0[2] == doctest::Approx(30.0 / 11.0).epsilon(1e-14));
  CHECK(s1[2] == doctest::Approx(15.0 / 11.0).epsilon(1e-14));
  CHECK(1.0 / s0[1] + 1.0 / s1[1] == doctest::Approx(1.1).epsilon(1e-14));
  Vector zero(1), one(1);
  zero << 0.0;
  one << 1.0;
  CHECK_ERROR_CODE(regularize_variances(zero, one), ErrorCode::NonpositiveVariance);
}

TEST_CASE("heteroscedastic objective") {
  std::mt19937_64 rng(77);
  const auto prob = random_problem(rng, 60, 3);
  const NudgePropensity e(testing::random_uniform(rng, 60, 0.2, 0.8));
  CHECK(objective_wls(e, prob, Vector::Ones(60), Vector::Ones(60)) ==
        doctest::Approx(objective(e, prob)).epsilon(1e-13));

  // n = 1, d = 1, e_W = 1/2: g = 0.5*0.25/2 + 0.5*0.25/1 = 0.1875.
  const DesignProblem tiny(Matrix::Ones(1, 1), testing::constant_probs(1, 0.0, 1.0), Vector::Ones(1));
  CHECK(hetero_weight(0.5, 1.0, 2.0) == doctest::Approx(0.1875).epsilon(1e-15));
  CHECK(objective_wls(NudgePropensity::constant(1, 0.5), tiny, Vector::Ones(1), Vector::Constant(1, 2.0)) ==
        doctest::Approx(1.0 / 0.1875).epsilon(1e-14));

  Vector s1 = Vector::Ones(60);
  s1[7] = 3.0;
  CHECK_ERROR_CODE(objective_wls(e, prob, Vector::Ones(60), s1), ErrorCode::RatioOutOfRange);
  s1[7] = -1.0;
  CHECK_ERROR_CODE(objective_wls(e, prob, Vector::Ones(60), s1), ErrorCode::NonpositiveVariance);
}

TEST_CASE("second derivative of the heteroscedastic weight") {
  for (double s0 : {0.5, 1.0, 3.0}) {
    for (double ratio : {0.5, 1.0, 2.0, 3.0}) {
      const double s1 = ratio * s0;
      for (double e = 0.05; e < 0.96; e += 0.05) {
        const double h = 1e-4;
        const double fd = (hetero_weight(e + h, s0, s1) - 2 * hetero_weight(e, s0, s1) + hetero_weight(e - h, s0, s1)) /
                          (h * h);
        CHECK(hetero_second_derivative(e, s0, s1) == doctest::Approx(fd).epsilon(1e-6).scale(1.0 / s0));
      }
    }
  }
}

TEST_CASE("objective is monotone in the Bernoulli variances") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto prob = random_problem(rng, 40, 3);
    const Vector e1 = closed_form_unconstrained(prob.probs).values();  // maximizes e_W(1 - e_W) per row
    const Vector e2 = testing::random_uniform(rng, 40, 0.05, 0.95);
    CHECK(objective(NudgePropensity(e1), prob) <= objective(NudgePropensity(e2), prob) * (1 + 1e-12));
  }
}

TEST_CASE("midpoint convexity on random feasible pairs") {
  std::mt19937_64 rng(55);
  int violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto prob = random_problem(rng, 30, 3);
    const NudgePropensity u(testing::random_uniform(rng, 30));
    const NudgePropensity v(testing::random_uniform(rng, 30));
    const NudgePropensity mid((u.values() + v.values()) / 2);
    const double fu = objective(u, prob), fv = objective(v, prob);
    if (objective(mid, prob) > (fu + fv) / 2 + 1e-9 * std::max(std::abs(fu), std::abs(fv))) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("adding constraints never lowers the optimum") {
  std::mt19937_64 rng(90);
  const Eigen::Index n = 150;
  Matrix x = testing::random_design_matrix(rng, n, 3);
  const Vector r = testing::random_uniform(rng, n);
  x.col(2) = r;
  const auto prob = DesignProblem::from_cohort(x, exponential_curves(r));

  std::vector<ConstraintSet> ladder(6);
  for (auto& c : ladder) c.score = r;
  ladder[1].monotone_in_score = true;
  ladder[2].budget = 0.4;
  ladder[3].budget = 0.4;
  ladder[3].monotone_in_score = true;
  ladder[4] = ladder[3];
  ladder[4].gain = GainConstraint{0.85, std::nullopt};
  ladder[5] = ladder[3];
  ladder[5].gain = GainConstraint{0.95, std::nullopt};

  std::vector<double> values;
  for (const auto& c : ladder) {
    const auto sol = solve(prob, c);
    CHECK(sol.projection_residual <= 1e-8);
    values.push_back(sol.objective);
  }
  const double base = values[0];
  CHECK(values[1] >= base * (1 - 1e-9));
  CHECK(values[2] >= base * (1 - 1e-9));
  CHECK(values[3] >= std::max(values[1], values[2]) * (1 - 1e-9));
  CHECK(values[4] >= values[3] * (1 - 1e-9));
  CHECK(values[5] >= values[4] * (1 - 1e-9));
}

TEST_CASE("solver is deterministic and its artifacts round-trip") {
  std::mt19937_64 rng(12);
  const auto prob = random_problem(rng, 80, 3);
  ConstraintSet cons;
  cons.budget = prob.probs.p_at.mean() + 0.4 * prob.probs.p_c.mean();
  const auto a = solve(prob, cons);
  const auto b = solve(prob, cons);
  CHECK(a.e_z_star.values() == b.e_z_star.values());
  CHECK(a.objective == b.objective);

  const auto path = std::filesystem::temp_directory_path() / "nudge_design_roundtrip.csv";
  write_design_csv(a.e_z_star, path);
  const auto back = load_design_csv(path);
  std::filesystem::remove(path);
  CHECK(back.values() == a.e_z_star.values());

  const nlohmann::json j = a;
  CHECK(j.at("status") == "converged");
  CHECK(j.at("e_z_star").size() == 80);
  CHECK(j.at("objective").get<double>() == a.objective);
}

TEST_CASE("dykstra projection inside the solver") {
  std::mt19937_64 rng(13);
  const auto prob = random_problem(rng, 40, 3);
  ConstraintSet cons;
  cons.budget = prob.probs.p_at.mean() + 0.4 * prob.probs.p_c.mean();
  SolverOptions opts;
  opts.projection = ProjectionMethod::dykstra;
  const auto slow = solve(prob, cons, opts);
  const auto fast = solve(prob, cons);
  CHECK(slow.objective == doctest::Approx(fast.objective).epsilon(1e-8));
}
