#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "nudge/compliance.hpp"
#include "support.hpp"

using namespace nudge;

namespace {

// Plain undamped Newton on the same penalized likelihood, using an LU inverse.
Vector newton_oracle(const Matrix& f, const Vector& y, double lambda) {
  Vector beta = Vector::Zero(f.cols());
  for (int it = 0; it < 200; ++it) {
    const Vector p = (f * beta).unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Vector grad = f.transpose() * (y - p) - lambda * beta;
    const Vector w = p.cwiseProduct((1.0 - p.array()).matrix());
    const Matrix hess = f.transpose() * w.asDiagonal() * f + lambda * Matrix::Identity(f.cols(), f.cols());
    const Vector step = hess.fullPivLu().solve(grad);
    beta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-13) break;
  }
  return beta;
}

double true_p_at(double r) { return 0.8 * std::exp(-5.0 * (1.0 - r)) + 0.05; }
double true_p_nt(double r) { return 0.8 * std::exp(-5.0 * r) + 0.05; }

// Pilot with intercept + score + one noise covariate, classes from the exponential curves.
EncouragementDataset curve_pilot(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal;
  EncouragementDataset d;
  const auto m = static_cast<Eigen::Index>(n);
  d.x.resize(m, 3);
  d.z.resize(m);
  d.w.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double r = unif(rng);
    d.x(i, 0) = 1.0;
    d.x(i, 1) = normal(rng);
    d.x(i, 2) = r;
    d.z[i] = unif(rng) < 0.5 ? 1 : 0;
    const double u = unif(rng);
    const bool at = u < true_p_at(r);
    const bool nt = !at && u < true_p_at(r) + true_p_nt(r);
    d.w[i] = at ? 1 : (nt ? 0 : d.z[i]);
  }
  d.score_col = 2;
  d.column_names = {"(intercept)", "x1", "r"};
  return d;
}

double sup_error_e_w(const ComplianceModel& model, double e_z) {
  Matrix grid(101, 3);
  for (int k = 0; k <= 100; ++k) grid.row(k) << 1.0, 0.0, k / 100.0;
  const auto probs = predict_probs(model, grid);
  double worst = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const double truth = true_p_at(r) + (1.0 - true_p_at(r) - true_p_nt(r)) * e_z;
    worst = std::max(worst, std::abs(probs.p_at[k] + probs.p_c[k] * e_z - truth));
  }
  return worst;
}

}  // namespace

TEST_CASE("fit_logistic degenerate and separable labels") {
  Matrix f(4, 2);
  f << 1, -1, 1, -0.5, 1, 0.5, 1, 1;
  const Vector b0 = fit_logistic(f, Eigen::VectorXi::Zero(4), 1.0);
  for (int i = 0; i < 4; ++i) CHECK(sigmoid(f.row(i).dot(b0)) < 0.5);

  Matrix g(2, 1);
  g << -1, 1;
  Eigen::VectorXi y(2);
  y << 0, 1;
  CHECK(fit_logistic(g, y, 0.1)[0] > 0.0);
}

TEST_CASE("fit_logistic matches an independent Newton oracle") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Matrix f = testing::random_design_matrix(rng, 200, 3);
  Vector truth(3);
  truth << -0.3, 1.2, -0.8;
  Eigen::VectorXi labels(200);
  for (int i = 0; i < 200; ++i) labels[i] = unif(rng) < sigmoid(f.row(i).dot(truth)) ? 1 : 0;

  for (double lambda : {1e-6, 1e-2, 3.0}) {
    const Vector fitted = fit_logistic(f, labels, lambda);
    const Vector oracle = newton_oracle(f, labels.cast<double>(), lambda);
    CHECK((fitted - oracle).cwiseAbs().maxCoeff() < 1e-6);
    // First-order condition of the penalized likelihood.
    const Vector p = (f * fitted).unaryExpr([](double e) { return sigmoid(e); });
    const Vector score = f.transpose() * (labels.cast<double>() - p) - lambda * fitted;
    CHECK(score.cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("fit_logistic with vanishing ridge approaches the unpenalized MLE") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Matrix f = testing::random_design_matrix(rng, 500, 2);
  Eigen::VectorXi labels(500);
  for (int i = 0; i < 500; ++i) labels[i] = unif(rng) < sigmoid(0.4 + 0.9 * f(i, 1)) ? 1 : 0;
  const Vector mle = newton_oracle(f, labels.cast<double>(), 0.0);
  double previous = 1e300;
  for (double lambda : {1.0, 1e-2, 1e-4, 1e-8}) {
    const double gap = (fit_logistic(f, labels, lambda) - mle).cwiseAbs().maxCoeff();
    CHECK(gap <= previous);
    previous = gap;
  }
  CHECK(previous < 1e-7);
}

TEST_CASE("fit_logistic reports a singular Hessian without a penalty") {
  Matrix f(3, 2);
  f << 1, 2, 1, 2, 1, 2;  // collinear columns
  Eigen::VectorXi y(3);
  y << 0, 1, 1;
  CHECK_ERROR_CODE(fit_logistic(f, y, 0.0), ErrorCode::SingularHessian);
}

TEST_CASE("fit_compliance contract cases") {
  EncouragementDataset perfect;
  perfect.x = Matrix::Ones(40, 1);
  perfect.z.resize(40);
  for (int i = 0; i < 40; ++i) perfect.z[i] = i % 2;
  perfect.w = perfect.z;
  perfect.column_names = {"(intercept)"};
  const auto model = fit_compliance(perfect, 1e-4, 1e-3);
  const auto probs = predict_probs(model, perfect.x);
  CHECK(probs.p_c.minCoeff() >= 1.0 - 2.0 * 1e-3);

  EncouragementDataset one_arm = perfect;
  one_arm.z.setOnes();
  CHECK_ERROR_CODE(fit_compliance(one_arm, 1e-4, 1e-3), ErrorCode::EmptyArm);
  CHECK_ERROR_CODE(predict_probs(model, Matrix::Ones(3, 2)), ErrorCode::DimensionMismatch);
}

TEST_CASE("predict_probs applies the clipping policy") {
  ComplianceModel zero;
  zero.beta_z0 = Vector::Zero(1);
  zero.beta_z1 = Vector::Zero(1);
  zero.clip_epsilon = 1e-3;
  zero.input_dim = 1;
  const auto p = predict_probs(zero, Matrix::Ones(2, 1));
  CHECK(p.p_c[0] == 1e-3);
  CHECK(p.p_at[0] <= 1.0 - 1e-3);

  ComplianceModel m = zero;
  m.beta_z0[0] = std::log(0.1 / 0.9);
  m.beta_z1[0] = std::log(0.7 / 0.3);
  const auto q = predict_probs(m, Matrix::Ones(1, 1));
  CHECK(q.p_at[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(q.p_c[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(q.p_nt[0] == doctest::Approx(0.3).epsilon(1e-12));

  Vector at(3), atc(3);
  at << 0.6, 0.999, 0.0;
  atc << 0.4, 0.9995, 0.0;
  const auto c = clip_probabilities(at, atc, 1e-3);
  for (int i = 0; i < 3; ++i) {
    CHECK(c.p_c[i] >= 1e-3);
    CHECK(std::abs(c.p_at[i] + c.p_nt[i] + c.p_c[i] - 1.0) <= 1e-12);
  }
}

TEST_CASE("predict_probs rows sum to one and respect the complier floor") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    ComplianceModel m;
    m.beta_z0 = Vector::NullaryExpr(4, [&] { return normal(rng); });
    m.beta_z1 = Vector::NullaryExpr(4, [&] { return normal(rng); });
    m.clip_epsilon = 0.01;
    m.input_dim = 4;
    const auto p = predict_probs(m, testing::random_design_matrix(rng, 100, 4));
    CHECK_NOTHROW(p.validate(0.01));
  }
}

TEST_CASE("complier_mean") {
  const Matrix x = Matrix::Identity(2, 2);
  ComplianceProbabilities p;
  p.p_c = Vector(2);
  p.p_c << 0.2, 0.6;
  p.p_at = Vector::Zero(2);
  p.p_nt = (1.0 - p.p_c.array()).matrix();
  const auto m = complier_mean(x, p);
  CHECK(m.p_c_marginal == doctest::Approx(0.4));
  CHECK(m.x_bar_c[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(m.x_bar_c[1] == doctest::Approx(0.75).epsilon(1e-14));

  std::mt19937_64 rng(3);
  const Matrix big = testing::random_design_matrix(rng, 30, 3);
  const auto constant = complier_mean(big, testing::constant_probs(30, 0.1, 0.4));
  CHECK((constant.x_bar_c - big.colwise().mean().transpose()).cwiseAbs().maxCoeff() < 1e-14);

  const auto probs = testing::random_probs(rng, 30);
  const auto base = complier_mean(big, probs);
  CHECK(base.x_bar_c[0] == doctest::Approx(1.0).epsilon(1e-14));
  ComplianceProbabilities scaled = probs;
  scaled.p_c *= 0.37;
  CHECK((complier_mean(big, scaled).x_bar_c - base.x_bar_c).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("compliance model JSON round trip") {
  const auto pilot = curve_pilot(600, 1);
  ComplianceOptions opts;
  opts.recipe = FeatureRecipe::Kind::score_spline;
  const auto model = fit_compliance(pilot, opts);
  const auto path = std::filesystem::temp_directory_path() / "nudge_model_roundtrip.json";
  save_model(model, path);
  const auto back = load_model(path);
  std::filesystem::remove(path);
  CHECK(back.beta_z0 == model.beta_z0);
  CHECK(back.beta_z1 == model.beta_z1);
  CHECK(back.recipe.knots == model.recipe.knots);
  CHECK((predict_probs(back, pilot.x).p_c - predict_probs(model, pilot.x).p_c).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("spline compliance fit recovers the exponential curves") {
  // Sup error is dominated by fit variance at the score boundary, so it is
  // averaged over pilots; the interior grid carries the tight bound.
  ComplianceOptions opts;
  opts.recipe = FeatureRecipe::Kind::score_spline;
  double full = 0.0, interior = 0.0;
  const int pilots = 10;
  for (int s = 0; s < pilots; ++s) {
    const auto model = fit_compliance(curve_pilot(2000, 300 + s), opts);
    Matrix grid(99, 3);
    for (int k = 0; k < 99; ++k) grid.row(k) << 1.0, 0.0, (k + 1) / 100.0;
    const auto probs = predict_probs(model, grid);
    double worst = 0.0, worst_inner = 0.0;
    for (int k = 0; k < 99; ++k) {
      const double r = (k + 1) / 100.0;
      const double err = std::abs(probs.p_at[k] - true_p_at(r));
      worst = std::max(worst, err);
      if (r >= 0.1 && r <= 0.9) worst_inner = std::max(worst_inner, err);
    }
    full += worst / pilots;
    interior += worst_inner / pilots;
  }
  CHECK(interior < 0.05);
  CHECK(full < 0.08);
}

TEST_CASE("treatment-propensity error shrinks as the pilot grows") {
  ComplianceOptions opts;
  opts.recipe = FeatureRecipe::Kind::score_spline;
  double previous = 1e300;
  for (std::size_t n0 : {500u, 2000u, 8000u}) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      total += sup_error_e_w(fit_compliance(curve_pilot(n0, 100 + seed), opts), 0.5);
    }
    CHECK(total < previous);
    previous = total;
  }
}
