#include <random>
#include <string>

#include "doctest.h"
#include "nudge/csv.hpp"
#include "nudge/dataset.hpp"
#include "nudge/isotonic.hpp"
#include "support.hpp"

using namespace nudge;

namespace {

ColumnSchema basic_schema() {
  ColumnSchema s;
  s.x = {"x1"};
  s.y = "y";
  return s;
}

}  // namespace

TEST_CASE("load_dataset parses a three-row file") {
  const auto data = parse_dataset("x1,z,w,y\n0.5,1,1,2.0\n-1,0,0,3\n2,1,0,-4.5\n", basic_schema());
  CHECK(data.rows() == 3);
  CHECK(data.cols() == 1);
  REQUIRE(data.has_outcome());
  CHECK((*data.y)[2] == -4.5);
  CHECK(data.z[0] == 1);
  CHECK(data.w[2] == 0);
}

TEST_CASE("load_dataset contract errors") {
  CHECK_ERROR_CODE(parse_dataset("x1,z,y\n0.5,1,2\n", basic_schema()), ErrorCode::SchemaViolation);
  CHECK_ERROR_CODE(parse_dataset("x1,z,w,y\n0.5,2,1,2\n", basic_schema()), ErrorCode::DomainViolation);
  CHECK_ERROR_CODE(parse_dataset("x1,z,w,y\nabc,1,1,2\n", basic_schema()), ErrorCode::MalformedCsv);
  CHECK_ERROR_CODE(parse_dataset("x1,z,w,y\n1,1,1\n", basic_schema()), ErrorCode::MalformedCsv);
  CHECK_ERROR_CODE(parse_dataset("x1,z,w,y\n\"1,1,1,2\n", basic_schema()), ErrorCode::MalformedCsv);
}

TEST_CASE("schema options: intercept, score and missing outcome") {
  ColumnSchema s;
  s.x = {"a", "r"};
  s.score = "r";
  s.intercept = true;
  const auto data = parse_dataset("r,a,z,w\n0.25,1,0,0\n0.75,2,1,1\n", s);
  CHECK(data.cols() == 3);
  CHECK(data.x(0, 0) == 1.0);
  CHECK(data.x(1, 1) == 2.0);
  REQUIRE(data.score_col.has_value());
  CHECK(*data.score_col == 2);
  CHECK(data.score()[1] == 0.75);
  CHECK_FALSE(data.has_outcome());

  ColumnSchema bad = s;
  bad.score = "z";
  CHECK_ERROR_CODE(parse_dataset("r,a,z,w\n0.25,1,0,0\n", bad), ErrorCode::SchemaViolation);
}

TEST_CASE("csv quoting round trip") {
  const auto rows = csv::parse("\"a,b\",\"say \"\"hi\"\"\",c\r\n1,2,3\n");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0][0] == "a,b");
  CHECK(rows[0][1] == "say \"hi\"");
  CHECK(csv::join(rows[0]) == "\"a,b\",\"say \"\"hi\"\"\",c");
  double v = 0.0;
  CHECK(csv::parse_double(csv::format_double(0.1), v));
  CHECK(v == 0.1);
  CHECK_FALSE(csv::parse_double("nan", v));
  CHECK_FALSE(csv::parse_double("1.5x", v));
}

TEST_CASE("write_dataset(load_dataset(f)) is bit-exact for 17-digit files") {
  std::mt19937_64 rng(7);
  EncouragementDataset data;
  data.x = testing::random_design_matrix(rng, 25, 3, false);
  data.z = Eigen::VectorXi::Zero(25);
  data.w = Eigen::VectorXi::Zero(25);
  for (int i = 0; i < 25; ++i) {
    data.z[i] = i % 2;
    data.w[i] = (i % 3 == 0) ? 1 : 0;
  }
  data.y = testing::random_uniform(rng, 25, -100.0, 100.0);
  data.column_names = {"a", "b", "c"};
  const std::string text = format_dataset(data);

  ColumnSchema s;
  s.x = {"a", "b", "c"};
  s.y = "y";
  const auto back = parse_dataset(text, s);
  CHECK(back.x == data.x);
  CHECK(*back.y == *data.y);
  CHECK(format_dataset(back) == text);
}

TEST_CASE("induced treatment propensity") {
  const auto p = testing::constant_probs(1, 0.2, 0.5);
  CHECK(induced_treatment_propensity(p, NudgePropensity::constant(1, 0.0))[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(induced_treatment_propensity(p, NudgePropensity::constant(1, 1.0))[0] == doctest::Approx(0.7).epsilon(1e-15));
  const auto q = testing::constant_probs(1, 0.1, 0.6);
  CHECK(induced_treatment_propensity(q, NudgePropensity::constant(1, 0.5))[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK_ERROR_CODE(induced_treatment_propensity(q, NudgePropensity::constant(2, 0.5)), ErrorCode::LengthMismatch);
  CHECK_ERROR_CODE(NudgePropensity(Vector::Constant(2, 1.5)), ErrorCode::DomainViolation);
}

TEST_CASE("induced propensity is affine, monotone and bracketed by p_at and p_at + p_c") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = testing::random_probs(rng, 40);
    const Vector a = testing::random_uniform(rng, 40);
    const Vector b = testing::random_uniform(rng, 40);
    const Vector ea = induced_treatment_propensity(p, NudgePropensity(a));
    const Vector eb = induced_treatment_propensity(p, NudgePropensity(b));
    const Vector emid = induced_treatment_propensity(p, NudgePropensity(0.5 * (a + b)));
    CHECK((emid - 0.5 * (ea + eb)).cwiseAbs().maxCoeff() < 1e-14);
    for (Eigen::Index i = 0; i < 40; ++i) {
      CHECK(ea[i] >= p.p_at[i] - 1e-15);
      CHECK(ea[i] <= p.p_at[i] + p.p_c[i] + 1e-15);
      if (a[i] <= b[i]) CHECK(ea[i] <= eb[i]);
    }
  }
}

TEST_CASE("validate_overlap") {
  CHECK(validate_overlap(Vector::Constant(2, 0.4), 0.05).holds());
  Vector low(2);
  low << 0.01, 0.5;
  const auto r1 = validate_overlap(low, 0.05);
  REQUIRE(r1.violations.size() == 1);
  CHECK(r1.violations[0] == 0);
  Vector high(2);
  high << 0.95, 0.96;
  const auto r2 = validate_overlap(high, 0.05);
  REQUIRE(r2.violations.size() == 1);
  CHECK(r2.violations[0] == 1);
}

TEST_CASE("probability triple validation and merge") {
  auto p = testing::constant_probs(3, 0.2, 0.5);
  CHECK_NOTHROW(p.validate(1e-3));
  p.p_nt[1] += 1e-6;
  CHECK_ERROR_CODE(p.validate(1e-3), ErrorCode::DomainViolation);

  ColumnSchema s = basic_schema();
  const auto a = parse_dataset("x1,z,w,y\n1,1,1,2\n", s);
  const auto b = parse_dataset("x1,z,w,y\n3,0,0,4\n5,1,0,6\n", s);
  const auto m = merge(a, b);
  CHECK(m.rows() == 3);
  CHECK(m.x(2, 0) == 5.0);
  CHECK((*m.y)[1] == 4.0);
}

TEST_CASE("PAVA matches brute-force pooling") {
  std::vector<double> v{0.9, 0.1};
  pava_nondecreasing(v);
  CHECK(v[0] == doctest::Approx(0.5));
  CHECK(v[1] == doctest::Approx(0.5));

  std::vector<double> w{3, 1, 2, 5, 4, 4, 0};
  pava_nondecreasing(w);
  const std::vector<double> expected{2, 2, 2, 3.25, 3.25, 3.25, 3.25};
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] == doctest::Approx(expected[i]));
  for (std::size_t i = 1; i < w.size(); ++i) CHECK(w[i - 1] <= w[i]);
}

TEST_CASE("weighted PAVA pools by weight") {
  std::vector<double> v{0.9, 0.1};
  const std::vector<double> w{3.0, 1.0};
  pava_nondecreasing(v, w);
  CHECK(v[0] == doctest::Approx(0.7));
  CHECK(v[1] == doctest::Approx(0.7));

  std::vector<double> same{3, 1, 2, 5, 4, 4, 0};
  std::vector<double> unweighted = same;
  pava_nondecreasing(same, std::vector<double>(7, 2.5));
  pava_nondecreasing(unweighted);
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i] == doctest::Approx(unweighted[i]));
  std::vector<double> bad{1.0};
  CHECK_ERROR_CODE(pava_nondecreasing(bad, std::vector<double>{0.0}), ErrorCode::DomainViolation);
}
