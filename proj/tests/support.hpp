#pragma once

#include <cstdint>
#include <random>

#include "nudge/dataset.hpp"

namespace nudge::testing {

inline Matrix random_design_matrix(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d, bool intercept = true) {
  std::normal_distribution<double> normal;
  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = normal(rng);
  }
  if (intercept) x.col(0).setOnes();
  return x;
}

// Random compliance triple per row with p_c bounded below by `c_floor`.
inline ComplianceProbabilities random_probs(std::mt19937_64& rng, Eigen::Index n, double c_floor = 0.05) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ComplianceProbabilities p;
  p.p_at.resize(n);
  p.p_nt.resize(n);
  p.p_c.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double c = c_floor + (1.0 - c_floor) * unif(rng);
    const double at = (1.0 - c) * unif(rng);
    p.p_c[i] = c;
    p.p_at[i] = at;
    p.p_nt[i] = 1.0 - c - at;
  }
  return p;
}

inline ComplianceProbabilities constant_probs(Eigen::Index n, double at, double c) {
  ComplianceProbabilities p;
  p.p_at = Vector::Constant(n, at);
  p.p_c = Vector::Constant(n, c);
  p.p_nt = Vector::Constant(n, 1.0 - at - c);
  return p;
}

inline Vector random_uniform(std::mt19937_64& rng, Eigen::Index n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> unif(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = unif(rng);
  return v;
}

}  // namespace nudge::testing

#include "nudge/error.hpp"

#define CHECK_ERROR_CODE(expr, expected)                  \
  do {                                                    \
    bool nudge_thrown = false;                            \
    try {                                                 \
      (void)(expr);                                       \
    } catch (const ::nudge::Error& nudge_err) {           \
      nudge_thrown = true;                                \
      CHECK(nudge_err.code() == (expected));              \
    }                                                     \
    CHECK_MESSAGE(nudge_thrown, "expected nudge::Error"); \
  } while (0)
