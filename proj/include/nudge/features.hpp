#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "nudge/dataset.hpp"

namespace nudge {

/// Deterministic basis expansion of the covariate matrix.
///
///  - linear: X unchanged.
///  - score_spline: X plus a cubic regression spline in the score column
///    (score^2, score^3 and (score - k)_+^3 for each knot k).
///  - flexible: score_spline plus squares of every non-constant, non-score column.
///
/// Knots are frozen into the recipe so a model fitted on one cohort expands new
/// cohorts identically.
struct FeatureRecipe {
  enum class Kind { linear, score_spline, flexible };

  Kind kind = Kind::linear;
  std::optional<std::size_t> score_col;
  std::vector<double> knots;

  static FeatureRecipe linear() { return {}; }
  /// Places `num_knots` knots at evenly spaced interior quantiles of the score.
  static FeatureRecipe with_quantile_knots(Kind kind, std::size_t score_col, const Vector& score,
                                           std::size_t num_knots);

  Matrix expand(const Matrix& x) const;
};

std::string to_string(FeatureRecipe::Kind kind);
FeatureRecipe::Kind parse_recipe_kind(const std::string& name);

void to_json(nlohmann::json& j, const FeatureRecipe& recipe);
void from_json(const nlohmann::json& j, FeatureRecipe& recipe);

}  // namespace nudge
