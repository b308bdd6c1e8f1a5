#include "nudge/features.hpp"

#include <algorithm>
#include <cmath>

#include "nudge/error.hpp"

namespace nudge {

FeatureRecipe FeatureRecipe::with_quantile_knots(Kind kind, std::size_t score_col, const Vector& score,
                                                 std::size_t num_knots) {
  FeatureRecipe recipe;
  recipe.kind = kind;
  recipe.score_col = score_col;
  if (kind == Kind::linear || score.size() == 0) return recipe;
  std::vector<double> sorted(score.data(), score.data() + score.size());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 1; k <= num_knots; ++k) {
    const double q = static_cast<double>(k) / static_cast<double>(num_knots + 1);
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    recipe.knots.push_back(sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
  }
  recipe.knots.erase(std::unique(recipe.knots.begin(), recipe.knots.end()), recipe.knots.end());
  return recipe;
}

Matrix FeatureRecipe::expand(const Matrix& x) const {
  if (kind == Kind::linear) return x;
  if (!score_col || *score_col >= static_cast<std::size_t>(x.cols())) {
    throw Error(ErrorCode::SchemaViolation, "spline features need a valid score column");
  }
  const auto n = x.rows();
  const auto s = static_cast<Eigen::Index>(*score_col);

  std::vector<Eigen::Index> squared;
  if (kind == Kind::flexible) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (j == s) continue;
      const bool constant = (x.col(j).array() == x(0, j)).all();
      if (!constant) squared.push_back(j);
    }
  }
  const auto extra = static_cast<Eigen::Index>(2 + knots.size() + squared.size());
  Matrix out(n, x.cols() + extra);
  out.leftCols(x.cols()) = x;
  const auto r = x.col(s).array();
  Eigen::Index c = x.cols();
  out.col(c++) = r.square().matrix();
  out.col(c++) = r.cube().matrix();
  for (double k : knots) out.col(c++) = (r - k).max(0.0).cube().matrix();
  for (auto j : squared) out.col(c++) = x.col(j).array().square().matrix();
  return out;
}

std::string to_string(FeatureRecipe::Kind kind) {
  switch (kind) {
    case FeatureRecipe::Kind::linear: return "linear";
    case FeatureRecipe::Kind::score_spline: return "score_spline";
    case FeatureRecipe::Kind::flexible: return "flexible";
  }
  return "linear";
}

FeatureRecipe::Kind parse_recipe_kind(const std::string& name) {
  if (name == "linear") return FeatureRecipe::Kind::linear;
  if (name == "score_spline" || name == "spline") return FeatureRecipe::Kind::score_spline;
  if (name == "flexible") return FeatureRecipe::Kind::flexible;
  throw Error(ErrorCode::InvalidConfig, "unknown feature recipe '" + name + "'");
}

void to_json(nlohmann::json& j, const FeatureRecipe& recipe) {
  j = nlohmann::json{{"kind", to_string(recipe.kind)}, {"knots", recipe.knots}};
  if (recipe.score_col) j["score_col"] = *recipe.score_col;
}

void from_json(const nlohmann::json& j, FeatureRecipe& recipe) {
  recipe.kind = parse_recipe_kind(j.at("kind").get<std::string>());
  recipe.knots = j.value("knots", std::vector<double>{});
  if (j.contains("score_col")) recipe.score_col = j.at("score_col").get<std::size_t>();
}

}  // namespace nudge
