#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nudge {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Rows of (X, Z, W, Y) from an encouragement experiment.
///
/// Z is the randomized nudge, W the treatment actually received, Y the outcome.
/// Y is absent for pilot files collected before outcomes are available.
struct EncouragementDataset {
  Matrix x;
  Eigen::VectorXi z;
  Eigen::VectorXi w;
  std::optional<Vector> y;
  /// Column of `x` holding the priority score used by ordering and gain constraints.
  std::optional<std::size_t> score_col;
  std::vector<std::string> column_names;

  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(x.cols()); }
  bool has_outcome() const { return y.has_value(); }
  Vector score() const;

  /// Throws SchemaViolation / DomainViolation when an invariant is broken.
  void validate() const;

  EncouragementDataset subset(const std::vector<std::size_t>& rows) const;
};

/// Concatenates two datasets with identical column layout (pilot + main study).
EncouragementDataset merge(const EncouragementDataset& first, const EncouragementDataset& second);

/// Maps CSV header names onto dataset roles.
struct ColumnSchema {
  std::vector<std::string> x;
  std::string z = "z";
  std::string w = "w";
  std::optional<std::string> y;
  std::optional<std::string> score;
  /// Prepend a column of ones named "(intercept)" to X.
  bool intercept = false;
  /// When false, Z and W are not required (design-stage cohorts carry only covariates).
  bool require_treatment = true;
};

EncouragementDataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema);
EncouragementDataset parse_dataset(const std::string& csv_text, const ColumnSchema& schema);

/// Writes X columns, then z, w and y (when present) with 17 significant digits.
void write_dataset(const EncouragementDataset& data, const std::filesystem::path& path);
std::string format_dataset(const EncouragementDataset& data);

/// Per-row compliance-class probabilities; defiers are excluded so the three sum to one.
struct ComplianceProbabilities {
  Vector p_at;
  Vector p_nt;
  Vector p_c;

  std::size_t size() const { return static_cast<std::size_t>(p_c.size()); }
  /// Checks lengths, the unit-sum identity and the complier floor.
  void validate(double clip_epsilon = 0.0, double sum_tol = 1e-12) const;
  ComplianceProbabilities subset(const std::vector<std::size_t>& rows) const;
};

/// Nudge assignment probabilities, one per row, each in [0, 1].
class NudgePropensity {
 public:
  NudgePropensity() = default;
  explicit NudgePropensity(Vector values);
  static NudgePropensity constant(std::size_t n, double value);

  const Vector& values() const { return values_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }

 private:
  Vector values_;
};

/// e_W = p_AT + p_C * e_Z, the treatment propensity induced by a nudge propensity.
Vector induced_treatment_propensity(const ComplianceProbabilities& probs, const NudgePropensity& e_z);

struct OverlapReport {
  double eta = 0.0;
  std::vector<std::size_t> violations;
  bool holds() const { return violations.empty(); }
};

/// Lists rows whose treatment propensity leaves [eta, 1 - eta].
OverlapReport validate_overlap(const Vector& e_w, double eta);

}  // namespace nudge
