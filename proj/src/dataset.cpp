#include "nudge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "nudge/csv.hpp"
#include "nudge/error.hpp"

namespace nudge {

namespace {

constexpr const char* kInterceptName = "(intercept)";

std::size_t find_column(const csv::Row& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(ErrorCode::SchemaViolation, "missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

double numeric_cell(const csv::Row& row, std::size_t col, std::size_t line, const std::string& name) {
  double value = 0.0;
  if (!csv::parse_double(row[col], value)) {
    throw Error(ErrorCode::MalformedCsv, "line " + std::to_string(line) + ", column '" + name +
                                             "': cannot parse '" + row[col] + "'");
  }
  return value;
}

int binary_cell(const csv::Row& row, std::size_t col, std::size_t line, const std::string& name) {
  const double value = numeric_cell(row, col, line, name);
  if (value != 0.0 && value != 1.0) {
    throw Error(ErrorCode::DomainViolation, "line " + std::to_string(line) + ", column '" + name +
                                                "' must be 0 or 1, got " + row[col]);
  }
  return static_cast<int>(value);
}

bool is_blank(const csv::Row& row) { return row.size() == 1 && row[0].empty(); }

}  // namespace

Vector EncouragementDataset::score() const {
  if (!score_col) throw Error(ErrorCode::SchemaViolation, "dataset has no score column");
  return x.col(static_cast<Eigen::Index>(*score_col));
}

void EncouragementDataset::validate() const {
  const auto n = x.rows();
  if (n < 1 || x.cols() < 1) throw Error(ErrorCode::SchemaViolation, "dataset needs n >= 1 and d >= 1");
  if (z.size() != n || w.size() != n) throw Error(ErrorCode::LengthMismatch, "Z and W must have one entry per row");
  if (y && y->size() != n) throw Error(ErrorCode::LengthMismatch, "Y must have one entry per row");
  if (score_col && *score_col >= cols()) throw Error(ErrorCode::SchemaViolation, "score column out of range");
  if (!column_names.empty() && column_names.size() != cols()) {
    throw Error(ErrorCode::SchemaViolation, "column_names must name every column of X");
  }
  if (!x.allFinite() || (y && !y->allFinite())) throw Error(ErrorCode::DomainViolation, "non-finite value in dataset");
  for (Eigen::Index i = 0; i < n; ++i) {
    if ((z[i] != 0 && z[i] != 1) || (w[i] != 0 && w[i] != 1)) {
      throw Error(ErrorCode::DomainViolation, "Z and W must be binary (row " + std::to_string(i) + ")");
    }
  }
}

EncouragementDataset EncouragementDataset::subset(const std::vector<std::size_t>& rows) const {
  EncouragementDataset out;
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.x.resize(m, x.cols());
  out.z.resize(m);
  out.w.resize(m);
  if (y) out.y = Vector(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    out.x.row(r) = x.row(src);
    out.z[r] = z[src];
    out.w[r] = w[src];
    if (y) (*out.y)[r] = (*y)[src];
  }
  out.score_col = score_col;
  out.column_names = column_names;
  return out;
}

EncouragementDataset merge(const EncouragementDataset& first, const EncouragementDataset& second) {
  if (first.cols() != second.cols()) throw Error(ErrorCode::DimensionMismatch, "cannot merge datasets with different d");
  if (first.has_outcome() != second.has_outcome()) {
    throw Error(ErrorCode::SchemaViolation, "cannot merge datasets where only one carries Y");
  }
  EncouragementDataset out;
  const auto n1 = first.x.rows();
  const auto n2 = second.x.rows();
  out.x.resize(n1 + n2, first.x.cols());
  out.x << first.x, second.x;
  out.z.resize(n1 + n2);
  out.z << first.z, second.z;
  out.w.resize(n1 + n2);
  out.w << first.w, second.w;
  if (first.y) {
    out.y = Vector(n1 + n2);
    *out.y << *first.y, *second.y;
  }
  out.score_col = first.score_col;
  out.column_names = first.column_names;
  return out;
}

EncouragementDataset parse_dataset(const std::string& csv_text, const ColumnSchema& schema) {
  auto rows = csv::parse(csv_text);
  if (rows.empty()) throw Error(ErrorCode::MalformedCsv, "empty CSV (no header)");
  const csv::Row header = rows.front();
  if (schema.x.empty()) throw Error(ErrorCode::SchemaViolation, "schema lists no covariate columns");

  std::vector<std::size_t> x_cols;
  for (const auto& name : schema.x) x_cols.push_back(find_column(header, name));
  std::optional<std::size_t> z_col, w_col, y_col;
  if (schema.require_treatment) {
    z_col = find_column(header, schema.z);
    w_col = find_column(header, schema.w);
  }
  if (schema.y) y_col = find_column(header, *schema.y);

  EncouragementDataset data;
  const std::size_t offset = schema.intercept ? 1 : 0;
  if (schema.intercept) data.column_names.push_back(kInterceptName);
  for (const auto& name : schema.x) data.column_names.push_back(name);
  if (schema.score) {
    auto it = std::find(schema.x.begin(), schema.x.end(), *schema.score);
    if (it == schema.x.end()) {
      throw Error(ErrorCode::SchemaViolation, "score column '" + *schema.score + "' must be one of the x columns");
    }
    data.score_col = offset + static_cast<std::size_t>(it - schema.x.begin());
  }

  std::vector<const csv::Row*> body;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (is_blank(rows[r])) continue;
    if (rows[r].size() != header.size()) {
      throw Error(ErrorCode::MalformedCsv, "line " + std::to_string(r + 1) + " has " + std::to_string(rows[r].size()) +
                                               " fields, header has " + std::to_string(header.size()));
    }
    body.push_back(&rows[r]);
  }
  const auto n = static_cast<Eigen::Index>(body.size());
  const auto d = static_cast<Eigen::Index>(x_cols.size() + offset);
  data.x.resize(n, d);
  data.z = Eigen::VectorXi::Zero(n);
  data.w = Eigen::VectorXi::Zero(n);
  if (y_col) data.y = Vector(n);

  for (Eigen::Index i = 0; i < n; ++i) {
    const csv::Row& row = *body[static_cast<std::size_t>(i)];
    const std::size_t line = static_cast<std::size_t>(i) + 2;
    if (schema.intercept) data.x(i, 0) = 1.0;
    for (std::size_t j = 0; j < x_cols.size(); ++j) {
      data.x(i, static_cast<Eigen::Index>(j + offset)) = numeric_cell(row, x_cols[j], line, schema.x[j]);
    }
    if (z_col) data.z[i] = binary_cell(row, *z_col, line, schema.z);
    if (w_col) data.w[i] = binary_cell(row, *w_col, line, schema.w);
    if (y_col) (*data.y)[i] = numeric_cell(row, *y_col, line, *schema.y);
  }
  data.validate();
  return data;
}

EncouragementDataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema) {
  return parse_dataset(csv::read_file(path), schema);
}

std::string format_dataset(const EncouragementDataset& data) {
  csv::Row header;
  for (std::size_t j = 0; j < data.cols(); ++j) {
    header.push_back(j < data.column_names.size() ? data.column_names[j] : "x" + std::to_string(j + 1));
  }
  header.push_back("z");
  header.push_back("w");
  if (data.y) header.push_back("y");

  std::string out = csv::join(header) + "\n";
  for (Eigen::Index i = 0; i < data.x.rows(); ++i) {
    csv::Row row;
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) row.push_back(csv::format_double(data.x(i, j)));
    row.push_back(std::to_string(data.z[i]));
    row.push_back(std::to_string(data.w[i]));
    if (data.y) row.push_back(csv::format_double((*data.y)[i]));
    out += csv::join(row);
    out += '\n';
  }
  return out;
}

void write_dataset(const EncouragementDataset& data, const std::filesystem::path& path) {
  csv::write_file(path, format_dataset(data));
}

void ComplianceProbabilities::validate(double clip_epsilon, double sum_tol) const {
  const auto n = p_c.size();
  if (p_at.size() != n || p_nt.size() != n) throw Error(ErrorCode::LengthMismatch, "probability vectors differ in length");
  for (Eigen::Index i = 0; i < n; ++i) {
    const double at = p_at[i], nt = p_nt[i], c = p_c[i];
    if (!(at >= 0.0 && at <= 1.0 && nt >= 0.0 && nt <= 1.0 && c > 0.0 && c <= 1.0)) {
      throw Error(ErrorCode::DomainViolation, "compliance probabilities out of range at row " + std::to_string(i));
    }
    if (std::abs(at + nt + c - 1.0) > sum_tol) {
      throw Error(ErrorCode::DomainViolation, "compliance probabilities do not sum to one at row " + std::to_string(i));
    }
    if (c < clip_epsilon) {
      throw Error(ErrorCode::DomainViolation, "complier probability below floor at row " + std::to_string(i));
    }
  }
}

ComplianceProbabilities ComplianceProbabilities::subset(const std::vector<std::size_t>& rows) const {
  ComplianceProbabilities out;
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.p_at.resize(m);
  out.p_nt.resize(m);
  out.p_c.resize(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    out.p_at[r] = p_at[src];
    out.p_nt[r] = p_nt[src];
    out.p_c[r] = p_c[src];
  }
  return out;
}

NudgePropensity::NudgePropensity(Vector values) : values_(std::move(values)) {
  for (Eigen::Index i = 0; i < values_.size(); ++i) {
    if (!(values_[i] >= 0.0 && values_[i] <= 1.0)) {
      throw Error(ErrorCode::DomainViolation, "nudge propensity outside [0, 1] at row " + std::to_string(i));
    }
  }
}

NudgePropensity NudgePropensity::constant(std::size_t n, double value) {
  return NudgePropensity(Vector::Constant(static_cast<Eigen::Index>(n), value));
}

Vector induced_treatment_propensity(const ComplianceProbabilities& probs, const NudgePropensity& e_z) {
  if (probs.size() != e_z.size() || probs.p_at.size() != probs.p_c.size()) {
    throw Error(ErrorCode::LengthMismatch, "compliance probabilities and nudge propensity differ in length");
  }
  Vector e_w = probs.p_at + probs.p_c.cwiseProduct(e_z.values());
  // Rounding can push p_at + p_c marginally past one.
  return e_w.cwiseMax(0.0).cwiseMin(1.0);
}

OverlapReport validate_overlap(const Vector& e_w, double eta) {
  OverlapReport report;
  report.eta = eta;
  for (Eigen::Index i = 0; i < e_w.size(); ++i) {
    if (e_w[i] < eta || e_w[i] > 1.0 - eta) report.violations.push_back(static_cast<std::size_t>(i));
  }
  return report;
}

}  // namespace nudge
