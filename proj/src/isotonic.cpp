#include "nudge/isotonic.hpp"

#include <vector>

#include "nudge/error.hpp"

namespace nudge {

namespace {

struct Block {
  double weighted_sum;
  double weight;
  std::size_t count;
  double mean() const { return weighted_sum / weight; }
};

template <typename WeightAt>
void pool(std::span<double> values, WeightAt weight_at) {
  std::vector<Block> blocks;
  blocks.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double w = weight_at(i);
    blocks.push_back({w * values[i], w, 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean() > blocks.back().mean()) {
      const Block top = blocks.back();
      blocks.pop_back();
      blocks.back().weighted_sum += top.weighted_sum;
      blocks.back().weight += top.weight;
      blocks.back().count += top.count;
    }
  }
  std::size_t pos = 0;
  for (const Block& b : blocks) {
    const double m = b.mean();
    for (std::size_t k = 0; k < b.count; ++k) values[pos++] = m;
  }
}

}  // namespace

void pava_nondecreasing(std::span<double> values) {
  pool(values, [](std::size_t) { return 1.0; });
}

void pava_nondecreasing(std::span<double> values, std::span<const double> weights) {
  if (weights.size() != values.size()) throw Error(ErrorCode::LengthMismatch, "isotonic weights length");
  for (double w : weights) {
    if (!(w > 0.0)) throw Error(ErrorCode::DomainViolation, "isotonic weights must be positive");
  }
  pool(values, [&](std::size_t i) { return weights[i]; });
}

}  // namespace nudge
