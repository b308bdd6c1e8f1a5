#pragma once

#include <span>

namespace nudge {

/// In-place least-squares projection onto nondecreasing sequences (pool adjacent violators).
void pava_nondecreasing(std::span<double> values);

/// Weighted variant: minimizes sum_i weights[i] (x_i - values[i])^2. Weights must be positive.
void pava_nondecreasing(std::span<double> values, std::span<const double> weights);

}  // namespace nudge
