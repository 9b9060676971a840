#pragma once

#include <cstddef>
#include <span>

namespace knnstore {

// Squared Euclidean distance with double accumulation over float data.
// Double keeps neighbor orderings stable at dim 1024 where float sums lose
// the low bits that break ties.
inline double squared_l2(const float* a, const float* b, std::size_t dim) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= dim; i += 4) {
    const double d0 = static_cast<double>(a[i]) - b[i];
    const double d1 = static_cast<double>(a[i + 1]) - b[i + 1];
    const double d2 = static_cast<double>(a[i + 2]) - b[i + 2];
    const double d3 = static_cast<double>(a[i + 3]) - b[i + 3];
    acc0 += d0 * d0;
    acc1 += d1 * d1;
    acc2 += d2 * d2;
    acc3 += d3 * d3;
  }
  for (; i < dim; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc0 += d * d;
  }
  return (acc0 + acc1) + (acc2 + acc3);
}

inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  return squared_l2(a.data(), b.data(), a.size());
}

}  // namespace knnstore
