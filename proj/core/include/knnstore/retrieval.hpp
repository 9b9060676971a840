#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "knnstore/datastore.hpp"

namespace knnstore {

// One retrieval hit. Neighbor lists are sorted ascending by squared L2
// distance, ties broken by record index, so every result is reproducible.
struct Neighbor {
  std::uint32_t index = 0;
  std::uint32_t value = 0;
  double squared_l2 = 0.0;

  bool operator==(const Neighbor&) const = default;
};

// Exact top-k by squared L2 over a full scan with a bounded max-heap.
std::vector<Neighbor> knn_flat(const Datastore& ds, std::span<const float> query,
                               std::uint32_t k);

// Inverted-file coarse index: Lloyd's k-means centroids with one record list
// per centroid. Search scans the nprobe nearest lists and is exact within
// them; nprobe == n_centroids reproduces knn_flat bit for bit.
//
// The index references the datastore it was built from; keep that store
// alive for the index's lifetime.
class IvfIndex {
 public:
  static IvfIndex build(const Datastore& ds, std::uint32_t n_centroids,
                        std::uint64_t seed);

  std::vector<Neighbor> search(std::span<const float> query, std::uint32_t k,
                               std::uint32_t nprobe) const;

  std::uint32_t n_centroids() const {
    return static_cast<std::uint32_t>(lists_.size());
  }
  std::uint32_t dim() const { return dim_; }
  const std::vector<std::vector<std::uint32_t>>& lists() const { return lists_; }

 private:
  const Datastore* ds_ = nullptr;
  std::uint32_t dim_ = 0;
  std::vector<float> centroids_;  // n_centroids x dim
  std::vector<std::vector<std::uint32_t>> lists_;
};

// c_j = number of distinct values among the first j neighbors.
std::vector<std::uint32_t> distinct_counts(std::span<const Neighbor> neighbors);

// Gaussian-kernel distribution over the vocabulary from the first k_r
// neighbors: mass proportional to exp(-d_j / T), stabilized by shifting the
// exponent by its maximum before exponentiation.
std::vector<double> knn_distribution(std::span<const Neighbor> neighbors,
                                     std::uint32_t k_r, double temperature,
                                     std::uint32_t vocab);

}  // namespace knnstore
