#include "knnstore/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <string>

#include "knnstore/distance.hpp"
#include "knnstore/error.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

struct HeapEntry {
  double dist;
  std::uint32_t index;
};

// Max-heap ordering: the root is the current worst candidate. A candidate
// with equal distance but larger index counts as worse.
struct WorseFirst {
  bool operator()(const HeapEntry& a, const HeapEntry& b) const {
    return a.dist != b.dist ? a.dist < b.dist : a.index < b.index;
  }
};

void scan_into_heap(const Datastore& ds, std::span<const float> query,
                    std::span<const std::uint32_t> candidates, std::uint32_t k,
                    std::priority_queue<HeapEntry, std::vector<HeapEntry>,
                                        WorseFirst>& heap) {
  const float* q = query.data();
  const std::size_t dim = query.size();
  for (const std::uint32_t idx : candidates) {
    const double d = squared_l2(q, ds.key(idx).data(), dim);
    if (heap.size() < k) {
      heap.push({d, idx});
    } else {
      const HeapEntry& worst = heap.top();
      if (d < worst.dist || (d == worst.dist && idx < worst.index)) {
        heap.pop();
        heap.push({d, idx});
      }
    }
  }
}

std::vector<Neighbor> drain_heap(
    const Datastore& ds,
    std::priority_queue<HeapEntry, std::vector<HeapEntry>, WorseFirst>& heap) {
  std::vector<Neighbor> out(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    const HeapEntry e = heap.top();
    heap.pop();
    out[i] = Neighbor{e.index, ds.value(e.index), e.dist};
  }
  return out;
}

void check_query(const Datastore& ds, std::span<const float> query,
                 std::uint32_t k) {
  if (query.size() != ds.dim()) {
    raise(ErrorCode::DimensionMismatch,
          "query length " + std::to_string(query.size()) + " != dim " +
              std::to_string(ds.dim()));
  }
  if (k == 0) {
    raise(ErrorCode::InvalidParam, "k must be positive");
  }
  if (k > ds.size()) {
    raise(ErrorCode::KTooLarge, "k = " + std::to_string(k) +
                                    " exceeds store size " +
                                    std::to_string(ds.size()));
  }
}

}  // namespace

std::vector<Neighbor> knn_flat(const Datastore& ds, std::span<const float> query,
                               std::uint32_t k) {
  check_query(ds, query, k);
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, WorseFirst> heap;
  const float* q = query.data();
  const std::size_t dim = ds.dim();
  const std::size_t n = ds.size();
  for (std::size_t idx = 0; idx < n; ++idx) {
    const double d = squared_l2(q, ds.key(idx).data(), dim);
    if (heap.size() < k) {
      heap.push({d, static_cast<std::uint32_t>(idx)});
    } else {
      const HeapEntry& worst = heap.top();
      if (d < worst.dist ||
          (d == worst.dist && idx < worst.index)) {
        heap.pop();
        heap.push({d, static_cast<std::uint32_t>(idx)});
      }
    }
  }
  return drain_heap(ds, heap);
}

IvfIndex IvfIndex::build(const Datastore& ds, std::uint32_t n_centroids,
                         std::uint64_t seed) {
  if (n_centroids < 1) {
    raise(ErrorCode::InvalidParam, "n_centroids must be at least 1");
  }
  const std::size_t n = ds.size();
  const std::uint32_t dim = ds.dim();
  const std::uint32_t k = static_cast<std::uint32_t>(
      std::min<std::size_t>(n_centroids, n));

  IvfIndex index;
  index.ds_ = &ds;
  index.dim_ = dim;
  index.centroids_.resize(std::size_t(k) * dim);

  std::mt19937_64 rng(seed);

  // k-means++ seeding on squared distances.
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t first = bounded(rng, n);
  std::copy_n(ds.key(first).data(), dim, index.centroids_.begin());
  for (std::uint32_t c = 1; c < k; ++c) {
    const float* prev = index.centroids_.data() + std::size_t(c - 1) * dim;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i],
                             squared_l2(prev, ds.key(i).data(), dim));
      total += min_dist[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_dist[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = bounded(rng, n);
    }
    std::copy_n(ds.key(chosen).data(), dim,
                index.centroids_.begin() + std::size_t(c) * dim);
  }

  // Lloyd iterations until assignments stabilize.
  std::vector<std::uint32_t> assign(n, 0);
  constexpr int kMaxIters = 25;
  for (int iter = 0; iter < kMaxIters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t best_c = 0;
      for (std::uint32_t c = 0; c < k; ++c) {
        const double d = squared_l2(
            ds.key(i).data(), index.centroids_.data() + std::size_t(c) * dim,
            dim);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      if (assign[i] != best_c) {
        assign[i] = best_c;
        changed = true;
      }
    }
    if (!changed && iter > 0) {
      break;
    }

    std::vector<double> sums(std::size_t(k) * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto key = ds.key(i);
      double* target = sums.data() + std::size_t(assign[i]) * dim;
      for (std::uint32_t j = 0; j < dim; ++j) {
        target[j] += key[j];
      }
      ++counts[assign[i]];
    }
    for (std::uint32_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Reseed an empty centroid at the point farthest from its own
        // centroid (deterministic tie: lowest index).
        double worst = -1.0;
        std::size_t far = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = squared_l2(
              ds.key(i).data(),
              index.centroids_.data() + std::size_t(assign[i]) * dim, dim);
          if (d > worst) {
            worst = d;
            far = i;
          }
        }
        std::copy_n(ds.key(far).data(), dim,
                    index.centroids_.begin() + std::size_t(c) * dim);
        changed = true;
        continue;
      }
      float* target = index.centroids_.data() + std::size_t(c) * dim;
      const double inv = 1.0 / static_cast<double>(counts[c]);
      for (std::uint32_t j = 0; j < dim; ++j) {
        target[j] = static_cast<float>(sums[std::size_t(c) * dim + j] * inv);
      }
    }
  }

  index.lists_.resize(k);
  for (std::size_t i = 0; i < n; ++i) {
    index.lists_[assign[i]].push_back(static_cast<std::uint32_t>(i));
  }
  return index;
}

std::vector<Neighbor> IvfIndex::search(std::span<const float> query,
                                       std::uint32_t k,
                                       std::uint32_t nprobe) const {
  const Datastore& ds = *ds_;
  check_query(ds, query, k);
  if (nprobe < 1 || nprobe > n_centroids()) {
    raise(ErrorCode::InvalidParam,
          "nprobe must lie in [1, n_centroids]");
  }

  // Rank centroids by distance to the query.
  std::vector<std::pair<double, std::uint32_t>> ranked(n_centroids());
  for (std::uint32_t c = 0; c < n_centroids(); ++c) {
    ranked[c] = {squared_l2(query.data(),
                            centroids_.data() + std::size_t(c) * dim_, dim_),
                 c};
  }
  std::sort(ranked.begin(), ranked.end());

  std::priority_queue<HeapEntry, std::vector<HeapEntry>, WorseFirst> heap;
  for (std::uint32_t p = 0; p < nprobe; ++p) {
    scan_into_heap(ds, query, lists_[ranked[p].second], k, heap);
  }
  return drain_heap(ds, heap);
}

std::vector<std::uint32_t> distinct_counts(std::span<const Neighbor> neighbors) {
  if (neighbors.empty()) {
    raise(ErrorCode::EmptyInput, "distinct_counts of an empty neighbor list");
  }
  std::vector<std::uint32_t> counts(neighbors.size());
  std::vector<std::uint32_t> seen;
  std::uint32_t distinct = 0;
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    const std::uint32_t v = neighbors[j].value;
    if (std::find(seen.begin(), seen.end(), v) == seen.end()) {
      seen.push_back(v);
      ++distinct;
    }
    counts[j] = distinct;
  }
  return counts;
}

std::vector<double> knn_distribution(std::span<const Neighbor> neighbors,
                                     std::uint32_t k_r, double temperature,
                                     std::uint32_t vocab) {
  if (k_r < 1 || k_r > neighbors.size()) {
    raise(ErrorCode::InvalidParam,
          "k_r must lie in [1, |neighbors|]");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    raise(ErrorCode::InvalidParam, "temperature must be positive");
  }
  // Shift by the largest exponent (the smallest distance; lists are sorted).
  const double shift = -neighbors[0].squared_l2 / temperature;
  std::vector<double> dist(vocab, 0.0);
  double total = 0.0;
  for (std::uint32_t j = 0; j < k_r; ++j) {
    if (neighbors[j].value >= vocab) {
      raise(ErrorCode::ValueOutOfVocab, "neighbor value outside vocab");
    }
    const double w =
        std::exp(-neighbors[j].squared_l2 / temperature - shift);
    dist[neighbors[j].value] += w;
    total += w;
  }
  for (double& p : dist) {
    p /= total;
  }
  return dist;
}

}  // namespace knnstore
