#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "knnstore/datastore.hpp"
#include "knnstore/query.hpp"
#include "knnstore/retrieval.hpp"

namespace knnstore {

// Two-layer fusion network over the retrieval features
// [d_1..d_K; c_1..c_K] producing softmax weights over the candidate neighbor
// counts Q = {0, 1, 2, 4, ..., K}. K must be a power of two. Parameters are
// double precision (the network is tiny and the gradient checks want the
// headroom); persisted as f64, magic "PCKM".
class MetaKNet {
 public:
  MetaKNet() = default;
  MetaKNet(std::uint32_t k_max, std::uint32_t hidden);

  // {0} followed by the powers of two up to K, ascending. |Q| = log2(K) + 2.
  static std::vector<std::uint32_t> q_values(std::uint32_t k_max);

  std::uint32_t k_max() const { return k_; }
  std::uint32_t hidden() const { return hidden_; }
  const std::vector<std::uint32_t>& q() const { return q_; }

  std::span<double> params() {
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }
  std::span<const double> params() const {
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }

  // Parameter layout: W1 (2K x hidden, row-major), b1 (hidden), W2
  // (hidden x |Q|, row-major), b2 (|Q|).
  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return std::size_t(2 * k_) * hidden_; }
  std::size_t w2_offset() const { return b1_offset() + hidden_; }
  std::size_t b2_offset() const {
    return w2_offset() + std::size_t(hidden_) * q_.size();
  }

  void save(const std::filesystem::path& path) const;
  static MetaKNet load(const std::filesystem::path& path);

 private:
  std::uint32_t k_ = 0;
  std::uint32_t hidden_ = 0;
  std::vector<std::uint32_t> q_;
  // Eigen-aligned so gradient reductions into this buffer round identically
  // across runs (see CompactNet).
  Eigen::VectorXd params_;
};

// Softmax weights over Q for exactly k_max neighbors (rectifier hidden
// activation). WrongNeighborCount otherwise.
std::vector<double> meta_k_forward(const MetaKNet& net,
                                   std::span<const Neighbor> neighbors);

struct FusedPrediction {
  std::vector<double> distribution;  // over vocab, sums to 1
  std::vector<double> weights;       // over Q, sums to 1
  std::vector<Neighbor> neighbors;
};

// Weighted ensemble over the per-k distributions; the k=0 slot contributes
// `base_dist` (the caller's model distribution, uniform if unknown).
FusedPrediction fuse(std::span<const double> weights,
                     std::span<const Neighbor> neighbors,
                     std::span<const double> base_dist, double temperature,
                     std::uint32_t vocab);

// -ln p_fused(gold) and its gradient with respect to the Meta-k parameters
// only. Exposed for gradient verification; training uses the same path.
double fused_nll(const MetaKNet& net, std::span<const Neighbor> neighbors,
                 std::span<const double> base_dist, double temperature,
                 std::uint32_t vocab, std::uint32_t gold);
std::pair<double, std::vector<double>> fused_nll_grad(
    const MetaKNet& net, std::span<const Neighbor> neighbors,
    std::span<const double> base_dist, double temperature, std::uint32_t vocab,
    std::uint32_t gold);

struct MetaKTrainConfig {
  std::uint32_t k_max = 16;
  std::uint32_t hidden = 32;
  double temperature = 10.0;
  std::uint32_t steps = 2000;
  std::uint32_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 4;
  std::size_t workers = 0;  // for the neighbor precomputation only
};

struct MetaKTrainResult {
  MetaKNet net;
  std::vector<double> trace;
};

// Minimizes the fused NLL of the gold values over the validation queries,
// updating Meta-k parameters only. Deterministic for a fixed seed.
MetaKTrainResult train_meta_k(const Datastore& ds,
                              std::span<const LabeledQuery> queries,
                              const MetaKTrainConfig& config);

}  // namespace knnstore
