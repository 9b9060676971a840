#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "knnstore/query.hpp"
#include "knnstore/record.hpp"

namespace knnstore {

// Synthetic corpus generator. Each (value, cluster) pair is a Gaussian blob.
// `family_overlap` slides the per-value blob centers onto shared ambient
// anchors: at 0 every blob is well separated, near 1 blobs of different
// values coincide up to ~intra_spread and only a low-dimensional hidden
// offset still tells values apart. That hidden signal is what a contrastive
// compressor is supposed to find, so plain distance retrieval degrades on
// high-overlap stores while a linear probe on the hidden directions stays
// accurate.
struct SynthConfig {
  std::uint32_t vocab = 10;
  std::uint32_t dim = 64;
  std::uint32_t clusters_per_value = 4;
  std::uint32_t points_per_cluster = 64;
  float intra_spread = 1.0f;
  float family_overlap = 0.0f;
  std::uint64_t seed = 1;

  bool operator==(const SynthConfig&) const = default;
};

// The mixture behind a config: blob means and the orthonormal hidden
// directions (one per value). Exposed so diagnostics can probe the hidden
// signal independently of any trained model.
struct SynthModel {
  std::uint32_t vocab = 0;
  std::uint32_t dim = 0;
  std::uint32_t clusters_per_value = 0;
  std::vector<float> means;        // (vocab * clusters_per_value) x dim
  // One orthonormal direction per value. The ambient noise is shrunk along
  // these rows and the per-value mean offset is sized to that quieter noise,
  // so the signal is linearly recoverable yet carries too little energy for
  // plain L2 retrieval to see it among the loud dimensions.
  std::vector<float> hidden_dirs;  // vocab x dim, orthonormal rows

  std::span<const float> mean(std::uint32_t value, std::uint32_t cluster) const {
    return {means.data() + (std::size_t(value) * clusters_per_value + cluster) * dim,
            dim};
  }
  std::span<const float> hidden_dir(std::uint32_t value) const {
    return {hidden_dirs.data() + std::size_t(value) * dim, dim};
  }
};

// Deterministic: identical config (including seed) yields identical records.
// Sentences of length 16 are assigned over a shuffled record order so n-gram
// costs see mixed-value contexts.
std::vector<Record> synth_generate(const SynthConfig& config);

// Held-out draws from the same mixture (independent stream from the same
// seed). gold = source value; base_dist = uniform.
std::vector<LabeledQuery> synth_queries(const SynthConfig& config,
                                        std::size_t count);

SynthModel synth_model(const SynthConfig& config);

}  // namespace knnstore
