#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "knnstore/compact.hpp"
#include "knnstore/metak.hpp"
#include "knnstore/pruning.hpp"
#include "knnstore/synth.hpp"

namespace knnstore {

// One JSON manifest for the whole pipeline; each section mirrors the owning
// module's config and every field has the default shown here. Unknown fields
// are rejected so typos fail loudly. CLI flags override config values.
struct PipelineConfig {
  static constexpr std::uint32_t kSchemaVersion = 1;

  SynthConfig gen;
  std::uint64_t gen_queries = 1000;

  struct ClusterSection {
    double eps = 0.0;  // <= 0 selects the per-family k-dist heuristic
    std::uint32_t min_pts = 4;
    std::size_t workers = 0;
  } cluster;

  TrainConfig compact;
  bool compact_clustered = true;  // false: one cluster per value (no CL)

  PruneConfig prune;

  MetaKTrainConfig metak;

  struct QuerySection {
    double temperature = 10.0;
    std::uint32_t top = 8;
    bool dump_neighbors = false;
    std::uint32_t ivf_centroids = 0;  // 0 disables the coarse index
    std::uint32_t nprobe = 8;
    std::uint64_t ivf_seed = 5;
    std::size_t workers = 0;
  } query;

  struct BenchSection {
    std::uint32_t k = 16;
    std::uint32_t repeats = 5;
    std::size_t workers = 1;
  } bench;

  std::string to_json() const;
  static PipelineConfig from_json(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

const char* loss_mix_name(LossMix mix);
LossMix parse_loss_mix(const std::string& name);
const char* pivot_mode_name(PivotMode mode);
PivotMode parse_pivot_mode(const std::string& name);

}  // namespace knnstore
