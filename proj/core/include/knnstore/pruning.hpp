#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "knnstore/clustering.hpp"
#include "knnstore/datastore.hpp"

namespace knnstore {

enum class PruneStrategy { Cluster, Sp, Ltp, Htp, Rp };

struct PruneConfig {
  double rate = 0.3;      // fraction REMOVED: 0.1 prunes 10%, keeps 90%
  double epsilon = 0.05;  // cost-group threshold for the cluster strategy
  std::uint32_t n = 2;    // max n-gram length for translation costs
  PruneStrategy strategy = PruneStrategy::Cluster;
  std::uint64_t seed = 3;
};

// Perplexity of a probability sequence: exp(-(1/b) * sum(ln p_i)).
double ppl(std::span<const float> probs);

// Fills every record's translation cost: the minimum perplexity over all
// suffix n-grams of length 1..n ending at that token, with the length capped
// at position + 1 so sentence-initial tokens only admit the unigram.
// Requires each sentence's positions to be exactly 0..len-1.
Datastore translation_cost(const Datastore& ds, std::uint32_t n);

// Algorithm: group each value's records by translation cost (1-D clustering
// at epsilon), then uniformly keep ceil((1 - rate) * |group|) per group.
Datastore prune_cluster(const Datastore& ds, const PruneConfig& config);

// Removes the rate-fraction of each key-space cluster farthest from its
// centroid (ties by record index).
Datastore prune_sp(const Datastore& ds, const ClusterFamilies& families,
                   const PruneConfig& config);

// Global order statistics on prob: Ltp removes the lowest-prob fraction,
// Htp the highest (ties by record index).
Datastore prune_ltp(const Datastore& ds, const PruneConfig& config);
Datastore prune_htp(const Datastore& ds, const PruneConfig& config);

// Uniformly keeps ceil((1 - rate) * size) members of each key-space cluster.
Datastore prune_rp(const Datastore& ds, const ClusterFamilies& families,
                   const PruneConfig& config);

// Dispatch on config.strategy. Cluster/Ltp/Htp ignore `families`; Sp/Rp
// require it (MissingFamilies when null).
Datastore prune(const Datastore& ds, const ClusterFamilies* families,
                const PruneConfig& config);

const char* strategy_name(PruneStrategy s);
PruneStrategy parse_strategy(const std::string& name);

struct PruneReport {
  PruneStrategy strategy = PruneStrategy::Cluster;
  std::uint64_t input_count = 0;
  std::uint64_t output_count = 0;
  double target_rate = 0.0;
  double achieved_rate = 0.0;

  std::string to_json() const;
};

PruneReport make_report(const Datastore& input, const Datastore& output,
                        const PruneConfig& config);

}  // namespace knnstore
