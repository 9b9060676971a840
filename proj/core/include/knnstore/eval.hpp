#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knnstore/datastore.hpp"
#include "knnstore/metak.hpp"
#include "knnstore/query.hpp"
#include "knnstore/retrieval.hpp"

namespace knnstore {

// Retrieval quality plus measured speed. The quality fields are deterministic
// for fixed inputs; latency and throughput are wall-clock measurements.
struct EvalReport {
  static constexpr std::uint32_t kRecallKs[4] = {1, 4, 8, 16};

  double recall_at[4] = {0, 0, 0, 0};
  double fused_top1_accuracy = 0.0;
  double mean_fused_nll = 0.0;
  std::uint64_t store_count = 0;
  std::uint32_t store_dim = 0;
  double mean_latency_us = 0.0;
  double queries_per_second = 0.0;
  std::size_t workers = 1;

  std::string to_json() const;
};

struct EvalOptions {
  std::size_t workers = 1;
  // When set, searches go through the index (with `nprobe`) instead of the
  // flat scan.
  const IvfIndex* ivf = nullptr;
  std::uint32_t nprobe = 8;
};

// recall@k = fraction of queries whose gold value appears among the top-k
// neighbor values; fusion uses the first k_max neighbors and the query's base
// distribution (uniform when absent). Every query must carry a gold value.
EvalReport evaluate(const Datastore& ds, std::span<const LabeledQuery> queries,
                    const MetaKNet& metak, double temperature,
                    const EvalOptions& options = {});

struct BenchConfig {
  std::uint32_t k = 16;
  std::uint32_t repeats = 5;
  std::size_t workers = 1;
};

struct BenchRow {
  std::string label;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  std::uint32_t k = 0;
  std::uint32_t repeats = 0;
  std::size_t workers = 1;
  double median_us = 0.0;
  double p95_us = 0.0;
  double queries_per_second = 0.0;
};

// Flat-scan latency per store: one warm-up pass, then `repeats` timed passes.
// Per-query latencies are pooled across repeats for the median and p95;
// throughput is the median of the per-repeat rates.
std::vector<BenchRow> bench(const std::vector<const Datastore*>& stores,
                            const std::vector<std::string>& labels,
                            std::span<const LabeledQuery> queries,
                            const BenchConfig& config);

std::string bench_csv(const std::vector<BenchRow>& rows);
std::string bench_table(const std::vector<BenchRow>& rows);

}  // namespace knnstore
