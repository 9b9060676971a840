#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace knnstore {

// One retrieval query. `gold` is required by evaluation and Meta-k training;
// `base_dist` is the k=0 component of the fused prediction and defaults to
// uniform when empty.
struct LabeledQuery {
  std::vector<float> key;
  std::optional<std::uint32_t> gold;
  std::vector<double> base_dist;

  bool operator==(const LabeledQuery&) const = default;
};

// JSONL schema: {"query": [...], "gold": v?, "base_dist": [...]?} per line.
std::vector<LabeledQuery> read_queries_jsonl(const std::filesystem::path& path,
                                             std::uint32_t dim);
void write_queries_jsonl(const std::filesystem::path& path,
                         const std::vector<LabeledQuery>& queries);

}  // namespace knnstore
