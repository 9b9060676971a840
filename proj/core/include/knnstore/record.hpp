#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace knnstore {

// One datastore entry: a context key vector paired with the target token it
// preceded, the model probability of that token, and its location in the
// source corpus. `cost` is the translation cost filled in by the pruning
// stage; it is absent until then.
struct Record {
  std::vector<float> key;
  std::uint32_t value = 0;
  float prob = 1.0f;
  std::uint32_t sentence_id = 0;
  std::uint32_t position = 0;
  std::optional<float> cost;

  bool operator==(const Record&) const = default;
};

}  // namespace knnstore
