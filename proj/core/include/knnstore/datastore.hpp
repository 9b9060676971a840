#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "knnstore/record.hpp"

namespace knnstore {

// Immutable key-value datastore. Fields are stored column-wise so full scans
// stream contiguously; Record is the exchange type at the boundaries.
//
// Costs are all-or-none: either every record carries one or none does
// (the on-disk format has a single store-wide flag).
//
// Thread safety: immutable after construction, safe for concurrent readers.
class Datastore {
 public:
  Datastore() = default;

  // Validates every record invariant: key length and finiteness, value range,
  // prob in (0,1], cost >= 1 when present, cost uniformity, and uniqueness of
  // (sentence_id, position) pairs. Rejects empty input.
  static Datastore build(std::span<const Record> records, std::uint32_t dim,
                         std::uint32_t vocab);

  std::uint32_t dim() const { return dim_; }
  std::uint32_t vocab() const { return vocab_; }
  std::size_t size() const { return values_.size(); }
  bool has_costs() const { return !costs_.empty(); }

  std::span<const float> key(std::size_t i) const {
    return {keys_.data() + i * dim_, dim_};
  }
  std::uint32_t value(std::size_t i) const { return values_[i]; }
  float prob(std::size_t i) const { return probs_[i]; }
  std::uint32_t sentence_id(std::size_t i) const { return sentence_ids_[i]; }
  std::uint32_t position(std::size_t i) const { return positions_[i]; }
  // Only valid when has_costs().
  float cost(std::size_t i) const { return costs_[i]; }

  std::span<const float> keys() const { return keys_; }
  std::span<const std::uint32_t> values() const { return values_; }
  std::span<const float> probs() const { return probs_; }
  std::span<const float> costs() const { return costs_; }

  Record record(std::size_t i) const;

  // Copy of this store with `costs` attached (one per record, each >= 1).
  Datastore with_costs(std::vector<float> costs) const;

  // Copy containing exactly the rows in `indices` (strictly increasing),
  // bytes preserved. This is the primitive every pruner reduces to.
  Datastore subset(std::span<const std::uint32_t> indices) const;

  // Binary round trip, bit-exact. Format: magic "PCKD", version u16, flags
  // u16 (bit 0: costs present), dim u32, vocab u32, count u64, then
  // fixed-stride records (key f32[dim], value u32, prob f32, sentence_id u32,
  // position u32, [cost f32]), little-endian throughout.
  void save(const std::filesystem::path& path) const;
  static Datastore load(const std::filesystem::path& path);

  // One JSON object per line: {"key": [...], "value": v, "prob": p,
  // "sentence_id": s, "position": i} with an optional "cost". Parse errors
  // report 1-based line numbers.
  static Datastore import_jsonl(const std::filesystem::path& path,
                                std::uint32_t dim, std::uint32_t vocab);

  // Bitwise comparison (floats compared by representation, not value).
  bool operator==(const Datastore& other) const;

 private:
  std::uint32_t dim_ = 0;
  std::uint32_t vocab_ = 0;
  std::vector<float> keys_;
  std::vector<std::uint32_t> values_;
  std::vector<float> probs_;
  std::vector<std::uint32_t> sentence_ids_;
  std::vector<std::uint32_t> positions_;
  std::vector<float> costs_;  // empty or size()

  void validate() const;
};

}  // namespace knnstore
