#include "knnstore/datastore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "binio.hpp"
#include "knnstore/error.hpp"

namespace knnstore {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'D'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint16_t kFlagCosts = 1u << 0;

std::uint64_t pair_key(std::uint32_t sentence_id, std::uint32_t position) {
  return (static_cast<std::uint64_t>(sentence_id) << 32) | position;
}

}  // namespace

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ValueOutOfVocab: return "ValueOutOfVocab";
    case ErrorCode::ProbOutOfRange: return "ProbOutOfRange";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidParam: return "InvalidParam";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingHead: return "MissingHead";
    case ErrorCode::InsufficientFamilies: return "InsufficientFamilies";
    case ErrorCode::NonContiguousSentence: return "NonContiguousSentence";
    case ErrorCode::MissingCosts: return "MissingCosts";
    case ErrorCode::MissingFamilies: return "MissingFamilies";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::WrongNeighborCount: return "WrongNeighborCount";
    case ErrorCode::InvalidDistribution: return "InvalidDistribution";
    case ErrorCode::MissingGold: return "MissingGold";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "UnknownError";
}

Datastore Datastore::build(std::span<const Record> records, std::uint32_t dim,
                           std::uint32_t vocab) {
  if (dim == 0 || vocab == 0) {
    raise(ErrorCode::InvalidParam, "dim and vocab must be positive");
  }
  if (records.empty()) {
    raise(ErrorCode::EmptyInput, "cannot build a datastore from zero records");
  }

  Datastore ds;
  ds.dim_ = dim;
  ds.vocab_ = vocab;
  const std::size_t n = records.size();
  ds.keys_.reserve(n * dim);
  ds.values_.reserve(n);
  ds.probs_.reserve(n);
  ds.sentence_ids_.reserve(n);
  ds.positions_.reserve(n);
  const bool with_cost = records.front().cost.has_value();
  if (with_cost) {
    ds.costs_.reserve(n);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Record& r = records[i];
    if (r.key.size() != dim) {
      raise(ErrorCode::DimensionMismatch,
            "record " + std::to_string(i) + " has key length " +
                std::to_string(r.key.size()) + ", expected " +
                std::to_string(dim));
    }
    if (r.cost.has_value() != with_cost) {
      raise(ErrorCode::InvalidParam,
            "record " + std::to_string(i) +
                " breaks cost uniformity (costs are all-or-none)");
    }
    ds.keys_.insert(ds.keys_.end(), r.key.begin(), r.key.end());
    ds.values_.push_back(r.value);
    ds.probs_.push_back(r.prob);
    ds.sentence_ids_.push_back(r.sentence_id);
    ds.positions_.push_back(r.position);
    if (with_cost) {
      ds.costs_.push_back(*r.cost);
    }
  }
  ds.validate();
  return ds;
}

void Datastore::validate() const {
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) {
    if (values_[i] >= vocab_) {
      raise(ErrorCode::ValueOutOfVocab,
            "record " + std::to_string(i) + " has value " +
                std::to_string(values_[i]) + " >= vocab " +
                std::to_string(vocab_));
    }
    const float p = probs_[i];
    if (!(p > 0.0f && p <= 1.0f)) {
      raise(ErrorCode::ProbOutOfRange,
            "record " + std::to_string(i) + " has prob " + std::to_string(p) +
                " outside (0, 1]");
    }
    if (!costs_.empty()) {
      const float c = costs_[i];
      if (!std::isfinite(c) || c < 1.0f) {
        raise(ErrorCode::InvalidParam,
              "record " + std::to_string(i) + " has cost " +
                  std::to_string(c) + " < 1");
      }
    }
  }
  for (const float x : keys_) {
    if (!std::isfinite(x)) {
      raise(ErrorCode::InvalidParam, "key contains a non-finite entry");
    }
  }
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen.insert(pair_key(sentence_ids_[i], positions_[i])).second) {
      raise(ErrorCode::InvalidParam,
            "duplicate (sentence_id, position) = (" +
                std::to_string(sentence_ids_[i]) + ", " +
                std::to_string(positions_[i]) + ")");
    }
  }
}

Record Datastore::record(std::size_t i) const {
  Record r;
  const auto k = key(i);
  r.key.assign(k.begin(), k.end());
  r.value = values_[i];
  r.prob = probs_[i];
  r.sentence_id = sentence_ids_[i];
  r.position = positions_[i];
  if (has_costs()) {
    r.cost = costs_[i];
  }
  return r;
}

Datastore Datastore::with_costs(std::vector<float> costs) const {
  if (costs.size() != size()) {
    raise(ErrorCode::InvalidParam, "cost vector length must equal store size");
  }
  Datastore out = *this;
  out.costs_ = std::move(costs);
  out.validate();
  return out;
}

Datastore Datastore::subset(std::span<const std::uint32_t> indices) const {
  if (indices.empty()) {
    raise(ErrorCode::EmptyInput, "subset selects zero records");
  }
  Datastore out;
  out.dim_ = dim_;
  out.vocab_ = vocab_;
  const std::size_t n = indices.size();
  out.keys_.resize(n * dim_);
  out.values_.resize(n);
  out.probs_.resize(n);
  out.sentence_ids_.resize(n);
  out.positions_.resize(n);
  if (has_costs()) {
    out.costs_.resize(n);
  }
  std::uint32_t prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t idx = indices[i];
    if (idx >= size() || (i > 0 && idx <= prev)) {
      raise(ErrorCode::InvalidParam,
            "subset indices must be strictly increasing and in range");
    }
    prev = idx;
    std::memcpy(out.keys_.data() + i * dim_, keys_.data() + idx * dim_,
                sizeof(float) * dim_);
    out.values_[i] = values_[idx];
    out.probs_[i] = probs_[idx];
    out.sentence_ids_[i] = sentence_ids_[idx];
    out.positions_[i] = positions_[idx];
    if (has_costs()) {
      out.costs_[i] = costs_[idx];
    }
  }
  return out;
}

void Datastore::save(const std::filesystem::path& path) const {
  detail::BinWriter w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u16(has_costs() ? kFlagCosts : 0);
  w.u32(dim_);
  w.u32(vocab_);
  w.u64(size());
  for (std::size_t i = 0; i < size(); ++i) {
    w.bytes(keys_.data() + i * dim_, sizeof(float) * dim_);
    w.u32(values_[i]);
    w.f32(probs_[i]);
    w.u32(sentence_ids_[i]);
    w.u32(positions_[i]);
    if (has_costs()) {
      w.f32(costs_[i]);
    }
  }
  w.close();
}

Datastore Datastore::load(const std::filesystem::path& path) {
  detail::BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  const std::uint16_t flags = r.u16();
  const bool with_costs = (flags & kFlagCosts) != 0;

  Datastore ds;
  ds.dim_ = r.u32();
  ds.vocab_ = r.u32();
  const std::uint64_t count = r.u64();
  if (ds.dim_ == 0 || ds.vocab_ == 0 || count == 0) {
    raise(ErrorCode::TruncatedFile, "corrupt header in " + path.string());
  }
  const std::uint64_t stride =
      sizeof(float) * ds.dim_ + 16 + (with_costs ? 4 : 0);
  if (r.remaining() != stride * count) {
    raise(ErrorCode::TruncatedFile,
          "payload size mismatch in " + path.string() + " (expected " +
              std::to_string(stride * count) + " bytes, have " +
              std::to_string(r.remaining()) + ")");
  }

  ds.keys_.resize(count * ds.dim_);
  ds.values_.resize(count);
  ds.probs_.resize(count);
  ds.sentence_ids_.resize(count);
  ds.positions_.resize(count);
  if (with_costs) {
    ds.costs_.resize(count);
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    r.bytes(ds.keys_.data() + i * ds.dim_, sizeof(float) * ds.dim_);
    ds.values_[i] = r.u32();
    ds.probs_[i] = r.f32();
    ds.sentence_ids_[i] = r.u32();
    ds.positions_[i] = r.u32();
    if (with_costs) {
      ds.costs_[i] = r.f32();
    }
  }
  r.expect_eof();
  ds.validate();
  return ds;
}

Datastore Datastore::import_jsonl(const std::filesystem::path& path,
                                  std::uint32_t dim, std::uint32_t vocab) {
  std::ifstream in(path);
  if (!in) {
    raise(ErrorCode::IoError, "cannot open for reading: " + path.string());
  }
  std::vector<Record> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::ParseError,
            "line " + std::to_string(line_no) + ": " + e.what());
    }
    auto require = [&](const char* field) -> const nlohmann::json& {
      auto it = obj.find(field);
      if (it == obj.end()) {
        raise(ErrorCode::ParseError, "line " + std::to_string(line_no) +
                                         ": missing field \"" + field + "\"");
      }
      return *it;
    };
    Record rec;
    try {
      const auto& key = require("key");
      if (!key.is_array()) {
        raise(ErrorCode::ParseError,
              "line " + std::to_string(line_no) + ": \"key\" must be an array");
      }
      rec.key = key.get<std::vector<float>>();
      rec.value = require("value").get<std::uint32_t>();
      rec.prob = require("prob").get<float>();
      rec.sentence_id = require("sentence_id").get<std::uint32_t>();
      rec.position = require("position").get<std::uint32_t>();
      if (auto it = obj.find("cost"); it != obj.end()) {
        rec.cost = it->get<float>();
      }
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::ParseError,
            "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (rec.key.size() != dim) {
      raise(ErrorCode::DimensionMismatch,
            "line " + std::to_string(line_no) + ": key length " +
                std::to_string(rec.key.size()) + " != dim " +
                std::to_string(dim));
    }
    records.push_back(std::move(rec));
  }
  return build(records, dim, vocab);
}

bool Datastore::operator==(const Datastore& other) const {
  auto bits_equal = [](const std::vector<float>& a,
                       const std::vector<float>& b) {
    return a.size() == b.size() &&
           (a.empty() ||
            std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  };
  return dim_ == other.dim_ && vocab_ == other.vocab_ &&
         bits_equal(keys_, other.keys_) && values_ == other.values_ &&
         bits_equal(probs_, other.probs_) &&
         sentence_ids_ == other.sentence_ids_ &&
         positions_ == other.positions_ && bits_equal(costs_, other.costs_);
}

}  // namespace knnstore
