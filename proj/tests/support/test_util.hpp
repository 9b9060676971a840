#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "knnstore/datastore.hpp"
#include "knnstore/rng.hpp"

namespace testutil {

// Scratch directory removed when the object goes out of scope.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("knnstore_test_" + tag + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path file(const std::string& name) const {
    return path_ / name;
  }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path,
                        const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Uniform random store: keys in [0,1)^dim, probs in (0,1], one sentence of
// length 8 per 8 records.
inline knnstore::Datastore random_store(std::size_t count, std::uint32_t dim,
                                        std::uint32_t vocab,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<knnstore::Record> records(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& r = records[i];
    r.key.resize(dim);
    for (auto& x : r.key) {
      x = static_cast<float>(knnstore::uniform01(rng));
    }
    r.value = static_cast<std::uint32_t>(knnstore::bounded(rng, vocab));
    r.prob = static_cast<float>(
        std::max(1e-4, knnstore::uniform01(rng)));
    r.sentence_id = static_cast<std::uint32_t>(i / 8);
    r.position = static_cast<std::uint32_t>(i % 8);
  }
  return knnstore::Datastore::build(records, dim, vocab);
}

}  // namespace testutil
