#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "knnstore/error.hpp"

namespace knnstore::detail {

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian; big-endian hosts are unsupported");

class BinWriter {
 public:
  explicit BinWriter(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) {
      raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
    }
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

  void magic(const char tag[4]) { bytes(tag, 4); }
  void u16(std::uint16_t v) { bytes(&v, sizeof v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }

  void close() {
    out_.flush();
    if (!out_) {
      raise(ErrorCode::IoError, "write failed: " + path_.string());
    }
    out_.close();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) {
      raise(ErrorCode::IoError, "cannot open for reading: " + path.string());
    }
    in_.seekg(0, std::ios::end);
    size_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0, std::ios::beg);
  }

  std::uint64_t file_size() const { return size_; }
  std::uint64_t remaining() {
    return size_ - static_cast<std::uint64_t>(in_.tellg());
  }
  const std::filesystem::path& path() const { return path_; }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      raise(ErrorCode::TruncatedFile,
            "unexpected end of file: " + path_.string());
    }
  }

  // Reads 4 bytes and compares against the expected tag.
  void expect_magic(const char tag[4]) {
    char got[4] = {};
    bytes(got, 4);
    if (std::memcmp(got, tag, 4) != 0) {
      raise(ErrorCode::BadMagic,
            "bad magic in " + path_.string() + " (expected " +
                std::string(tag, 4) + ")");
    }
  }

  void expect_version(std::uint16_t expected) {
    const std::uint16_t got = u16();
    if (got != expected) {
      raise(ErrorCode::VersionMismatch,
            "unsupported version " + std::to_string(got) + " in " +
                path_.string());
    }
  }

  std::uint16_t u16() { std::uint16_t v; bytes(&v, sizeof v); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
  float f32() { float v; bytes(&v, sizeof v); return v; }
  double f64() { double v; bytes(&v, sizeof v); return v; }

  // Call once after the last field: leftover bytes mean a corrupt file.
  void expect_eof() {
    if (remaining() != 0) {
      raise(ErrorCode::TruncatedFile,
            "trailing bytes after payload: " + path_.string());
    }
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
};

}  // namespace knnstore::detail
