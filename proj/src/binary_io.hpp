#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rotar/error.hpp"

namespace rotar::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  template <typename U>
  void put(U value) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
    }
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::string_view s) { bytes_.append(s.data(), s.size()); }

  std::string& bytes() { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

  template <typename U>
  U get() {
    static_assert(std::is_integral_v<U>);
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(context_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes);
std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file, syncs it, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace rotar::detail
