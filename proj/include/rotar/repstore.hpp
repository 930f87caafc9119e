#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rotar/checkpoint.hpp"

namespace rotar {

using Fingerprint = std::array<std::uint8_t, 32>;

// SHA-256 over the canonical JSON of the row-encoder config and vocabulary,
// followed by the little-endian CRC32 of the checkpoint's weights.
Fingerprint encoder_fingerprint(const EncoderConfig& config, const Vocabulary& vocab,
                                std::uint32_t weights_crc);
Fingerprint encoder_fingerprint(const Checkpoint& student_checkpoint);
std::string to_hex(const Fingerprint& fp);

// Row vectors keyed by table id, each an [N x dim] matrix in row order.
//
// File layout (little-endian):
//   "ROTR" | u16 version = 1 | u32 dim | u32 table count | 32-byte fingerprint
//   per table: u16 id length | UTF-8 id | u32 row count | f32 payload
//   u32 CRC32 of every preceding byte
//
// Writers serialize through an advisory lock on "<path>.lock" and replace
// the file atomically, so readers never see a partial store.
class RepStore {
 public:
  RepStore(std::size_t dim, Fingerprint fingerprint);

  static RepStore load(const std::filesystem::path& path);
  static RepStore decode(std::string_view bytes);
  std::string encode() const;

  // Writes the store. Tables already in the file at `path` that carry the
  // same fingerprint and are not present here are kept.
  void save(const std::filesystem::path& path) const;

  std::size_t dim() const { return dim_; }
  const Fingerprint& fingerprint() const { return fingerprint_; }
  std::size_t size() const { return tables_.size(); }
  std::vector<std::string> table_ids() const;
  bool contains(const std::string& table_id) const { return tables_.count(table_id) != 0; }

  // Both raise StaleCacheError when `fingerprint` is not the store's.
  void put(const Fingerprint& fingerprint, const std::string& table_id, const Tensor<float>& rows);
  // NotFoundError for unknown tables.
  const Tensor<float>& get(const Fingerprint& fingerprint, const std::string& table_id) const;

  bool operator==(const RepStore&) const = default;

 private:
  void check(const Fingerprint& fingerprint) const;

  std::size_t dim_;
  Fingerprint fingerprint_;
  std::map<std::string, Tensor<float>> tables_;
};

inline constexpr std::uint16_t kRepStoreVersion = 1;

}  // namespace rotar
