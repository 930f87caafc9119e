#include "rotar/repstore.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "binary_io.hpp"

namespace rotar {

namespace {

constexpr std::string_view kMagic = "ROTR";

class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file '" + path.string() + "': " + std::strerror(errno));
    while (::flock(fd_, LOCK_EX) != 0) {
      if (errno == EINTR) continue;
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw IoError("cannot lock '" + path.string() + "': " + err);
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace

Fingerprint encoder_fingerprint(const EncoderConfig& config, const Vocabulary& vocab,
                                std::uint32_t weights_crc) {
  const nlohmann::json canonical = {{"encoder", config.to_json()}, {"vocab", vocab.tokens()}};
  std::string message = canonical.dump();
  detail::ByteWriter w;
  w.put<std::uint32_t>(weights_crc);
  message += w.bytes();
  Fingerprint fp{};
  unsigned int len = 0;
  if (EVP_Digest(message.data(), message.size(), fp.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != fp.size()) {
    throw Error("crypto", "SHA-256 digest failed");
  }
  return fp;
}

Fingerprint encoder_fingerprint(const Checkpoint& checkpoint) {
  if (checkpoint.config.value("kind", std::string()) != "student") {
    throw FormatError("fingerprints are defined for student checkpoints only");
  }
  const auto config = StudentConfig::from_json(checkpoint.config.at("model"));
  return encoder_fingerprint(config.row_encoder, checkpoint_vocab(checkpoint), checkpoint.payload_crc());
}

std::string to_hex(const Fingerprint& fp) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (std::uint8_t b : fp) {
    out += kDigits[b >> 4];
    out += kDigits[b & 0xf];
  }
  return out;
}

RepStore::RepStore(std::size_t dim, Fingerprint fingerprint) : dim_(dim), fingerprint_(fingerprint) {
  if (dim == 0) throw ValueError("store dim must be >= 1");
}

std::vector<std::string> RepStore::table_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, rows] : tables_) ids.push_back(id);
  return ids;
}

void RepStore::check(const Fingerprint& fingerprint) const {
  if (fingerprint != fingerprint_) {
    throw StaleCacheError("store fingerprint " + to_hex(fingerprint_).substr(0, 16) +
                          " does not match encoder " + to_hex(fingerprint).substr(0, 16));
  }
}

void RepStore::put(const Fingerprint& fingerprint, const std::string& table_id, const Tensor<float>& rows) {
  check(fingerprint);
  if (table_id.empty() || table_id.size() > 0xffff) throw ValueError("invalid table id length");
  if (rows.rank() != 2 || rows.dim(1) != dim_) {
    throw DimensionError("store expects [N x " + std::to_string(dim_) + "] rows, got " +
                         shape_string(rows.shape()));
  }
  tables_.insert_or_assign(table_id, rows);
}

const Tensor<float>& RepStore::get(const Fingerprint& fingerprint, const std::string& table_id) const {
  check(fingerprint);
  auto it = tables_.find(table_id);
  if (it == tables_.end()) throw NotFoundError("table '" + table_id + "' is not in the store");
  return it->second;
}

std::string RepStore::encode() const {
  detail::ByteWriter w;
  w.put_bytes(kMagic);
  w.put<std::uint16_t>(kRepStoreVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tables_.size()));
  w.put_bytes(std::string_view(reinterpret_cast<const char*>(fingerprint_.data()), fingerprint_.size()));
  for (const auto& [id, rows] : tables_) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(id.size()));
    w.put_bytes(id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rows.dim(0)));
    for (float v : rows.data()) w.put_f32(v);
  }
  w.put<std::uint32_t>(detail::crc32_of(w.bytes()));
  return std::move(w.bytes());
}

RepStore RepStore::decode(std::string_view bytes) {
  if (bytes.size() < 4) throw FormatError("store: file too short");
  detail::ByteReader tail(bytes.substr(bytes.size() - 4), "store");
  if (tail.get<std::uint32_t>() != detail::crc32_of(bytes.substr(0, bytes.size() - 4))) {
    throw ChecksumError("store checksum mismatch");
  }
  detail::ByteReader r(bytes.substr(0, bytes.size() - 4), "store");
  if (r.get_bytes(4) != kMagic) throw FormatError("not a row store (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kRepStoreVersion) throw FormatError("unsupported store version " + std::to_string(version));
  const auto dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  Fingerprint fp{};
  const auto raw_fp = r.get_bytes(fp.size());
  std::memcpy(fp.data(), raw_fp.data(), fp.size());
  RepStore store(dim, fp);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto id_len = r.get<std::uint16_t>();
    std::string id(r.get_bytes(id_len));
    const auto n = r.get<std::uint32_t>();
    if (n == 0) throw FormatError("store: table '" + id + "' has no rows");
    if (static_cast<std::uint64_t>(n) * dim > r.remaining() / 4) {
      throw FormatError("store: table '" + id + "' payload truncated");
    }
    std::vector<float> values(static_cast<std::size_t>(n) * dim);
    for (auto& v : values) v = r.get_f32();
    if (!store.tables_.emplace(id, Tensor<float>({n, dim}, std::move(values))).second) {
      throw FormatError("store: duplicate table '" + id + "'");
    }
  }
  if (r.remaining() != 0) throw FormatError("store: unexpected trailing bytes");
  return store;
}

RepStore RepStore::load(const std::filesystem::path& path) { return decode(detail::read_file(path)); }

void RepStore::save(const std::filesystem::path& path) const {
  FileLock lock(path.string() + ".lock");
  RepStore merged = *this;
  if (std::filesystem::exists(path)) {
    RepStore existing = load(path);
    if (existing.fingerprint_ == fingerprint_ && existing.dim_ == dim_) {
      for (auto& [id, rows] : existing.tables_) merged.tables_.emplace(id, std::move(rows));
    }
  }
  detail::write_file_atomic(path, merged.encode());
}

}  // namespace rotar
