#pragma once

#include <stdexcept>
#include <string>

namespace rotar {

// Root of every exception thrown by the library. The `kind()` tag is what the
// CLI prints in its one-line machine-parsable error.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ROTAR_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  }

ROTAR_DEFINE_ERROR(DimensionError, "dimension");
ROTAR_DEFINE_ERROR(ValueError, "value");
ROTAR_DEFINE_ERROR(NumericError, "numeric");
ROTAR_DEFINE_ERROR(ParseError, "parse");
ROTAR_DEFINE_ERROR(IoError, "io");
ROTAR_DEFINE_ERROR(FormatError, "format");
ROTAR_DEFINE_ERROR(ChecksumError, "checksum");
ROTAR_DEFINE_ERROR(ShapeMismatchError, "shape_mismatch");
ROTAR_DEFINE_ERROR(MissingTensorError, "missing_tensor");
ROTAR_DEFINE_ERROR(StaleCacheError, "stale_cache");
ROTAR_DEFINE_ERROR(NotFoundError, "not_found");
ROTAR_DEFINE_ERROR(ConfigError, "config");

#undef ROTAR_DEFINE_ERROR

}  // namespace rotar
