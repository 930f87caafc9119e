#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rotar/model.hpp"

namespace rotar {

// A named-tensor snapshot with its configuration echo.
//
// File layout (all integers little-endian):
//   "RTCK" | u16 version | u32 config length | config JSON
//   u32 tensor count, then per tensor:
//     u16 name length | name | u8 dtype (0 = f32) | u8 rank | u32 dims... | payload
//   u32 CRC32 over every tensor payload byte
//
// The config echo is {"kind": "student" | "teacher", "model": {...},
// "vocab": [...], "seed": N}.
struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const;
  std::uint32_t payload_crc() const;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& checkpoint);
// Verifies magic, version, checksum, and every tensor shape against the
// names and shapes implied by the config echo. Raises ChecksumError,
// MissingTensorError or ShapeMismatchError respectively.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Names and shapes a config echo requires.
std::vector<std::pair<std::string, Shape>> expected_tensor_shapes(const nlohmann::json& config);

Checkpoint make_checkpoint(const StudentModel<float>& model, std::uint64_t seed);
Checkpoint make_checkpoint(const TeacherModel<float>& model, std::uint64_t seed);

Vocabulary checkpoint_vocab(const Checkpoint& checkpoint);
std::unique_ptr<StudentModel<float>> load_student(const Checkpoint& checkpoint);
std::unique_ptr<TeacherModel<float>> load_teacher(const Checkpoint& checkpoint);

// Copies tensor values into a parameter set by name.
void assign_parameters(ParameterSet<float>& params, const Checkpoint& checkpoint);

}  // namespace rotar
