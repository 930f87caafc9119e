#include "rotar/checkpoint.hpp"

#include <map>

#include "binary_io.hpp"

namespace rotar {

namespace {

constexpr std::string_view kMagic = "RTCK";
constexpr std::uint8_t kDtypeF32 = 0;

std::string kind_of(const nlohmann::json& config) {
  if (!config.is_object() || !config.contains("kind") || !config.at("kind").is_string()) {
    throw FormatError("checkpoint config lacks a 'kind'");
  }
  return config.at("kind").get<std::string>();
}

template <typename Model>
Checkpoint snapshot(const Model& model, const std::string& kind, std::uint64_t seed) {
  Checkpoint c;
  c.config = {{"kind", kind},
              {"model", model.config().to_json()},
              {"vocab", model.vocab().tokens()},
              {"seed", seed}};
  for (const Parameter<float>* p : model.params().all()) c.tensors.emplace_back(p->name, p->value);
  return c;
}

}  // namespace

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw MissingTensorError("checkpoint has no tensor '" + name + "'");
}

std::uint32_t Checkpoint::payload_crc() const {
  detail::ByteWriter w;
  for (const auto& [name, t] : tensors) {
    for (float v : t.data()) w.put_f32(v);
  }
  return detail::crc32_of(w.bytes());
}

std::vector<std::pair<std::string, Shape>> expected_tensor_shapes(const nlohmann::json& config) {
  const std::string kind = kind_of(config);
  if (!config.contains("model")) throw FormatError("checkpoint config lacks 'model'");
  if (kind == "student") {
    return StudentModel<float>::parameter_shapes(StudentConfig::from_json(config.at("model")));
  }
  if (kind == "teacher") {
    return TeacherModel<float>::parameter_shapes(TeacherConfig::from_json(config.at("model")));
  }
  throw FormatError("unknown checkpoint kind '" + kind + "'");
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  detail::ByteWriter w;
  w.put_bytes(kMagic);
  w.put<std::uint16_t>(kCheckpointVersion);
  const std::string config = checkpoint.config.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.put_bytes(config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  detail::ByteWriter payload;
  for (const auto& [name, t] : checkpoint.tensors) {
    if (name.size() > 0xffff) throw ValueError("tensor name too long: " + name.substr(0, 64));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(kDtypeF32);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    const std::size_t start = payload.size();
    for (float v : t.data()) payload.put_f32(v);
    w.put_bytes(std::string_view(payload.bytes()).substr(start));
  }
  w.put<std::uint32_t>(detail::crc32_of(payload.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.get_bytes(4) != kMagic) throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto config_len = r.get<std::uint32_t>();
  try {
    c.config = nlohmann::json::parse(r.get_bytes(config_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  std::string payload;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name(r.get_bytes(name_len));
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != kDtypeF32) throw FormatError("tensor '" + name + "' has unknown dtype tag");
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>();
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      numel *= d;
    }
    if (numel > r.remaining() / 4) throw FormatError("tensor '" + name + "' payload truncated");
    const std::string_view raw = r.get_bytes(numel * 4);
    payload.append(raw);
    detail::ByteReader pr(raw, "tensor '" + name + "'");
    std::vector<float> values(numel);
    for (auto& v : values) v = pr.get_f32();
    c.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  const auto stored_crc = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint checksum");
  if (stored_crc != detail::crc32_of(payload)) throw ChecksumError("checkpoint payload checksum mismatch");

  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : c.tensors) {
    if (!by_name.emplace(name, &t).second) throw FormatError("duplicate tensor '" + name + "'");
  }
  const auto expected = expected_tensor_shapes(c.config);
  for (const auto& [name, shape] : expected) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw MissingTensorError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeMismatchError("tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                               " but the config implies " + shape_string(shape));
    }
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw FormatError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

Checkpoint make_checkpoint(const StudentModel<float>& model, std::uint64_t seed) {
  return snapshot(model, "student", seed);
}

Checkpoint make_checkpoint(const TeacherModel<float>& model, std::uint64_t seed) {
  return snapshot(model, "teacher", seed);
}

Vocabulary checkpoint_vocab(const Checkpoint& checkpoint) {
  try {
    return Vocabulary(checkpoint.config.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint vocabulary: ") + e.what());
  }
}

void assign_parameters(ParameterSet<float>& params, const Checkpoint& checkpoint) {
  for (Parameter<float>* p : params.all()) {
    const Tensor<float>& t = checkpoint.tensor(p->name);
    if (t.shape() != p->value.shape()) {
      throw ShapeMismatchError("tensor '" + p->name + "' has shape " + shape_string(t.shape()) +
                               ", model expects " + shape_string(p->value.shape()));
    }
    p->value = t;
  }
}

std::unique_ptr<StudentModel<float>> load_student(const Checkpoint& checkpoint) {
  if (kind_of(checkpoint.config) != "student") throw FormatError("checkpoint does not hold a student model");
  auto model = std::make_unique<StudentModel<float>>(
      StudentConfig::from_json(checkpoint.config.at("model")), checkpoint_vocab(checkpoint), 0);
  assign_parameters(model->params(), checkpoint);
  return model;
}

std::unique_ptr<TeacherModel<float>> load_teacher(const Checkpoint& checkpoint) {
  if (kind_of(checkpoint.config) != "teacher") throw FormatError("checkpoint does not hold a teacher model");
  auto model = std::make_unique<TeacherModel<float>>(
      TeacherConfig::from_json(checkpoint.config.at("model")), checkpoint_vocab(checkpoint), 0);
  assign_parameters(model->params(), checkpoint);
  return model;
}

}  // namespace rotar
