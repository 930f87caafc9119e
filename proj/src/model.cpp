#include "rotar/model.hpp"

#include <cmath>

#include "rotar/ops.hpp"

namespace rotar {

void StudentConfig::validate() const {
  row_encoder.validate();
  query_encoder.validate();
  aggregation.validate();
  if (row_encoder.dim != query_encoder.dim) {
    throw ConfigError("student: row encoder dim " + std::to_string(row_encoder.dim) +
                      " differs from query encoder dim " + std::to_string(query_encoder.dim));
  }
  if (head.head_dim == 0) throw ConfigError("student: head_dim must be >= 1");
}

nlohmann::json StudentConfig::to_json() const {
  return {{"row_encoder", row_encoder.to_json()},
          {"query_encoder", query_encoder.to_json()},
          {"aggregation", aggregation.to_json()},
          {"head", head.to_json()}};
}

StudentConfig StudentConfig::from_json(const nlohmann::json& j) {
  StudentConfig c;
  if (j.contains("row_encoder")) c.row_encoder = EncoderConfig::from_json(j.at("row_encoder"));
  if (j.contains("query_encoder")) c.query_encoder = EncoderConfig::from_json(j.at("query_encoder"));
  if (j.contains("aggregation")) c.aggregation = AggregationSpec::from_json(j.at("aggregation"));
  if (j.contains("head")) c.head = HeadConfig::from_json(j.at("head"));
  return c;
}

EncoderConfig TeacherConfig::defaults() {
  EncoderConfig c;
  c.pe = {true, true, true, true};
  c.max_len = 512;
  return c;
}

void TeacherConfig::validate() const {
  encoder.validate();
  if (head.head_dim == 0) throw ConfigError("teacher: head_dim must be >= 1");
}

nlohmann::json TeacherConfig::to_json() const {
  return {{"encoder", encoder.to_json()}, {"head", head.to_json()}};
}

TeacherConfig TeacherConfig::from_json(const nlohmann::json& j) {
  TeacherConfig c;
  if (j.contains("encoder")) {
    nlohmann::json merged = defaults().to_json();
    merged.merge_patch(j.at("encoder"));
    c.encoder = EncoderConfig::from_json(merged);
  }
  if (j.contains("head")) c.head = HeadConfig::from_json(j.at("head"));
  return c;
}

namespace {

// Seeds for each sub-module are drawn up front so adding a module never
// shifts the initialization of another.
struct InitSeeds {
  std::mt19937_64 a, b, c, d;
  explicit InitSeeds(std::uint64_t seed) {
    std::mt19937_64 root(seed);
    a.seed(root());
    b.seed(root());
    c.seed(root());
    d.seed(root());
  }
};

EncoderConfig with_vocab(EncoderConfig c, const Vocabulary& vocab) {
  if (c.vocab_size != 0 && c.vocab_size != vocab.size()) {
    throw ConfigError("encoder vocab_size " + std::to_string(c.vocab_size) +
                      " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  c.vocab_size = vocab.size();
  return c;
}

StudentConfig resolve(StudentConfig c, const Vocabulary& vocab) {
  c.row_encoder = with_vocab(c.row_encoder, vocab);
  c.query_encoder = with_vocab(c.query_encoder, vocab);
  c.validate();
  return c;
}

TeacherConfig resolve(TeacherConfig c, const Vocabulary& vocab) {
  c.encoder = with_vocab(c.encoder, vocab);
  c.validate();
  return c;
}

}  // namespace

template <typename T>
StudentModel<T>::StudentModel(StudentConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(resolve(std::move(config), vocab)), vocab_(std::move(vocab)) {
  InitSeeds s(seed);
  row_encoder_ = TransformerEncoder<T>(params_, "row_encoder", config_.row_encoder, s.a);
  query_encoder_ = TransformerEncoder<T>(params_, "query_encoder", config_.query_encoder, s.b);
  // Both encoders start from the same weights wherever shapes agree, the way
  // two copies of one pretrained encoder would.
  for (Parameter<T>* q : params_.with_prefix("query_encoder.")) {
    const std::string twin = "row_encoder." + q->name.substr(std::string("query_encoder.").size());
    if (params_.contains(twin) && params_.get(twin).value.shape() == q->value.shape()) {
      q->value = params_.get(twin).value;
    }
  }
  aggregator_ = Aggregator<T>(params_, "aggregation", config_.aggregation, config_.row_encoder.dim, s.c);
  head_ = HeadStack<T>(params_, "head", config_.row_encoder.dim, config_.head, s.d);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> StudentModel<T>::parameter_shapes(const StudentConfig& c) {
  auto out = TransformerEncoder<T>::parameter_shapes("row_encoder", c.row_encoder);
  auto add = [&out](std::vector<std::pair<std::string, Shape>> more) {
    out.insert(out.end(), more.begin(), more.end());
  };
  add(TransformerEncoder<T>::parameter_shapes("query_encoder", c.query_encoder));
  add(Aggregator<T>::parameter_shapes("aggregation", c.aggregation, c.row_encoder.dim));
  add(HeadStack<T>::parameter_shapes("head", c.row_encoder.dim, c.head));
  return out;
}

template <typename T>
TokenizedRow StudentModel<T>::tokenize_row(const Table& table, std::size_t row) const {
  return serialize_row(table.schema, table.rows.at(row), vocab_, config_.row_encoder.max_len,
                       config_.row_encoder.attribute_buckets);
}

template <typename T>
TokenizedRow StudentModel<T>::tokenize_query(const std::string& query) const {
  return serialize_query(query, vocab_, config_.query_encoder.max_len);
}

template <typename T>
std::vector<std::string> StudentModel<T>::row_texts(const Table& table) {
  std::vector<std::string> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) out.push_back(row_text(table.schema, row));
  return out;
}

template <typename T>
std::vector<Var<T>> StudentModel<T>::encode_rows(Tape<T>& tape, const Table& table, Mode mode,
                                                 std::mt19937_64& rng) const {
  std::vector<Var<T>> out;
  out.reserve(table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    out.push_back(row_encoder_.encode(tape, tokenize_row(table, i), mode, rng));
  }
  return out;
}

template <typename T>
Var<T> StudentModel<T>::encode_query(Tape<T>& tape, const std::string& query, Mode mode,
                                     std::mt19937_64& rng) const {
  return query_encoder_.encode(tape, tokenize_query(query), mode, rng);
}

template <typename T>
ModelOutput<T> StudentModel<T>::forward_with_rows(Tape<T>& tape, const std::vector<Var<T>>& rows,
                                                  std::span<const std::string> texts,
                                                  Var<T> query_vector, const std::string& query,
                                                  Mode mode, std::mt19937_64& rng) const {
  Var<T> feature = aggregator_.table_representation(tape, rows, texts, query_vector, query);
  return {feature, head_.forward(tape, feature, mode, rng)};
}

template <typename T>
ModelOutput<T> StudentModel<T>::forward(Tape<T>& tape, const Table& table, const std::string& query,
                                        Mode mode, std::mt19937_64& rng) const {
  const auto rows = encode_rows(tape, table, mode, rng);
  const auto texts = row_texts(table);
  Var<T> q = encode_query(tape, query, mode, rng);
  return forward_with_rows(tape, rows, texts, q, query, mode, rng);
}

template <typename T>
Tensor<T> StudentModel<T>::encode_table(const Table& table, bool parallel) const {
  const std::size_t n = table.rows.size();
  const std::size_t d = config_.row_encoder.dim;
  if (n == 0) throw ValueError("encode_table: table '" + table.table_id + "' has no rows");
  Tensor<T> out({n, d});
  auto encode_one = [&](std::size_t i) {
    const Tensor<T> v = row_encoder_.encode_value(tokenize_row(table, i));
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  };
  if (parallel) {
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < count; ++i) encode_one(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) encode_one(i);
  }
  return out;
}

template <typename T>
Tensor<T> StudentModel<T>::predict_logits(const Tensor<T>& row_vectors,
                                          std::span<const std::string> texts,
                                          const std::string& query) const {
  if (row_vectors.rank() != 2 || row_vectors.dim(1) != config_.row_encoder.dim) {
    throw DimensionError("predict_logits: row vectors " + shape_string(row_vectors.shape()) +
                         " do not have width " + std::to_string(config_.row_encoder.dim));
  }
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  std::mt19937_64 unused(0);
  std::vector<Var<T>> rows;
  rows.reserve(row_vectors.dim(0));
  for (std::size_t i = 0; i < row_vectors.dim(0); ++i) {
    const auto r = row_vectors.row(i);
    rows.push_back(tape.constant(Tensor<T>({r.size()}, std::vector<T>(r.begin(), r.end()))));
  }
  Var<T> q = encode_query(tape, query, Mode::eval, unused);
  return forward_with_rows(tape, rows, texts, q, query, Mode::eval, unused).logits.value();
}

template <typename T>
TeacherModel<T>::TeacherModel(TeacherConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(resolve(std::move(config), vocab)), vocab_(std::move(vocab)) {
  InitSeeds s(seed);
  encoder_ = TransformerEncoder<T>(params_, "teacher_encoder", config_.encoder, s.a);
  head_ = HeadStack<T>(params_, "teacher_head", config_.encoder.dim, config_.head, s.b);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> TeacherModel<T>::parameter_shapes(const TeacherConfig& c) {
  auto out = TransformerEncoder<T>::parameter_shapes("teacher_encoder", c.encoder);
  auto more = HeadStack<T>::parameter_shapes("teacher_head", c.encoder.dim, c.head);
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

template <typename T>
TokenizedRow TeacherModel<T>::tokenize(const Table& table, const std::string& query) const {
  return serialize_table_with_query(table, query, vocab_, config_.encoder.max_len,
                                    config_.encoder.attribute_buckets);
}

template <typename T>
ModelOutput<T> TeacherModel<T>::forward(Tape<T>& tape, const Table& table, const std::string& query,
                                        Mode mode, std::mt19937_64& rng) const {
  Var<T> feature = encoder_.encode(tape, tokenize(table, query), mode, rng);
  return {feature, head_.forward(tape, feature, mode, rng)};
}

template <typename T>
Tensor<T> TeacherModel<T>::predict_logits(const Table& table, const std::string& query) const {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  std::mt19937_64 unused(0);
  return forward(tape, table, query, Mode::eval, unused).logits.value();
}

template <typename T>
double entailment_score(const Tensor<T>& logits) {
  const double a = static_cast<double>(logits[0]);
  const double b = static_cast<double>(logits[1]);
  return 1.0 / (1.0 + std::exp(a - b));
}

template class StudentModel<float>;
template class StudentModel<double>;
template class TeacherModel<float>;
template class TeacherModel<double>;
template double entailment_score<float>(const Tensor<float>&);
template double entailment_score<double>(const Tensor<double>&);

}  // namespace rotar
