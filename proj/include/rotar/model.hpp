#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rotar/aggregation.hpp"
#include "rotar/encoder.hpp"
#include "rotar/table.hpp"

namespace rotar {

struct StudentConfig {
  EncoderConfig row_encoder;
  EncoderConfig query_encoder = EncoderConfig::query_defaults();
  AggregationSpec aggregation;
  HeadConfig head;

  void validate() const;
  nlohmann::json to_json() const;
  static StudentConfig from_json(const nlohmann::json& j);
  bool operator==(const StudentConfig&) const = default;
};

struct TeacherConfig {
  EncoderConfig encoder = defaults();
  HeadConfig head;

  // All four position components on; whole-table sequences up to 512 tokens.
  static EncoderConfig defaults();
  void validate() const;
  nlohmann::json to_json() const;
  static TeacherConfig from_json(const nlohmann::json& j);
  bool operator==(const TeacherConfig&) const = default;
};

template <typename T>
struct ModelOutput {
  Var<T> feature;
  Var<T> logits;
};

// Row encoder M, query encoder, aggregation and head stack. Parameter names
// are prefixed row_encoder., query_encoder., aggregation. and head.
template <typename T>
class StudentModel {
 public:
  StudentModel(StudentConfig config, Vocabulary vocab, std::uint64_t seed);
  StudentModel(const StudentModel&) = delete;
  StudentModel& operator=(const StudentModel&) = delete;

  const StudentConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const TransformerEncoder<T>& row_encoder() const { return row_encoder_; }
  const TransformerEncoder<T>& query_encoder() const { return query_encoder_; }
  const Aggregator<T>& aggregator() const { return aggregator_; }
  const HeadStack<T>& head() const { return head_; }

  TokenizedRow tokenize_row(const Table& table, std::size_t row) const;
  TokenizedRow tokenize_query(const std::string& query) const;
  static std::vector<std::string> row_texts(const Table& table);

  // One v_i per row, recorded on `tape`.
  std::vector<Var<T>> encode_rows(Tape<T>& tape, const Table& table, Mode mode,
                                  std::mt19937_64& rng) const;
  Var<T> encode_query(Tape<T>& tape, const std::string& query, Mode mode,
                      std::mt19937_64& rng) const;

  // Aggregation and head over already-encoded rows.
  ModelOutput<T> forward_with_rows(Tape<T>& tape, const std::vector<Var<T>>& rows,
                                   std::span<const std::string> row_texts, Var<T> query_vector,
                                   const std::string& query, Mode mode, std::mt19937_64& rng) const;
  ModelOutput<T> forward(Tape<T>& tape, const Table& table, const std::string& query, Mode mode,
                         std::mt19937_64& rng) const;

  // Eval-mode row vectors [N x dim]. `parallel` spreads rows over OpenMP
  // threads; each row is still computed by the same serial code.
  Tensor<T> encode_table(const Table& table, bool parallel = false) const;
  // Eval-mode logits from stored row vectors [N x dim].
  Tensor<T> predict_logits(const Tensor<T>& row_vectors, std::span<const std::string> row_texts,
                           const std::string& query) const;

  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const StudentConfig& config);

 private:
  StudentConfig config_;
  Vocabulary vocab_;
  ParameterSet<T> params_;
  TransformerEncoder<T> row_encoder_;
  TransformerEncoder<T> query_encoder_;
  Aggregator<T> aggregator_;
  HeadStack<T> head_;
};

// Query-aware whole-table model: [CLS] query rows... through one encoder.
template <typename T>
class TeacherModel {
 public:
  TeacherModel(TeacherConfig config, Vocabulary vocab, std::uint64_t seed);
  TeacherModel(const TeacherModel&) = delete;
  TeacherModel& operator=(const TeacherModel&) = delete;

  const TeacherConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const TransformerEncoder<T>& encoder() const { return encoder_; }
  const HeadStack<T>& head() const { return head_; }

  TokenizedRow tokenize(const Table& table, const std::string& query) const;
  ModelOutput<T> forward(Tape<T>& tape, const Table& table, const std::string& query, Mode mode,
                         std::mt19937_64& rng) const;
  Tensor<T> predict_logits(const Table& table, const std::string& query) const;

  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const TeacherConfig& config);

 private:
  TeacherConfig config_;
  Vocabulary vocab_;
  ParameterSet<T> params_;
  TransformerEncoder<T> encoder_;
  HeadStack<T> head_;
};

// Index of the larger logit; class 1 means entailed.
template <typename T>
bool verdict(const Tensor<T>& logits) {
  return logits[1] > logits[0];
}

// P(entailed) under softmax.
template <typename T>
double entailment_score(const Tensor<T>& logits);

}  // namespace rotar
