#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "rotar/checkpoint.hpp"
#include "rotar/dataset.hpp"
#include "rotar/model.hpp"

namespace rotar {

enum class DistanceTarget { logits, features };

// L = alpha * CE(teacher) + beta * CE(student) + gamma * MSE(distance pair)
struct DistillationWeights {
  double alpha = 0.0;
  double beta = 1.0;
  double gamma = 0.0;
  DistanceTarget target = DistanceTarget::logits;

  void validate() const;
  bool needs_teacher() const { return alpha > 0 || gamma > 0; }
  nlohmann::json to_json() const;
  static DistillationWeights from_json(const nlohmann::json& j);
  bool operator==(const DistillationWeights&) const = default;
};

// Inputs to the combined loss. Features, when given, are already mapped to
// the shared head dimension by each model's transformation module.
template <typename T>
struct DistillInputs {
  std::optional<Var<T>> teacher_logits;
  std::optional<Var<T>> teacher_feature;
  Var<T> student_logits;
  std::optional<Var<T>> student_feature;
};

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> task_student;
  std::optional<Var<T>> task_teacher;
  std::optional<Var<T>> distance;
};

// Terms with zero weight are left out of the total. The teacher task loss is
// still reported whenever teacher logits are present.
template <typename T>
LossTerms<T> combined_loss(const DistillationWeights& weights, const DistillInputs<T>& inputs,
                           std::size_t label);

enum class SelectMode { off, random, ngram_weighted };

struct SelectiveConfig {
  SelectMode mode = SelectMode::off;
  std::size_t rows = 4;

  bool operator==(const SelectiveConfig&) const = default;
};

inline constexpr double kSelectionSmoothing = 1e-6;

// K distinct row indices in ascending order, all rows when K >= N.
// ngram_weighted samples without replacement proportional to ns + 1e-6.
std::vector<std::size_t> select_rows(std::size_t n, std::size_t k, SelectMode mode,
                                     std::span<const std::string> row_texts,
                                     const std::string& query, const AggregationSpec& spec,
                                     std::mt19937_64& rng);
// Same, from explicit nonnegative weights.
std::vector<std::size_t> sample_without_replacement(std::span<const double> weights, std::size_t k,
                                                    std::mt19937_64& rng);

// Rows outside `selected` are detached; values are unchanged.
template <typename T>
std::vector<Var<T>> detach_unselected(Tape<T>& tape, const std::vector<Var<T>>& rows,
                                      std::span<const std::size_t> selected);

// Student forward over an explicit selection: same values as the plain
// forward, encoder gradients only through selected rows.
template <typename T>
ModelOutput<T> selective_backward_forward(Tape<T>& tape, const StudentModel<T>& model, const Table& table,
                                          const std::string& query,
                                          std::span<const std::size_t> selected, Mode mode,
                                          std::mt19937_64& rng);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t virtual_batch_size = 64;
  std::size_t micro_batch_size = 8;
  double lr = 2e-5;
  double lr_floor = 0.0;
  double weight_decay = 1e-5;
  std::size_t warmup_epochs = 2;
  std::size_t early_stop_patience = 8;
  SelectiveConfig selective;
  std::uint64_t seed = 17;
  HeadConfig head;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::size_t min_count = 1;
  double val_fraction = 0.1;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
  bool operator==(const DataConfig&) const = default;
};

struct TeacherSection {
  bool enabled = false;
  TeacherConfig model;
  std::size_t epochs = 10;
  double lr = 1e-4;

  nlohmann::json to_json() const;
  static TeacherSection from_json(const nlohmann::json& j);
  bool operator==(const TeacherSection&) const = default;
};

// One JSON file: {data, encoder, query_encoder, aggregation, teacher, train, distill}.
struct ExperimentConfig {
  DataConfig data;
  EncoderConfig encoder;
  EncoderConfig query_encoder = EncoderConfig::query_defaults();
  AggregationSpec aggregation;
  TeacherSection teacher;
  TrainConfig train;
  DistillationWeights distill;

  StudentConfig student() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Deterministic split by statement-id hash.
bool is_validation(const Statement& statement, double val_fraction);

// Frozen-teacher values for one statement, precomputed once.
template <typename T>
struct TeacherTargets {
  Tensor<T> logits;
  Tensor<T> mapped_feature;
};

template <typename T>
using TeacherCache = std::unordered_map<std::string, TeacherTargets<T>>;

template <typename T>
TeacherTargets<T> teacher_targets(const TeacherModel<T>& teacher, const Table& table,
                                  const std::string& query);

struct BatchLoss {
  double task_teacher = 0.0;
  double task_student = 0.0;
  double distance = 0.0;
  std::size_t count = 0;
};

// Forward and backward over one micro-batch, adding scale * dL/dtheta into
// the parameter grad buffers. Rows of a table are encoded once per
// micro-batch and shared by its statements.
template <typename T>
BatchLoss student_micro_batch(StudentModel<T>& model, const Dataset& data,
                              std::span<const Statement* const> batch,
                              const DistillationWeights& weights, const TeacherCache<T>* teacher,
                              const SelectiveConfig& selective, double scale, Mode mode,
                              std::mt19937_64& rng);

template <typename T>
BatchLoss teacher_micro_batch(TeacherModel<T>& model, const Dataset& data,
                              std::span<const Statement* const> batch, double scale, Mode mode,
                              std::mt19937_64& rng);

struct EpochMetrics {
  std::size_t epoch = 0;
  double task_teacher = 0.0;
  double task_student = 0.0;
  double distance = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  bool early_stopped = false;

  std::string to_csv() const;
  nlohmann::json summary() const;
};

using ProgressFn = std::function<void(const std::string& phase, const EpochMetrics&)>;

struct TrainResult {
  std::unique_ptr<StudentModel<float>> student;
  std::unique_ptr<TeacherModel<float>> teacher;
  RunMetrics student_metrics;
  std::optional<RunMetrics> teacher_metrics;
  Vocabulary vocab;
  std::uint64_t model_seed = 0;
  std::uint64_t teacher_seed = 0;
};

// Trains (or loads) the teacher when the distillation weights need one,
// freezes it, then trains the student. The returned models hold the weights
// of their best validation epoch.
TrainResult run_experiment(const Dataset& data, const ExperimentConfig& config,
                           const Checkpoint* teacher_checkpoint = nullptr,
                           const ProgressFn& progress = {});

// Accuracy of argmax predictions over the given statements.
double student_accuracy(const StudentModel<float>& model, const Dataset& data,
                        std::span<const Statement* const> statements);
double teacher_accuracy(const TeacherModel<float>& model, const Dataset& data,
                        std::span<const Statement* const> statements);

}  // namespace rotar
