#include "rotar/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "rotar/ngram.hpp"
#include "rotar/ops.hpp"
#include "rotar/optim.hpp"

namespace rotar {

void DistillationWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("distill: weights must be nonnegative");
  if (alpha == 0 && beta == 0 && gamma == 0) throw ConfigError("distill: alpha, beta and gamma are all zero");
}

nlohmann::json DistillationWeights::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"gamma", gamma},
          {"distance_target", target == DistanceTarget::logits ? "logits" : "features"}};
}

DistillationWeights DistillationWeights::from_json(const nlohmann::json& j) {
  DistillationWeights w;
  try {
    w.alpha = j.value("alpha", w.alpha);
    w.beta = j.value("beta", w.beta);
    w.gamma = j.value("gamma", w.gamma);
    const std::string t = j.value("distance_target", std::string("logits"));
    if (t == "logits") {
      w.target = DistanceTarget::logits;
    } else if (t == "features") {
      w.target = DistanceTarget::features;
    } else {
      throw ConfigError("distill: unknown distance_target '" + t + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("distill config: ") + e.what());
  }
  w.validate();
  return w;
}

template <typename T>
LossTerms<T> combined_loss(const DistillationWeights& weights, const DistillInputs<T>& in,
                           std::size_t label) {
  weights.validate();
  const std::array<std::size_t, 1> labels{label};
  LossTerms<T> terms;
  std::vector<Var<T>> parts;
  terms.task_student = ops::cross_entropy(in.student_logits, std::span<const std::size_t>(labels));
  if (weights.beta > 0) parts.push_back(ops::scale(terms.task_student, static_cast<T>(weights.beta)));

  if (in.teacher_logits) {
    terms.task_teacher = ops::cross_entropy(*in.teacher_logits, std::span<const std::size_t>(labels));
    if (weights.alpha > 0) parts.push_back(ops::scale(*terms.task_teacher, static_cast<T>(weights.alpha)));
  } else if (weights.alpha > 0) {
    throw ValueError("combined_loss: alpha > 0 needs teacher logits");
  }

  std::optional<Var<T>> a, b;
  if (weights.target == DistanceTarget::logits) {
    a = in.teacher_logits;
    b = in.student_logits;
  } else {
    a = in.teacher_feature;
    b = in.student_feature;
  }
  if (a && b) {
    terms.distance = ops::mse(*a, *b);
    if (weights.gamma > 0) parts.push_back(ops::scale(*terms.distance, static_cast<T>(weights.gamma)));
  } else if (weights.gamma > 0) {
    throw ValueError(std::string("combined_loss: gamma > 0 needs teacher and student ") +
                     (weights.target == DistanceTarget::logits ? "logits" : "features"));
  }

  terms.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) terms.total = ops::add(terms.total, parts[i]);
  return terms;
}

std::vector<std::size_t> sample_without_replacement(std::span<const double> weights, std::size_t k,
                                                    std::mt19937_64& rng) {
  const std::size_t n = weights.size();
  if (n == 0) throw ValueError("sample_without_replacement: no items");
  if (k == 0) throw ValueError("sample_without_replacement: k must be >= 1");
  for (double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ValueError("sample_without_replacement: weights must be finite and >= 0");
  }
  std::vector<std::size_t> out;
  if (k >= n) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  std::vector<double> w(weights.begin(), weights.end());
  for (std::size_t t = 0; t < k; ++t) {
    double total = 0;
    for (double x : w) total += x;
    if (total <= 0) throw ValueError("sample_without_replacement: all remaining weights are zero");
    const double u = uniform01(rng) * total;
    double acc = 0;
    std::size_t pick = n;
    std::size_t last_positive = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (w[i] <= 0) continue;
      last_positive = i;
      acc += w[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    if (pick == n) pick = last_positive;
    out.push_back(pick);
    w[pick] = 0;
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> select_rows(std::size_t n, std::size_t k, SelectMode mode,
                                     std::span<const std::string> row_texts,
                                     const std::string& query, const AggregationSpec& spec,
                                     std::mt19937_64& rng) {
  if (n == 0) throw ValueError("select_rows: table has no rows");
  std::vector<double> weights(n, 1.0);
  switch (mode) {
    case SelectMode::off:
      k = n;
      break;
    case SelectMode::random:
      break;
    case SelectMode::ngram_weighted: {
      if (row_texts.size() != n) {
        throw DimensionError("select_rows: " + std::to_string(row_texts.size()) + " row texts for " +
                             std::to_string(n) + " rows");
      }
      const auto sim = ngram_similarities(query, row_texts, spec.ngram_order, spec.ngram_unit);
      for (std::size_t i = 0; i < n; ++i) weights[i] = sim[i] + kSelectionSmoothing;
      break;
    }
  }
  return sample_without_replacement(weights, k, rng);
}

template <typename T>
std::vector<Var<T>> detach_unselected(Tape<T>& tape, const std::vector<Var<T>>& rows,
                                      std::span<const std::size_t> selected) {
  if (selected.empty()) throw ValueError("selective backward: empty selection");
  std::vector<std::uint8_t> keep(rows.size(), 0);
  for (std::size_t i : selected) {
    if (i >= rows.size()) {
      throw ValueError("selective backward: row " + std::to_string(i) + " outside table of " +
                       std::to_string(rows.size()));
    }
    keep[i] = 1;
  }
  std::vector<Var<T>> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(keep[i] ? rows[i] : tape.detach(rows[i]));
  return out;
}

template <typename T>
ModelOutput<T> selective_backward_forward(Tape<T>& tape, const StudentModel<T>& model, const Table& table,
                                          const std::string& query,
                                          std::span<const std::size_t> selected, Mode mode,
                                          std::mt19937_64& rng) {
  const auto rows = detach_unselected(tape, model.encode_rows(tape, table, mode, rng), selected);
  const auto texts = StudentModel<T>::row_texts(table);
  Var<T> q = model.encode_query(tape, query, mode, rng);
  return model.forward_with_rows(tape, rows, texts, q, query, mode, rng);
}

namespace {

std::string select_mode_name(SelectMode m) {
  switch (m) {
    case SelectMode::off:
      return "off";
    case SelectMode::random:
      return "random";
    case SelectMode::ngram_weighted:
      return "ngram_weighted";
  }
  return "off";
}

SelectMode parse_select_mode(const std::string& s) {
  if (s == "off") return SelectMode::off;
  if (s == "random") return SelectMode::random;
  if (s == "ngram_weighted") return SelectMode::ngram_weighted;
  throw ConfigError("train: unknown selective_backward mode '" + s + "'");
}

template <typename Fn>
auto config_guard(const char* section, Fn&& fn) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(section) + " config: " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (micro_batch_size == 0 || virtual_batch_size == 0 || virtual_batch_size % micro_batch_size != 0) {
    throw ConfigError("train: micro_batch_size must divide virtual_batch_size");
  }
  if (!(lr > 0)) throw ConfigError("train: lr must be positive");
  if (lr_floor < 0 || lr_floor > lr) throw ConfigError("train: lr_floor must lie in [0, lr]");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (selective.mode != SelectMode::off && selective.rows == 0) {
    throw ConfigError("train: selective_backward rows must be >= 1");
  }
  if (head.head_dim == 0) throw ConfigError("train: head_dim must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"virtual_batch_size", virtual_batch_size},
          {"micro_batch_size", micro_batch_size},
          {"lr", lr},
          {"lr_floor", lr_floor},
          {"weight_decay", weight_decay},
          {"warmup_epochs", warmup_epochs},
          {"early_stop_patience", early_stop_patience},
          {"selective_backward", {{"mode", select_mode_name(selective.mode)}, {"rows", selective.rows}}},
          {"seed", seed},
          {"head_dim", head.head_dim},
          {"head_dropout", head.dropout}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  return config_guard("train", [&] {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.virtual_batch_size = j.value("virtual_batch_size", c.virtual_batch_size);
    c.micro_batch_size = j.value("micro_batch_size", c.micro_batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    if (j.contains("selective_backward")) {
      const auto& s = j.at("selective_backward");
      c.selective.mode = parse_select_mode(s.value("mode", std::string("off")));
      c.selective.rows = s.value("rows", c.selective.rows);
    }
    c.seed = j.value("seed", c.seed);
    c.head.head_dim = j.value("head_dim", c.head.head_dim);
    c.head.dropout = j.value("head_dropout", c.head.dropout);
    c.validate();
    return c;
  });
}

nlohmann::json DataConfig::to_json() const { return {{"min_count", min_count}, {"val_fraction", val_fraction}}; }

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  return config_guard("data", [&] {
    DataConfig c;
    c.min_count = j.value("min_count", c.min_count);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    if (c.min_count == 0) throw ConfigError("data: min_count must be >= 1");
    if (!(c.val_fraction > 0 && c.val_fraction < 1)) throw ConfigError("data: val_fraction must lie in (0, 1)");
    return c;
  });
}

nlohmann::json TeacherSection::to_json() const {
  nlohmann::json j = model.to_json();
  j["enabled"] = enabled;
  j["epochs"] = epochs;
  j["lr"] = lr;
  return j;
}

TeacherSection TeacherSection::from_json(const nlohmann::json& j) {
  return config_guard("teacher", [&] {
    TeacherSection s;
    s.enabled = j.value("enabled", s.enabled);
    s.model = TeacherConfig::from_json(j);
    s.epochs = j.value("epochs", s.epochs);
    s.lr = j.value("lr", s.lr);
    if (s.epochs == 0) throw ConfigError("teacher: epochs must be >= 1");
    if (!(s.lr > 0)) throw ConfigError("teacher: lr must be positive");
    return s;
  });
}

StudentConfig ExperimentConfig::student() const {
  StudentConfig c;
  c.row_encoder = encoder;
  c.query_encoder = query_encoder;
  c.aggregation = aggregation;
  c.head = train.head;
  return c;
}

void ExperimentConfig::validate() const {
  aggregation.validate();
  train.validate();
  distill.validate();
  if (encoder.dim != query_encoder.dim) throw ConfigError("encoder and query_encoder dims differ");
  if (distill.target == DistanceTarget::features && distill.gamma > 0 &&
      teacher.model.head.head_dim != train.head.head_dim) {
    throw ConfigError("feature distance needs equal teacher and student head_dim");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"data", data.to_json()},
          {"encoder", encoder.to_json()},
          {"query_encoder", query_encoder.to_json()},
          {"aggregation", aggregation.to_json()},
          {"teacher", teacher.to_json()},
          {"train", train.to_json()},
          {"distill", distill.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> kSections = {"data",    "encoder", "query_encoder", "aggregation",
                                                  "teacher", "train",   "distill"};
  for (const auto& [key, value] : j.items()) {
    if (!kSections.count(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  ExperimentConfig c;
  if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  if (j.contains("query_encoder")) {
    nlohmann::json merged = EncoderConfig::query_defaults().to_json();
    merged.merge_patch(j.at("query_encoder"));
    c.query_encoder = EncoderConfig::from_json(merged);
  }
  if (j.contains("aggregation")) c.aggregation = AggregationSpec::from_json(j.at("aggregation"));
  if (j.contains("teacher")) c.teacher = TeacherSection::from_json(j.at("teacher"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("distill")) c.distill = DistillationWeights::from_json(j.at("distill"));
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

bool is_validation(const Statement& statement, double val_fraction) {
  const auto bucket = stable_hash(statement.statement_id) % 10000;
  return static_cast<double>(bucket) < val_fraction * 10000.0;
}

template <typename T>
TeacherTargets<T> teacher_targets(const TeacherModel<T>& teacher, const Table& table,
                                  const std::string& query) {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  std::mt19937_64 unused(0);
  Var<T> feature = teacher.encoder().encode(tape, teacher.tokenize(table, query), Mode::eval, unused);
  Var<T> mapped = teacher.head().transform(tape, feature, Mode::eval, unused);
  Var<T> logits = teacher.head().classify(tape, mapped, Mode::eval, unused);
  return {logits.value(), mapped.value()};
}

namespace {

template <typename T>
void check_loss(const Var<T>& loss, const Statement& s) {
  const T v = loss.value()[0];
  if (!std::isfinite(static_cast<double>(v))) {
    throw NumericError("non-finite loss on statement '" + s.statement_id + "'; training diverged");
  }
}

}  // namespace

template <typename T>
BatchLoss student_micro_batch(StudentModel<T>& model, const Dataset& data,
                              std::span<const Statement* const> batch,
                              const DistillationWeights& weights, const TeacherCache<T>* teacher,
                              const SelectiveConfig& selective, double scale, Mode mode,
                              std::mt19937_64& rng) {
  BatchLoss out;
  if (batch.empty()) return out;
  Tape<T> tape;

  // Statements grouped by table in first-appearance order.
  std::vector<std::pair<const Table*, std::vector<const Statement*>>> groups;
  std::map<std::string, std::size_t> group_of;
  for (const Statement* s : batch) {
    auto [it, fresh] = group_of.emplace(s->table_id, groups.size());
    if (fresh) groups.push_back({&data.table(s->table_id), {}});
    groups[it->second].second.push_back(s);
  }

  std::vector<Var<T>> losses;
  for (const auto& [table, statements] : groups) {
    const auto texts = StudentModel<T>::row_texts(*table);
    const std::size_t n = table->num_rows();
    std::vector<std::vector<std::size_t>> selections;
    std::vector<std::uint8_t> needed(n, selective.mode == SelectMode::off ? 1 : 0);
    if (selective.mode != SelectMode::off) {
      for (const Statement* s : statements) {
        selections.push_back(select_rows(n, selective.rows, selective.mode, texts, s->text,
                                         model.config().aggregation, rng));
        for (std::size_t i : selections.back()) needed[i] = 1;
      }
    }
    std::vector<Var<T>> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (needed[i]) {
        rows.push_back(model.row_encoder().encode(tape, model.tokenize_row(*table, i), mode, rng));
      } else {
        NoGradGuard<T> guard(tape);
        rows.push_back(model.row_encoder().encode(tape, model.tokenize_row(*table, i), mode, rng));
      }
    }
    for (std::size_t si = 0; si < statements.size(); ++si) {
      const Statement& s = *statements[si];
      const auto used = selective.mode == SelectMode::off
                            ? rows
                            : detach_unselected(tape, rows, std::span<const std::size_t>(selections[si]));
      Var<T> q = model.encode_query(tape, s.text, mode, rng);
      Var<T> feature = model.aggregator().table_representation(tape, used, texts, q, s.text);
      Var<T> mapped = model.head().transform(tape, feature, mode, rng);
      DistillInputs<T> in;
      in.student_logits = model.head().classify(tape, mapped, mode, rng);
      in.student_feature = mapped;
      if (teacher != nullptr) {
        auto it = teacher->find(s.statement_id);
        if (it == teacher->end()) throw NotFoundError("no teacher targets for '" + s.statement_id + "'");
        in.teacher_logits = tape.constant(it->second.logits);
        in.teacher_feature = tape.constant(it->second.mapped_feature);
      }
      const LossTerms<T> terms = combined_loss(weights, in, s.label ? 1 : 0);
      check_loss(terms.total, s);
      out.task_student += static_cast<double>(terms.task_student.value()[0]);
      if (terms.task_teacher) out.task_teacher += static_cast<double>(terms.task_teacher->value()[0]);
      if (terms.distance) out.distance += static_cast<double>(terms.distance->value()[0]);
      ++out.count;
      losses.push_back(terms.total);
    }
  }
  Var<T> total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
  tape.backward(ops::scale(total, static_cast<T>(scale)));
  return out;
}

template <typename T>
BatchLoss teacher_micro_batch(TeacherModel<T>& model, const Dataset& data,
                              std::span<const Statement* const> batch, double scale, Mode mode,
                              std::mt19937_64& rng) {
  BatchLoss out;
  if (batch.empty()) return out;
  Tape<T> tape;
  std::vector<Var<T>> losses;
  for (const Statement* s : batch) {
    const auto result = model.forward(tape, data.table(s->table_id), s->text, mode, rng);
    const std::array<std::size_t, 1> labels{s->label ? std::size_t{1} : std::size_t{0}};
    Var<T> loss = ops::cross_entropy(result.logits, std::span<const std::size_t>(labels));
    check_loss(loss, *s);
    out.task_teacher += static_cast<double>(loss.value()[0]);
    ++out.count;
    losses.push_back(loss);
  }
  Var<T> total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
  tape.backward(ops::scale(total, static_cast<T>(scale)));
  return out;
}

std::string RunMetrics::to_csv() const {
  std::ostringstream os;
  os << "epoch,task_T,task_S,distance,val_acc,lr,seconds\n";
  os << std::setprecision(9);
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.task_teacher << ',' << e.task_student << ',' << e.distance << ','
       << e.val_acc << ',' << e.lr << ',' << std::setprecision(4) << e.seconds << std::setprecision(9)
       << '\n';
  }
  return os.str();
}

nlohmann::json RunMetrics::summary() const {
  double seconds = 0;
  for (const auto& e : epochs) seconds += e.seconds;
  return {{"epochs_run", epochs.size()},
          {"best_epoch", best_epoch},
          {"best_val_acc", best_val_acc},
          {"early_stopped", early_stopped},
          {"final_task_S", epochs.empty() ? 0.0 : epochs.back().task_student},
          {"total_seconds", seconds}};
}

namespace {

void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

// Tables in random order, each table's statements shuffled and contiguous.
std::vector<const Statement*> epoch_order(const std::vector<const Statement*>& train, std::mt19937_64& rng) {
  std::vector<std::string> table_ids;
  std::map<std::string, std::vector<const Statement*>> by_table;
  for (const Statement* s : train) {
    auto& bucket = by_table[s->table_id];
    if (bucket.empty()) table_ids.push_back(s->table_id);
    bucket.push_back(s);
  }
  std::vector<std::size_t> order(table_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_indices(order, rng);
  std::vector<const Statement*> out;
  out.reserve(train.size());
  for (std::size_t t : order) {
    auto& bucket = by_table[table_ids[t]];
    std::vector<std::size_t> inner(bucket.size());
    for (std::size_t i = 0; i < inner.size(); ++i) inner[i] = i;
    shuffle_indices(inner, rng);
    for (std::size_t i : inner) out.push_back(bucket[i]);
  }
  return out;
}

using StepFn = std::function<BatchLoss(std::span<const Statement* const>, double, std::mt19937_64&)>;
using EvalFn = std::function<double()>;

RunMetrics fit(ParameterSet<float>& params, const std::vector<const Statement*>& train, const TrainConfig& cfg,
               std::size_t epochs, double peak_lr, std::uint64_t seed, const StepFn& step,
               const EvalFn& evaluate, const std::string& phase, const ProgressFn& progress) {
  RunMetrics metrics;
  std::mt19937_64 rng(seed);
  AdamWConfig opt_cfg;
  opt_cfg.lr = peak_lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW<float> optimizer(params.all(), opt_cfg);
  params.zero_grad();

  const std::size_t steps_per_epoch = (train.size() + cfg.virtual_batch_size - 1) / cfg.virtual_batch_size;
  const std::uint64_t total_steps = std::max<std::uint64_t>(2, epochs * steps_per_epoch);
  const std::uint64_t warmup = std::min<std::uint64_t>(cfg.warmup_epochs * steps_per_epoch, total_steps - 1);
  std::uint64_t step_index = 0;

  std::vector<Tensor<float>> best;
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto order = epoch_order(train, rng);
    EpochMetrics em;
    em.epoch = epoch;
    BatchLoss sum;
    for (std::size_t v = 0; v < order.size(); v += cfg.virtual_batch_size) {
      const std::size_t vend = std::min(order.size(), v + cfg.virtual_batch_size);
      const double scale = 1.0 / static_cast<double>(vend - v);
      for (std::size_t m = v; m < vend; m += cfg.micro_batch_size) {
        const std::size_t mend = std::min(vend, m + cfg.micro_batch_size);
        const BatchLoss b =
            step(std::span<const Statement* const>(order.data() + m, mend - m), scale, rng);
        sum.task_teacher += b.task_teacher;
        sum.task_student += b.task_student;
        sum.distance += b.distance;
        sum.count += b.count;
      }
      ++step_index;
      em.lr = cosine_lr(std::min(step_index, total_steps), warmup, total_steps, peak_lr, cfg.lr_floor);
      optimizer.step(em.lr);
      optimizer.zero_grad();
    }
    const double denom = sum.count > 0 ? static_cast<double>(sum.count) : 1.0;
    em.task_teacher = sum.task_teacher / denom;
    em.task_student = sum.task_student / denom;
    em.distance = sum.distance / denom;
    em.val_acc = evaluate();
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    metrics.epochs.push_back(em);
    if (progress) progress(phase, em);

    if (!have_best || em.val_acc > metrics.best_val_acc) {
      have_best = true;
      metrics.best_val_acc = em.val_acc;
      metrics.best_epoch = epoch;
      best.clear();
      for (const Parameter<float>* p : params.all()) best.push_back(p->value);
    } else if (epoch - metrics.best_epoch >= cfg.early_stop_patience) {
      metrics.early_stopped = true;
      break;
    }
  }
  auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) all[i]->value = best[i];
  return metrics;
}

}  // namespace

double student_accuracy(const StudentModel<float>& model, const Dataset& data,
                        std::span<const Statement* const> statements) {
  if (statements.empty()) return 0.0;
  std::map<std::string, Tensor<float>> cache;
  std::size_t correct = 0;
  for (const Statement* s : statements) {
    const Table& table = data.table(s->table_id);
    auto it = cache.find(s->table_id);
    if (it == cache.end()) it = cache.emplace(s->table_id, model.encode_table(table)).first;
    const auto texts = StudentModel<float>::row_texts(table);
    if (verdict(model.predict_logits(it->second, texts, s->text)) == s->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(statements.size());
}

double teacher_accuracy(const TeacherModel<float>& model, const Dataset& data,
                        std::span<const Statement* const> statements) {
  if (statements.empty()) return 0.0;
  std::size_t correct = 0;
  for (const Statement* s : statements) {
    if (verdict(model.predict_logits(data.table(s->table_id), s->text)) == s->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(statements.size());
}

TrainResult run_experiment(const Dataset& data, const ExperimentConfig& config,
                           const Checkpoint* teacher_checkpoint, const ProgressFn& progress) {
  config.validate();
  std::vector<const Statement*> train, val;
  for (const Statement& s : data.statements) {
    (is_validation(s, config.data.val_fraction) ? val : train).push_back(&s);
  }
  if (train.empty() || val.empty()) {
    throw ValueError("dataset of " + std::to_string(data.statements.size()) +
                     " statements leaves an empty train or validation split");
  }

  TrainResult result;
  std::mt19937_64 root(config.train.seed);
  result.model_seed = root();
  const std::uint64_t student_train_seed = root();
  result.teacher_seed = root();
  const std::uint64_t teacher_train_seed = root();
  result.vocab = build_vocab(data.tables, data.statements, config.data.min_count);

  if (teacher_checkpoint != nullptr) {
    result.teacher = load_teacher(*teacher_checkpoint);
  } else if (config.teacher.enabled) {
    result.teacher = std::make_unique<TeacherModel<float>>(config.teacher.model, result.vocab, result.teacher_seed);
    TeacherModel<float>& teacher = *result.teacher;
    StepFn step = [&](std::span<const Statement* const> batch, double scale, std::mt19937_64& rng) {
      return teacher_micro_batch(teacher, data, batch, scale, Mode::train, rng);
    };
    EvalFn eval = [&] { return teacher_accuracy(teacher, data, val); };
    result.teacher_metrics = fit(teacher.params(), train, config.train, config.teacher.epochs, config.teacher.lr,
                                 teacher_train_seed, step, eval, "teacher", progress);
  } else if (config.distill.needs_teacher()) {
    throw ConfigError("distillation weights need a teacher: enable teacher training or pass a teacher checkpoint");
  }

  TeacherCache<float> targets;
  const bool distill = config.distill.needs_teacher();
  if (distill) {
    if (config.distill.target == DistanceTarget::features &&
        result.teacher->config().head.head_dim != config.train.head.head_dim) {
      throw ConfigError("feature distance needs equal teacher and student head_dim");
    }
    for (const Statement* s : train) {
      targets.emplace(s->statement_id, teacher_targets(*result.teacher, data.table(s->table_id), s->text));
    }
  }

  result.student = std::make_unique<StudentModel<float>>(config.student(), result.vocab, result.model_seed);
  StudentModel<float>& student = *result.student;
  StepFn step = [&](std::span<const Statement* const> batch, double scale, std::mt19937_64& rng) {
    return student_micro_batch(student, data, batch, config.distill, distill ? &targets : nullptr,
                               config.train.selective, scale, Mode::train, rng);
  };
  EvalFn eval = [&] { return student_accuracy(student, data, val); };
  result.student_metrics = fit(student.params(), train, config.train, config.train.epochs, config.train.lr,
                               student_train_seed, step, eval, "student", progress);
  return result;
}

#define ROTAR_INSTANTIATE_TRAINING(T)                                                              \
  template LossTerms<T> combined_loss<T>(const DistillationWeights&, const DistillInputs<T>&,      \
                                         std::size_t);                                             \
  template std::vector<Var<T>> detach_unselected<T>(Tape<T>&, const std::vector<Var<T>>&,          \
                                                    std::span<const std::size_t>);                 \
  template ModelOutput<T> selective_backward_forward<T>(Tape<T>&, const StudentModel<T>&,          \
                                                        const Table&, const std::string&,          \
                                                        std::span<const std::size_t>, Mode,        \
                                                        std::mt19937_64&);                         \
  template TeacherTargets<T> teacher_targets<T>(const TeacherModel<T>&, const Table&,              \
                                                const std::string&);                               \
  template BatchLoss student_micro_batch<T>(StudentModel<T>&, const Dataset&,                      \
                                            std::span<const Statement* const>,                     \
                                            const DistillationWeights&, const TeacherCache<T>*,    \
                                            const SelectiveConfig&, double, Mode,                  \
                                            std::mt19937_64&);                                     \
  template BatchLoss teacher_micro_batch<T>(TeacherModel<T>&, const Dataset&,                      \
                                            std::span<const Statement* const>, double, Mode,       \
                                            std::mt19937_64&);

ROTAR_INSTANTIATE_TRAINING(float)
ROTAR_INSTANTIATE_TRAINING(double)

}  // namespace rotar
