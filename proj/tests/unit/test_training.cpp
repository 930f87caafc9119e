#include <cmath>
#include <limits>
#include <map>

#include "doctest.h"
#include "training_checks.hpp"
#include "rotar/checkpoint.hpp"
#include "rotar/dataset.hpp"

using namespace rotar;

namespace {

const TeacherCache<double>* const kNoTeacher = nullptr;

// Two-class logits whose cross-entropy against label 0 is exactly `loss`.
Tensor<double> logits_with_loss(double loss) { return Tensor<double>({2}, {0.0, std::log(std::expm1(loss))}); }

double total_of(const DistillationWeights& w, const DistillInputs<double>& in, std::size_t label = 0) {
  return combined_loss(w, in, label).total.value().item();
}

Dataset small_dataset(std::size_t tables, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.num_tables = tables;
  cfg.seed = seed;
  cfg.rows_range = {4, 8};
  return generate_synthetic(cfg);
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.encoder.dim = 16;
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.ffn_dim = 32;
  c.query_encoder.dim = 16;
  c.query_encoder.layers = 1;
  c.query_encoder.heads = 2;
  c.query_encoder.ffn_dim = 32;
  c.train.epochs = 4;
  c.train.virtual_batch_size = 8;
  c.train.micro_batch_size = 4;
  c.train.warmup_epochs = 1;
  c.train.lr = 1e-3;
  c.train.head.head_dim = 8;
  c.data.val_fraction = 0.25;
  return c;
}

bool close_rel(const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b, double tol) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].numel(); ++k) {
      const double x = a[i][k], y = b[i][k];
      if (std::fabs(x - y) > tol * std::max({std::fabs(x), std::fabs(y), 1e-6})) return false;
    }
  return true;
}

}  // namespace

TEST_CASE("combined_loss: documented examples") {
  Tape<double> tape;
  DistillInputs<double> in;
  in.teacher_logits = tape.leaf(logits_with_loss(0.2));
  in.student_logits = tape.leaf(logits_with_loss(0.3));
  CHECK(total_of({1.0, 1.0, 0.0, DistanceTarget::logits}, in) == doctest::Approx(0.5).epsilon(1e-12));

  DistillInputs<double> in2;
  in2.teacher_logits = tape.leaf(logits_with_loss(0.4));
  in2.student_logits = tape.leaf(logits_with_loss(0.6));
  in2.teacher_feature = tape.leaf(Tensor<double>({1}, {0.0}));
  in2.student_feature = tape.leaf(Tensor<double>({1}, {std::sqrt(0.1)}));
  CHECK(total_of({0.5, 1.0, 2.0, DistanceTarget::features}, in2) == doctest::Approx(1.0).epsilon(1e-12));

  // (0, 1, 0) is the student's own cross-entropy, bit for bit.
  const std::size_t label[] = {0};
  const double plain = ops::cross_entropy(in2.student_logits, std::span<const std::size_t>(label)).value().item();
  CHECK(total_of({0.0, 1.0, 0.0, DistanceTarget::logits}, in2) == plain);
}

TEST_CASE("combined_loss: matches the hand-computed sum") {
  CHECK(checks::loss_algebra_error(500, 3) < 1e-12);
}

TEST_CASE("combined_loss: linear in the weights") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    Tape<double> tape;
    DistillInputs<double> in;
    in.student_logits = tape.leaf(oracle::random_tensor({2}, rng, -3, 3));
    in.teacher_logits = tape.leaf(oracle::random_tensor({2}, rng, -3, 3));
    const DistillationWeights w{0.3 + t * 0.01, 0.7, 0.2, DistanceTarget::logits};
    const DistillationWeights w2{2 * w.alpha, 2 * w.beta, 2 * w.gamma, DistanceTarget::logits};
    CHECK(total_of(w2, in) == 2 * total_of(w, in));
  }
}

TEST_CASE("combined_loss: missing teacher outputs") {
  Tape<double> tape;
  DistillInputs<double> in;
  in.student_logits = tape.leaf(logits_with_loss(0.3));
  CHECK_THROWS_AS(combined_loss<double>({0.5, 1.0, 0.0, DistanceTarget::logits}, in, 0), ValueError);
  CHECK_THROWS_AS(combined_loss<double>({0.0, 1.0, 1.0, DistanceTarget::logits}, in, 0), ValueError);
  in.teacher_logits = tape.leaf(logits_with_loss(0.2));
  CHECK_THROWS_AS(combined_loss<double>({0.0, 1.0, 1.0, DistanceTarget::features}, in, 0), ValueError);
  CHECK_NOTHROW(combined_loss<double>({0.5, 1.0, 1.0, DistanceTarget::logits}, in, 0));
  CHECK_THROWS_AS(combined_loss<double>({0.0, 0.0, 0.0, DistanceTarget::logits}, in, 0), ConfigError);
  CHECK_THROWS_AS(combined_loss<double>({-1.0, 1.0, 0.0, DistanceTarget::logits}, in, 0), ConfigError);
}

TEST_CASE("combined_loss: frozen teacher terms carry no gradient into the student") {
  Tape<double> tape;
  DistillInputs<double> in;
  auto zs = tape.leaf(Tensor<double>({2}, {0.3, -0.2}));
  in.student_logits = zs;
  in.teacher_logits = tape.constant(Tensor<double>({2}, {1.0, -1.0}));
  tape.backward(combined_loss<double>({1.0, 0.0, 0.0, DistanceTarget::logits}, in, 1).total);
  CHECK(tape.grad(zs) == Tensor<double>({2}, {0.0, 0.0}));
}

TEST_CASE("select_rows: K >= N and errors") {
  std::mt19937_64 rng(1);
  const std::vector<std::string> texts = {"a b", "c", "d", "e"};
  AggregationSpec spec;
  for (SelectMode m : {SelectMode::off, SelectMode::random, SelectMode::ngram_weighted}) {
    CHECK(select_rows(4, 4, m, texts, "a", spec, rng) == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(select_rows(4, 9, m, texts, "a", spec, rng) == std::vector<std::size_t>{0, 1, 2, 3});
  }
  CHECK_THROWS_AS(select_rows(0, 1, SelectMode::random, {}, "a", spec, rng), ValueError);
  CHECK_THROWS_AS(select_rows(4, 0, SelectMode::random, texts, "a", spec, rng), ValueError);
  CHECK_THROWS_AS(select_rows(3, 1, SelectMode::ngram_weighted, texts, "a", spec, rng), DimensionError);
}

TEST_CASE("select_rows: distinct sorted indices, deterministic in the rng") {
  const std::vector<std::string> texts(12, "x");
  AggregationSpec spec;
  std::mt19937_64 a(5), b(5);
  for (int t = 0; t < 200; ++t) {
    const auto s = select_rows(12, 5, SelectMode::random, texts, "x", spec, a);
    CHECK(s == select_rows(12, 5, SelectMode::random, texts, "x", spec, b));
    REQUIRE(s.size() == 5);
    for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i - 1] < s[i]);
    CHECK(s.back() < 12);
  }
}

TEST_CASE("select_rows: degenerate weights pick the only similar row") {
  const std::vector<std::string> texts = {"alpha beta", "gamma", "delta"};
  AggregationSpec spec;
  spec.ngram_order = 1;
  spec.ngram_unit = NgramUnit::word;
  std::mt19937_64 rng(2);
  int hits = 0;
  for (int t = 0; t < 1000; ++t) hits += select_rows(3, 1, SelectMode::ngram_weighted, texts, "alpha beta", spec, rng)[0] == 0;
  CHECK(hits >= 999);
  const double w[] = {1.0, 0.0, 0.0};
  for (int t = 0; t < 100; ++t) CHECK(sample_without_replacement(w, 1, rng) == std::vector<std::size_t>{0});
}

TEST_CASE("select_rows: Monte Carlo frequency matches the normalized weights") {
  const std::vector<std::string> texts = {"paris is big", "oslo is cold", "rome", "paris oslo", "is"};
  const std::string query = "paris is cold";
  AggregationSpec spec;
  spec.ngram_order = 1;
  spec.ngram_unit = NgramUnit::word;
  std::vector<double> want;
  double total = 0;
  for (const auto& t : texts) {
    want.push_back(oracle::brute_dice(t, query, 1, true) + 1e-6);
    total += want.back();
  }
  std::mt19937_64 rng(11);
  std::vector<double> seen(texts.size(), 0);
  const int draws = 100000;
  for (int t = 0; t < draws; ++t) seen[select_rows(5, 1, SelectMode::ngram_weighted, texts, query, spec, rng)[0]] += 1;
  for (std::size_t i = 0; i < texts.size(); ++i) CHECK(std::fabs(seen[i] / draws - want[i] / total) < 0.02);

  std::fill(seen.begin(), seen.end(), 0);
  for (int t = 0; t < draws; ++t) seen[select_rows(5, 1, SelectMode::random, texts, query, spec, rng)[0]] += 1;
  for (double s : seen) CHECK(std::fabs(s / draws - 0.2) < 0.02);
}

TEST_CASE("selective backward: agrees with full backward and the detach oracle") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    CAPTURE(seed);
    const auto r = checks::selective_backward_check(seed);
    CHECK(r.full_vs_all <= 1e-6);
    CHECK(r.subset_vs_oracle <= 1e-6);
    CHECK(r.forward_identical);
  }
  // Detaching rows must actually remove encoder gradient for some model.
  bool changed = false;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) changed = changed || checks::selective_backward_check(seed).subset_changes_grads;
  CHECK(changed);
}

TEST_CASE("selective backward: row index errors") {
  Tape<double> tape;
  std::vector<Var<double>> rows = {tape.leaf(Tensor<double>({2}, {1, 2}))};
  const std::size_t bad[] = {1};
  CHECK_THROWS_AS(detach_unselected(tape, rows, std::span<const std::size_t>(bad)), ValueError);
  CHECK_THROWS_AS(detach_unselected(tape, rows, std::span<const std::size_t>()), ValueError);
}

TEST_CASE("(0, 1, 0) training reproduces the plain student loop bitwise") {
  const auto t = checks::plain_student_traces(24, 4);
  CHECK(t.combined == t.plain);
  CHECK(t.params_identical);
}

TEST_CASE("gradient accumulation: micro-batch 1 x 4 equals one micro-batch of 4") {
  std::mt19937_64 gen(6);
  Dataset data;
  for (std::size_t t = 0; t < 2; ++t) {
    Table table = oracle::tiny_table(gen, 4);
    table.table_id = "t" + std::to_string(t);
    for (std::size_t k = 0; k < 2; ++k)
      data.statements.push_back({table.table_id + std::to_string(k), table.table_id,
                                 "the age of the row where name is " + table.rows[k][0] + " is 31", k == 0});
    data.tables.push_back(table);
  }
  StudentModel<double> model(oracle::tiny_student(Phi::mlp_rich, Rho::logmeanexp), oracle::tiny_vocab(), 6);
  std::vector<const Statement*> batch;
  for (const auto& s : data.statements) batch.push_back(&s);
  const DistillationWeights w;
  std::mt19937_64 rng(0);

  model.params().zero_grad();
  for (const Statement* s : batch) {
    const Statement* one[] = {s};
    student_micro_batch(model, data, std::span<const Statement* const>(one), w, kNoTeacher, {}, 0.25, Mode::train, rng);
  }
  const auto accumulated = checks::grads_of(model.params());
  model.params().zero_grad();
  const BatchLoss l = student_micro_batch(model, data, std::span<const Statement* const>(batch), w, kNoTeacher, {}, 0.25,
                                          Mode::train, rng);
  CHECK(l.count == 4);
  CHECK(close_rel(accumulated, checks::grads_of(model.params()), 1e-6));
}

TEST_CASE("student_micro_batch: divergence guard names the statement") {
  const Dataset data = small_dataset(1, 3);
  StudentModel<double> model(oracle::tiny_student(Phi::hadamard, Rho::mean),
                             build_vocab(data.tables, data.statements, 1), 1);
  for (auto* p : model.params().with_prefix("head.classifier"))
    for (double& v : p->value.data()) v = std::numeric_limits<double>::quiet_NaN();
  const Statement* one[] = {&data.statements[0]};
  std::mt19937_64 rng(0);
  try {
    student_micro_batch(model, data, std::span<const Statement* const>(one), DistillationWeights{}, kNoTeacher, {}, 1.0,
                        Mode::eval, rng);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find(data.statements[0].statement_id) != std::string::npos);
  }
}

TEST_CASE("student_micro_batch: teacher targets are required when distilling") {
  const Dataset data = small_dataset(1, 3);
  StudentModel<double> model(oracle::tiny_student(Phi::hadamard, Rho::mean),
                             build_vocab(data.tables, data.statements, 1), 1);
  const Statement* one[] = {&data.statements[0]};
  TeacherCache<double> empty;
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(student_micro_batch(model, data, std::span<const Statement* const>(one),
                                      DistillationWeights{0.5, 1.0, 0.0, DistanceTarget::logits}, &empty, {}, 1.0,
                                      Mode::eval, rng),
                  NotFoundError);
}

TEST_CASE("is_validation: deterministic split near the requested fraction") {
  std::size_t val = 0;
  const std::size_t n = 4000;
  for (std::size_t i = 0; i < n; ++i) {
    const Statement s{"stmt-" + std::to_string(i), "t", "x", false};
    CHECK(is_validation(s, 0.1) == is_validation(s, 0.1));
    val += is_validation(s, 0.1);
  }
  CHECK(std::fabs(static_cast<double>(val) / n - 0.1) < 0.02);
}

TEST_CASE("config: JSON round trip and rejection") {
  ExperimentConfig c = small_experiment();
  c.train.selective = {SelectMode::ngram_weighted, 3};
  c.distill = {0.2, 1.0, 0.5, DistanceTarget::features};
  c.teacher.model.head.head_dim = c.train.head.head_dim;
  const auto j = c.to_json();
  CHECK(ExperimentConfig::from_json(j).to_json() == j);

  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json{{"trian", nlohmann::json::object()}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json::array()), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"micro_batch_size", 5}, {"virtual_batch_size", 64}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"selective_backward", {{"mode", "sometimes"}}}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"lr", "fast"}}), ConfigError);
  CHECK_THROWS_AS(DistillationWeights::from_json({{"distance_target", "hidden"}}), ConfigError);
  CHECK_THROWS_AS(DataConfig::from_json({{"val_fraction", 1.0}}), ConfigError);

  const auto toy = ExperimentConfig::load(ROTAR_TOY_CONFIG);
  CHECK(toy.aggregation.phi == Phi::ngram_weighted);
  CHECK(toy.train.epochs == 30);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.json"), IoError);
}

TEST_CASE("run_experiment: deterministic, early stopping and best-epoch restore") {
  const Dataset data = small_dataset(6, 21);
  ExperimentConfig c = small_experiment();
  c.train.epochs = 10;
  c.train.early_stop_patience = 2;
  const auto a = run_experiment(data, c);
  const auto b = run_experiment(data, c);

  const auto& m = a.student_metrics;
  REQUIRE(!m.epochs.empty());
  for (std::size_t i = 0; i < m.epochs.size(); ++i) CHECK(m.epochs[i].epoch == i + 1);
  CHECK(m.epochs.size() <= m.best_epoch + c.train.early_stop_patience);
  if (m.early_stopped) CHECK(m.epochs.size() == m.best_epoch + c.train.early_stop_patience);
  CHECK(m.best_val_acc == m.epochs[m.best_epoch - 1].val_acc);
  for (const auto& e : m.epochs) CHECK(e.val_acc <= m.best_val_acc);

  REQUIRE(m.epochs.size() == b.student_metrics.epochs.size());
  for (std::size_t i = 0; i < m.epochs.size(); ++i) {
    CHECK(m.epochs[i].task_student == b.student_metrics.epochs[i].task_student);
    CHECK(m.epochs[i].val_acc == b.student_metrics.epochs[i].val_acc);
    CHECK(m.epochs[i].lr == b.student_metrics.epochs[i].lr);
  }
  CHECK(encode_checkpoint(make_checkpoint(*a.student, a.model_seed)) ==
        encode_checkpoint(make_checkpoint(*b.student, b.model_seed)));

  // The retained weights are the best epoch's: re-evaluating gives its accuracy.
  std::vector<const Statement*> val;
  for (const auto& s : data.statements)
    if (is_validation(s, c.data.val_fraction)) val.push_back(&s);
  CHECK(student_accuracy(*a.student, data, val) == m.best_val_acc);

  const auto csv = m.to_csv();
  CHECK(csv.rfind("epoch,task_T,task_S,distance,val_acc,lr,seconds\n", 0) == 0);
  CHECK(m.summary().at("best_epoch") == m.best_epoch);
}

TEST_CASE("run_experiment: teacher phase and distillation") {
  const Dataset data = small_dataset(4, 5);
  ExperimentConfig c = small_experiment();
  c.train.epochs = 2;
  c.distill = {0.5, 1.0, 0.5, DistanceTarget::logits};
  CHECK_THROWS_AS(run_experiment(data, c), ConfigError);

  c.teacher.enabled = true;
  c.teacher.epochs = 2;
  c.teacher.model.encoder = c.encoder;
  c.teacher.model.encoder.max_len = 512;
  c.teacher.lr = 1e-3;
  const auto r = run_experiment(data, c);
  REQUIRE(r.teacher_metrics.has_value());
  CHECK(r.teacher_metrics->epochs.size() >= 1);
  for (const auto& e : r.student_metrics.epochs) {
    CHECK(e.task_teacher > 0);
    CHECK(e.distance > 0);
  }

  // A frozen teacher checkpoint replaces the teacher phase.
  const Checkpoint ck = make_checkpoint(*r.teacher, r.teacher_seed);
  c.teacher.enabled = false;
  const auto r2 = run_experiment(data, c, &ck);
  CHECK(!r2.teacher_metrics.has_value());
  CHECK(r2.student_metrics.epochs.front().task_teacher > 0);
}

TEST_CASE("run_experiment: empty split is an error") {
  const Dataset data = small_dataset(1, 5);
  ExperimentConfig c = small_experiment();
  c.data.val_fraction = 1e-9;
  CHECK_THROWS_AS(run_experiment(data, c), ValueError);
}

TEST_CASE("run_experiment: flat validation accuracy stops after the patience window") {
  const Dataset data = small_dataset(4, 9);
  ExperimentConfig c = small_experiment();
  c.train.epochs = 10;
  c.train.early_stop_patience = 3;
  c.train.lr = 1e-12;
  const auto m = run_experiment(data, c).student_metrics;
  CHECK(m.early_stopped);
  CHECK(m.best_epoch == 1);
  CHECK(m.epochs.size() == 4);
}
