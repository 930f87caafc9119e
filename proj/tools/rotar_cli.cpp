// rotar: dataset generation, training, row encoding, cached querying and
// latency benchmarking.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "rotar/bench.hpp"
#include "rotar/checkpoint.hpp"
#include "rotar/dataset.hpp"
#include "rotar/repstore.hpp"
#include "rotar/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("ROTAR_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0') throw rotar::ConfigError(std::string("ROTAR_SEED is not an integer: ") + raw);
  return v;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text, const std::string& flag) {
  const auto dots = text.find("..");
  try {
    if (dots == std::string::npos) {
      const std::size_t v = std::stoul(text);
      return {v, v};
    }
    return {std::stoul(text.substr(0, dots)), std::stoul(text.substr(dots + 2))};
  } catch (const std::exception&) {
    throw rotar::ConfigError(flag + " expects MIN..MAX, got '" + text + "'");
  }
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw rotar::ConfigError("--sizes expects a comma list of integers, got '" + text + "'");
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw rotar::IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw rotar::IoError("write failed for '" + path.string() + "'");
}

int gen_data(const fs::path& out, std::size_t tables, const std::string& rows, const std::string& cols,
             std::size_t per_table, std::uint64_t seed) {
  rotar::SyntheticConfig cfg;
  cfg.num_tables = tables;
  cfg.rows_range = parse_range(rows, "--rows");
  cfg.cols_range = parse_range(cols, "--cols");
  cfg.statements_per_table = per_table;
  cfg.seed = env_seed().value_or(seed);
  const auto data = rotar::generate_synthetic(cfg);
  rotar::save_dataset(data, out);
  std::cout << json{{"out", out.string()},
                    {"tables", data.tables.size()},
                    {"statements", data.statements.size()},
                    {"seed", cfg.seed}}
                   .dump()
            << "\n";
  return 0;
}

int train(const fs::path& data_dir, const fs::path& config_path, const fs::path& out,
          const std::string& teacher_path) {
  auto config = rotar::ExperimentConfig::load(config_path);
  if (auto s = env_seed()) config.train.seed = *s;
  const auto data = rotar::load_dataset(data_dir);
  std::optional<rotar::Checkpoint> teacher;
  if (!teacher_path.empty()) teacher = rotar::load_checkpoint(teacher_path);

  auto progress = [](const std::string& phase, const rotar::EpochMetrics& m) {
    std::cerr << phase << " epoch " << m.epoch << " task_T=" << m.task_teacher << " task_S=" << m.task_student
              << " distance=" << m.distance << " val_acc=" << m.val_acc << " lr=" << m.lr
              << " seconds=" << m.seconds << "\n";
  };
  const auto result = rotar::run_experiment(data, config, teacher ? &*teacher : nullptr, progress);

  fs::create_directories(out);
  rotar::save_checkpoint(rotar::make_checkpoint(*result.student, result.model_seed), out / "student.ckpt");
  write_text(out / "metrics.csv", result.student_metrics.to_csv());
  json summary = {{"student", result.student_metrics.summary()}, {"config", config.to_json()}};
  if (result.teacher_metrics) {
    rotar::save_checkpoint(rotar::make_checkpoint(*result.teacher, result.teacher_seed), out / "teacher.ckpt");
    write_text(out / "teacher_metrics.csv", result.teacher_metrics->to_csv());
    summary["teacher"] = result.teacher_metrics->summary();
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << json{{"out", out.string()},
                    {"best_epoch", result.student_metrics.best_epoch},
                    {"best_val_acc", result.student_metrics.best_val_acc}}
                   .dump()
            << "\n";
  return 0;
}

int encode(const fs::path& model_path, const fs::path& data_dir, const fs::path& store_path, bool parallel) {
  const auto ckpt = rotar::load_checkpoint(model_path);
  const auto model = rotar::load_student(ckpt);
  const auto fp = rotar::encoder_fingerprint(ckpt);
  const auto tables = rotar::load_tables(data_dir / "tables");
  rotar::RepStore store(model->config().row_encoder.dim, fp);
  std::size_t rows = 0;
  if (parallel) {
    std::vector<rotar::Tensor<float>> encoded(tables.size());
    const auto count = static_cast<long long>(tables.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < count; ++i) encoded[static_cast<std::size_t>(i)] = model->encode_table(tables[static_cast<std::size_t>(i)]);
    for (std::size_t i = 0; i < tables.size(); ++i) {
      store.put(fp, tables[i].table_id, encoded[i]);
      rows += tables[i].num_rows();
    }
  } else {
    for (const auto& t : tables) {
      store.put(fp, t.table_id, model->encode_table(t));
      rows += t.num_rows();
    }
  }
  store.save(store_path);
  std::cout << json{{"store", store_path.string()},
                    {"tables", tables.size()},
                    {"rows", rows},
                    {"fingerprint", rotar::to_hex(fp)}}
                   .dump()
            << "\n";
  return 0;
}

int query(const fs::path& model_path, const fs::path& store_path, const std::string& table_id,
          const std::string& statement, bool no_cache, const std::string& data_dir) {
  const auto ckpt = rotar::load_checkpoint(model_path);
  const auto model = rotar::load_student(ckpt);
  const auto fp = rotar::encoder_fingerprint(ckpt);

  std::optional<rotar::Table> table;
  auto need_table = [&]() -> const rotar::Table& {
    if (!table) {
      if (data_dir.empty()) {
        throw rotar::ConfigError("table '" + table_id + "' needs its rows: pass --data DIR");
      }
      table = rotar::load_table_csv(fs::path(data_dir) / "tables" / (table_id + ".csv"));
    }
    return *table;
  };

  std::optional<rotar::Tensor<float>> rows;
  bool used_cache = false;
  if (!no_cache) {
    if (fs::exists(store_path)) {
      const auto store = rotar::RepStore::load(store_path);
      try {
        rows = store.get(fp, table_id);
        used_cache = true;
      } catch (const rotar::NotFoundError&) {
        if (data_dir.empty()) throw;
      }
    } else if (data_dir.empty()) {
      throw rotar::NotFoundError("store '" + store_path.string() + "' does not exist");
    }
  }
  if (!rows) rows = model->encode_table(need_table());

  std::vector<std::string> texts;
  if (model->config().aggregation.uses_text()) texts = rotar::StudentModel<float>::row_texts(need_table());
  const auto logits = model->predict_logits(*rows, texts, statement);
  const bool entailed = rotar::verdict(logits);
  std::cout << json{{"statement", statement},
                    {"table_id", table_id},
                    {"score", rotar::entailment_score(logits)},
                    {"verdict", entailed ? "entailed" : "refuted"},
                    {"used_cache", used_cache},
                    {"row_encoder_calls", model->row_encoder().calls()}}
                   .dump()
            << "\n";
  return 0;
}

int bench(const fs::path& model_path, const std::string& sizes, std::size_t repeats, const fs::path& out) {
  const auto ckpt = rotar::load_checkpoint(model_path);
  const auto model = rotar::load_student(ckpt);
  rotar::BenchConfig cfg;
  cfg.sizes = parse_sizes(sizes);
  cfg.repeats = repeats;
  if (auto s = env_seed()) cfg.seed = *s;
  const auto report = rotar::run_bench(*model, cfg);
  write_text(out, report.to_json().dump(2) + "\n");
  json brief = json::array();
  for (const auto& p : report.points) {
    brief.push_back({{"rows", p.rows}, {"cold_ms", p.cold.mean_ms}, {"warm_ms", p.warm.mean_ms}, {"ratio", p.ratio}});
  }
  std::cout << json{{"out", out.string()}, {"sizes", brief}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rotar: row-based table representations"};
  app.require_subcommand(1);

  std::string out, rows = "8..32", cols = "3..5", data, config, teacher, model, store, table_id, statement,
                   sizes = "8,32,64,256";
  std::size_t tables = 200, per_table = 10, repeats = 10;
  std::uint64_t seed = 17;
  bool parallel = false, no_cache = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic fact-verification dataset");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--tables", tables, "Number of tables");
  gen->add_option("--rows", rows, "Rows per table, MIN..MAX");
  gen->add_option("--cols", cols, "Columns per table, MIN..MAX");
  gen->add_option("--statements-per-table", per_table, "Statements per table");
  gen->add_option("--seed", seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Train the student (and teacher when configured)");
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--config", config, "Experiment config JSON")->required();
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--teacher", teacher, "Frozen teacher checkpoint");

  auto* enc = app.add_subcommand("encode", "Encode every table row into a store");
  enc->add_option("--model", model, "Student checkpoint")->required();
  enc->add_option("--data", data, "Dataset directory")->required();
  enc->add_option("--store", store, "Store file")->required();
  enc->add_flag("--parallel", parallel, "Encode tables on all OpenMP threads");

  auto* qu = app.add_subcommand("query", "Verify one statement against one table");
  qu->add_option("--model", model, "Student checkpoint")->required();
  qu->add_option("--store", store, "Store file")->required();
  qu->add_option("--table-id", table_id, "Table id")->required();
  qu->add_option("--statement", statement, "Statement text")->required();
  qu->add_option("--data", data, "Dataset directory, for uncached tables and text-based phi");
  qu->add_flag("--no-cache", no_cache, "Encode the rows instead of reading the store");

  auto* be = app.add_subcommand("bench", "Cold vs warm query latency");
  be->add_option("--model", model, "Student checkpoint")->required();
  be->add_option("--sizes", sizes, "Comma-separated row counts");
  be->add_option("--repeats", repeats, "Timed repetitions per size");
  be->add_option("--out", out, "Report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    if (*gen) return gen_data(out, tables, rows, cols, per_table, seed);
    if (*tr) return train(data, config, out, teacher);
    if (*enc) return encode(model, data, store, parallel);
    if (*qu) return query(model, store, table_id, statement, no_cache, data);
    if (*be) return bench(model, sizes, repeats, out);
  } catch (const rotar::Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 1;
}
