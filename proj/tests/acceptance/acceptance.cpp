// Runs every acceptance criterion and prints one PASS/FAIL line per
// criterion. Exit status is nonzero when any criterion fails.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "grad_suite.hpp"
#include "oracles.hpp"
#include "persistence_checks.hpp"
#include "properties.hpp"
#include "rotar/dataset.hpp"
#include "rotar/ngram.hpp"
#include "training_checks.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rotar;

namespace {

const fs::path kWork = ROTAR_ACCEPTANCE_WORK;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Proc {
  int status = -1;
  std::string out;
};

// Runs the CLI in a fresh process; stderr goes to the shared log.
Proc cli(const std::string& args) {
  const std::string cmd = std::string("'") + ROTAR_CLI + "' " + args + " 2>>'" + (kWork / "cli.log").string() + "'";
  Proc p;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return p;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) p.out.append(buf.data(), n);
  p.status = pclose(pipe);
  return p;
}

json cli_json(const std::string& args) {
  const Proc p = cli(args);
  if (p.status != 0) throw std::runtime_error("rotar " + args.substr(0, args.find(' ')) + " exited with " +
                                              std::to_string(p.status) + ": " + p.out);
  return json::parse(p.out);
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// ---- 1 -------------------------------------------------------------------
Outcome gradients() {
  double worst = 0;
  std::string where;
  std::size_t cases = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto all = oracle::op_gradient_cases(seed);
    auto model = oracle::model_gradient_cases(seed);
    all.insert(all.end(), model.begin(), model.end());
    for (const auto& c : all) {
      ++cases;
      if (c.worst >= worst) {
        worst = c.worst;
        where = c.name + " seed " + std::to_string(seed);
      }
    }
  }
  return {worst < 1e-4, std::to_string(cases) + " checks over 20 seeds, worst rel err " + fmt(worst) + " (" + where + ")"};
}

// ---- 2 -------------------------------------------------------------------
Outcome row_permutation() {
  double worst = 0;
  for (Phi phi : {Phi::hadamard, Phi::mlp_concat, Phi::mlp_rich, Phi::ngram_weighted, Phi::ngram_threshold}) {
    for (Rho rho : {Rho::mean, Rho::min, Rho::max, Rho::logmeanexp, Rho::multihead}) {
      const StudentModel<float> model(props::toy_student(phi, rho), props::corpus_vocab(),
                                      static_cast<std::uint64_t>(phi) * 5 + static_cast<std::uint64_t>(rho) + 1);
      worst = std::max(worst, props::row_permutation_error(model, 50, 100 + static_cast<std::uint64_t>(phi) * 5 +
                                                                          static_cast<std::uint64_t>(rho)));
    }
  }
  return {worst <= 1e-5, "25 combinations x 50 triples, max |delta| " + fmt(worst)};
}

// ---- 3 -------------------------------------------------------------------
Outcome column_order() {
  PositionSwitches invariant{false, false, true, true};
  double worst = 0;
  for (Pooling pooling : {Pooling::mean, Pooling::cls}) {
    for (double d : props::column_permutation_deltas(invariant, 100, 31, pooling)) worst = std::max(worst, d);
  }
  auto broken = [](PositionSwitches pe) {
    std::size_t n = 0;
    for (double d : props::column_permutation_deltas(pe, 100, 47)) n += d > 1e-3;
    return n;
  };
  const std::size_t abs_on = broken({true, false, true, true});
  const std::size_t cell_on = broken({false, true, true, true});
  return {worst <= 1e-5 && abs_on >= 95 && cell_on >= 95,
          "invariant max |delta| " + fmt(worst) + "; differing pairs: absolute " + std::to_string(abs_on) +
              "/100, cell_index " + std::to_string(cell_on) + "/100"};
}

// ---- 4 -------------------------------------------------------------------
Outcome dice_oracle() {
  std::mt19937_64 rng(404);
  static const std::string alphabet = "abcdAB xyz,.!-";
  auto text = [&] {
    std::string s;
    for (std::size_t k = rng() % 20; k > 0; --k) s.push_back(alphabet[rng() % alphabet.size()]);
    return s;
  };
  std::size_t mismatches = 0, asym = 0, self = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string a = text(), b = text();
    const std::size_t n = 1 + rng() % 4;
    for (bool word : {true, false}) {
      const NgramUnit unit = word ? NgramUnit::word : NgramUnit::character;
      const double ns = ngram_similarity(a, b, n, unit);
      mismatches += ns != oracle::brute_dice(a, b, n, word);
      asym += ns != ngram_similarity(b, a, n, unit);
      if (!oracle::brute_grams(a, n, word).empty()) self += ngram_similarity(a, a, n, unit) != 1.0;
    }
  }
  return {mismatches == 0 && asym == 0 && self == 0,
          "1000 pairs x 2 units: " + std::to_string(mismatches) + " oracle mismatches, " + std::to_string(asym) +
              " asymmetric, " + std::to_string(self) + " ns(a,a) != 1"};
}

// ---- 5 -------------------------------------------------------------------
Outcome selective() {
  double all = 0, subset = 0;
  bool forward = true;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const auto r = checks::selective_backward_check(seed);
    all = std::max(all, r.full_vs_all);
    subset = std::max(subset, r.subset_vs_oracle);
    forward = forward && r.forward_identical;
  }
  return {all <= 1e-6 && subset <= 1e-6 && forward,
          "25 models: K=N rel err " + fmt(all) + ", K<N vs detach oracle " + fmt(subset) + ", forward bitwise " +
              (forward ? "equal" : "DIFFERENT")};
}

// ---- 6 -------------------------------------------------------------------
Outcome loss_algebra() {
  const double err = checks::loss_algebra_error(1000, 6);
  const auto traces = checks::plain_student_traces(40, 6);
  const bool same = traces.combined == traces.plain && traces.params_identical;
  return {err <= 1e-6 && same, "1000 random weightings, max abs err " + fmt(err) + "; (0,1,0) trace over 40 steps " +
                                   (same ? "bitwise equal" : "DIFFERS")};
}

// ---- 7 -------------------------------------------------------------------
const fs::path kData = kWork / "data";
const fs::path kRun = kWork / "run";

Outcome end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  cli_json("gen-data --out " + q(kData));
  const json r = cli_json("train --data " + q(kData) + " --config " + q(ROTAR_TOY_CONFIG) + " --out " + q(kRun));
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  const double acc = r.at("best_val_acc").get<double>();
  return {acc >= 0.9 && minutes < 20.0, "held-out accuracy " + fmt(acc) + " at epoch " +
                                            std::to_string(r.at("best_epoch").get<std::size_t>()) + ", " +
                                            fmt(minutes) + " min"};
}

// ---- 8 -------------------------------------------------------------------
Outcome cache_speedup() {
  if (!fs::exists(kRun / "student.ckpt")) return {false, "no trained checkpoint (criterion 7 did not finish)"};
  cli_json("bench --model " + q(kRun / "student.ckpt") + " --sizes 8,64,256 --repeats 10 --out " +
           q(kWork / "bench.json"));
  std::ifstream in(kWork / "bench.json");
  const json report = json::parse(in);
  auto point = [&](std::size_t rows) {
    for (const auto& p : report.at("sizes"))
      if (p.at("rows") == rows) return p;
    throw std::runtime_error("bench report lacks size " + std::to_string(rows));
  };
  const json p8 = point(8), p64 = point(64), p256 = point(256);
  const double ratio = p64.at("ratio");
  const double warm_growth = p256.at("warm").at("mean_ms").get<double>() / p8.at("warm").at("mean_ms").get<double>();
  const double cold_growth = p256.at("cold").at("mean_ms").get<double>() / p8.at("cold").at("mean_ms").get<double>();
  double warm_row_calls = 0, gap = 0;
  for (const auto& p : report.at("sizes")) {
    warm_row_calls = std::max(warm_row_calls, p.at("warm_row_encoder_calls").get<double>());
    gap = std::max(gap, p.at("max_logit_gap").get<double>());
  }

  // The same through the store: cached query against a fresh encode.
  const json stmt = [&] {
    const auto statements = load_statements(kData / "statements.jsonl");
    return json{{"table", statements[0].table_id}, {"text", statements[0].text}};
  }();
  cli_json("encode --model " + q(kRun / "student.ckpt") + " --data " + q(kData) + " --store " + q(kWork / "c8.rotr"));
  const std::string common = "query --model " + q(kRun / "student.ckpt") + " --store " + q(kWork / "c8.rotr") +
                             " --data " + q(kData) + " --table-id '" + stmt.at("table").get<std::string>() +
                             "' --statement '" + stmt.at("text").get<std::string>() + "'";
  const json warm = cli_json(common);
  const json cold = cli_json(common + " --no-cache");
  const bool cli_ok = warm.at("used_cache") == true && warm.at("row_encoder_calls") == 0 &&
                      std::fabs(warm.at("score").get<double>() - cold.at("score").get<double>()) <= 1e-5 &&
                      warm.at("verdict") == cold.at("verdict");

  const bool pass = ratio >= 2.0 && warm_growth <= 3.0 && cold_growth >= 8.0 && warm_row_calls == 0 && gap <= 1e-5 &&
                    cli_ok;
  return {pass, "cold/warm at 64 rows " + fmt(ratio) + "; warm(256)/warm(8) " + fmt(warm_growth) +
                    "; cold(256)/cold(8) " + fmt(cold_growth) + "; warm row-encoder calls " + fmt(warm_row_calls) +
                    "; max logit gap " + fmt(gap) + "; cli cached query " + (cli_ok ? "ok" : "MISMATCH")};
}

// ---- 9 -------------------------------------------------------------------
Outcome persistence() {
  const auto fuzz = checks::fingerprint_fuzz(100, 909, kWork);
  bool roundtrips = true;
  std::string note;
  if (fs::exists(kRun / "student.ckpt")) {
    const Checkpoint ck = load_checkpoint(kRun / "student.ckpt");
    save_checkpoint(ck, kWork / "resaved.ckpt");
    roundtrips = checks::read_bytes(kRun / "student.ckpt") == checks::read_bytes(kWork / "resaved.ckpt");

    // A store written by another process holds exactly this process's vectors.
    cli_json("encode --model " + q(kRun / "student.ckpt") + " --data " + q(kData) + " --store " + q(kWork / "c9.rotr"));
    const RepStore store = RepStore::load(kWork / "c9.rotr");
    const auto model = load_student(ck);
    const Fingerprint fp = encoder_fingerprint(ck);
    const auto tables = load_tables(kData / "tables");
    for (std::size_t i = 0; i < tables.size(); i += 25) roundtrips = roundtrips && store.get(fp, tables[i].table_id) == model->encode_table(tables[i]);
    store.save(kWork / "c9b.rotr");
    roundtrips = roundtrips && checks::read_bytes(kWork / "c9.rotr") == checks::read_bytes(kWork / "c9b.rotr");
  } else {
    roundtrips = false;
    note = " (no trained checkpoint)";
  }
  return {fuzz.refused == fuzz.trials && fuzz.fingerprint_changed == fuzz.trials && roundtrips,
          "fuzz: " + std::to_string(fuzz.refused) + "/" + std::to_string(fuzz.trials) +
              " mutations refused; checkpoint and store round trips " + (roundtrips ? "bitwise" : "DIFFER") + note};
}

// ---- 10 ------------------------------------------------------------------
std::string without_seconds(const fs::path& metrics_csv) {
  std::istringstream in(checks::read_bytes(metrics_csv));
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Outcome determinism() {
  std::ofstream(kWork / "small.json") << json{{"train", {{"epochs", 3}, {"lr", 0.001}, {"micro_batch_size", 16}}},
                                              {"aggregation", {{"phi", "mlp_rich"}, {"rho", "mean"}}}}
                                             .dump();
  std::vector<std::string> queries;
  std::array<std::string, 2> ckpt, metrics, summary, store;
  for (int k = 0; k < 2; ++k) {
    const fs::path d = kWork / ("det" + std::to_string(k));
    cli_json("gen-data --out " + q(d / "data") + " --tables 20 --seed 17");
    cli_json("train --data " + q(d / "data") + " --config " + q(kWork / "small.json") + " --out " + q(d / "run"));
    cli_json("encode --model " + q(d / "run" / "student.ckpt") + " --data " + q(d / "data") + " --store " +
             q(d / "rows.rotr"));
    ckpt[k] = checks::read_bytes(d / "run" / "student.ckpt");
    metrics[k] = without_seconds(d / "run" / "metrics.csv");
    json s = json::parse(checks::read_bytes(d / "run" / "summary.json"));
    s["student"].erase("total_seconds");
    summary[k] = s.dump();
    store[k] = checks::read_bytes(d / "rows.rotr");
    const auto statements = load_statements(d / "data" / "statements.jsonl");
    for (std::size_t i = 0; i < statements.size(); i += 20) {
      const Proc p = cli("query --model " + q(d / "run" / "student.ckpt") + " --store " + q(d / "rows.rotr") +
                         " --table-id '" + statements[i].table_id + "' --statement '" + statements[i].text + "'");
      queries.push_back(std::to_string(p.status) + p.out);
    }
  }
  const std::size_t half = queries.size() / 2;
  const bool same_queries = std::equal(queries.begin(), queries.begin() + half, queries.begin() + half);
  const bool pass = ckpt[0] == ckpt[1] && metrics[0] == metrics[1] && summary[0] == summary[1] &&
                    store[0] == store[1] && same_queries;
  std::string detail = "two fresh pipelines: checkpoint " + std::string(ckpt[0] == ckpt[1] ? "equal" : "DIFFERS") +
                       ", metrics " + (metrics[0] == metrics[1] ? "equal" : "DIFFER") + ", store " +
                       (store[0] == store[1] ? "equal" : "DIFFERS") + ", " + std::to_string(half) + " queries " +
                       (same_queries ? "equal" : "DIFFER");
  return {pass, detail};
}

}  // namespace

int main() {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradients},    {2, row_permutation}, {3, column_order}, {4, dice_oracle},      {5, selective},
      {6, loss_algebra}, {7, end_to_end},      {8, cache_speedup}, {9, persistence}, {10, determinism}};
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " [" << fmt(secs)
              << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
