#include "rotar/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "rotar/dataset.hpp"
#include "rotar/repstore.hpp"

namespace rotar {

LatencyStats LatencyStats::from_samples(std::vector<double> samples) {
  if (samples.empty()) throw ValueError("latency stats need at least one sample");
  std::sort(samples.begin(), samples.end());
  LatencyStats s;
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean_ms = sum / static_cast<double>(samples.size());
  // Nearest-rank percentiles.
  auto rank = [&](double p) {
    const auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(samples.size())));
    return samples[std::clamp<std::size_t>(r, 1, samples.size()) - 1];
  };
  s.p50_ms = rank(0.50);
  s.p95_ms = rank(0.95);
  return s;
}

const BenchPoint& BenchReport::at(std::size_t rows) const {
  for (const auto& p : points) {
    if (p.rows == rows) return p;
  }
  throw NotFoundError("bench report has no size " + std::to_string(rows));
}

nlohmann::json BenchReport::to_json() const {
  auto stats = [](const LatencyStats& s) {
    return nlohmann::json{{"mean_ms", s.mean_ms}, {"p50_ms", s.p50_ms}, {"p95_ms", s.p95_ms}};
  };
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& p : points) {
    sizes.push_back({{"rows", p.rows},
                     {"cold", stats(p.cold)},
                     {"warm", stats(p.warm)},
                     {"ratio", p.ratio},
                     {"cold_encoder_calls", p.cold_encoder_calls},
                     {"warm_encoder_calls", p.warm_encoder_calls},
                     {"warm_row_encoder_calls", p.warm_row_encoder_calls},
                     {"max_logit_gap", p.max_logit_gap}});
  }
  return {{"repeats", repeats}, {"sizes", sizes}};
}

void BenchConfig::validate() const {
  if (repeats < 5) throw ConfigError("bench: repeats must be >= 5");
  if (sizes.empty()) throw ConfigError("bench: no table sizes");
  for (std::size_t n : sizes) {
    if (n == 0) throw ConfigError("bench: table sizes must be >= 1");
  }
  if (cols == 0) throw ConfigError("bench: cols must be >= 1");
}

std::pair<Table, std::string> make_bench_table(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const auto pools = SyntheticConfig::default_attribute_pools();
  if (cols > pools.size()) throw ConfigError("bench: more columns than attribute pools");
  std::vector<std::size_t> attrs(pools.size());
  for (std::size_t i = 0; i < attrs.size(); ++i) attrs[i] = i;
  for (std::size_t i = attrs.size(); i > 1; --i) std::swap(attrs[i - 1], attrs[rng() % i]);
  attrs.resize(cols);
  Table t;
  t.table_id = "bench_" + std::to_string(rows);
  for (std::size_t a : attrs) t.schema.push_back(pools[a].attribute);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::string> row;
    for (std::size_t a : attrs) row.push_back(pools[a].values[rng() % pools[a].values.size()]);
    t.rows.push_back(std::move(row));
  }
  const std::size_t r = rng() % rows;
  const std::size_t c = cols > 1 ? 1 : 0;
  std::string statement = "the " + t.schema[0] + " of the row where " + t.schema[c] + " is " + t.rows[r][c] +
                          " is " + t.rows[r][0];
  return {std::move(t), std::move(statement)};
}

BenchReport run_bench(const StudentModel<float>& model, const BenchConfig& config) {
  config.validate();
  using Clock = std::chrono::steady_clock;
  BenchReport report;
  report.repeats = config.repeats;
  std::mt19937_64 rng(config.seed);
  const Fingerprint fp{};
  for (std::size_t n : config.sizes) {
    const auto [table, statement] = make_bench_table(n, config.cols, rng);
    const auto texts = StudentModel<float>::row_texts(table);
    RepStore store(model.config().row_encoder.dim, fp);
    store.put(fp, table.table_id, model.encode_table(table));

    auto cold = [&] { return model.predict_logits(model.encode_table(table), texts, statement); };
    auto warm = [&] { return model.predict_logits(store.get(fp, table.table_id), texts, statement); };

    BenchPoint point;
    point.rows = n;
    std::vector<double> cold_ms, warm_ms;
    std::uint64_t cold_calls = 0, warm_calls = 0, warm_row_calls = 0;
    for (std::size_t rep = 0; rep <= config.repeats; ++rep) {
      const auto rows0 = model.row_encoder().calls();
      const auto q0 = model.query_encoder().calls();
      auto t0 = Clock::now();
      const Tensor<float> a = cold();
      auto t1 = Clock::now();
      const auto rows1 = model.row_encoder().calls();
      const auto q1 = model.query_encoder().calls();
      const Tensor<float> b = warm();
      auto t2 = Clock::now();
      const auto rows2 = model.row_encoder().calls();
      const auto q2 = model.query_encoder().calls();
      if (rep == 0) continue;
      cold_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      warm_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
      cold_calls += (rows1 - rows0) + (q1 - q0);
      warm_calls += (rows2 - rows1) + (q2 - q1);
      warm_row_calls += rows2 - rows1;
      for (std::size_t k = 0; k < a.numel(); ++k) {
        point.max_logit_gap = std::max(point.max_logit_gap, std::fabs(static_cast<double>(a[k] - b[k])));
      }
    }
    const auto reps = static_cast<double>(config.repeats);
    point.cold = LatencyStats::from_samples(cold_ms);
    point.warm = LatencyStats::from_samples(warm_ms);
    point.ratio = point.cold.mean_ms / point.warm.mean_ms;
    point.cold_encoder_calls = static_cast<double>(cold_calls) / reps;
    point.warm_encoder_calls = static_cast<double>(warm_calls) / reps;
    point.warm_row_encoder_calls = static_cast<double>(warm_row_calls) / reps;
    report.points.push_back(point);
  }
  return report;
}

}  // namespace rotar
