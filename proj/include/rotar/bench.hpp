#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "rotar/model.hpp"

namespace rotar {

struct LatencyStats {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;

  static LatencyStats from_samples(std::vector<double> samples_ms);
};

struct BenchPoint {
  std::size_t rows = 0;
  LatencyStats cold;
  LatencyStats warm;
  double ratio = 0.0;
  // Encoder forward passes per query, row and query encoder combined.
  double cold_encoder_calls = 0.0;
  double warm_encoder_calls = 0.0;
  double warm_row_encoder_calls = 0.0;
  double max_logit_gap = 0.0;
};

struct BenchReport {
  std::size_t repeats = 0;
  std::vector<BenchPoint> points;

  const BenchPoint& at(std::size_t rows) const;
  nlohmann::json to_json() const;
};

struct BenchConfig {
  std::vector<std::size_t> sizes{8, 32, 64, 256};
  std::size_t repeats = 10;
  std::size_t cols = 4;
  std::uint64_t seed = 17;

  void validate() const;
};

// Synthetic N-row table drawn from the default attribute pools, with a
// matching templated statement.
std::pair<Table, std::string> make_bench_table(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

// Per size: cold = encode every row, aggregate, classify; warm = read the
// rows from an in-memory store, aggregate, classify. One warmup round per
// path is discarded. Runs on the calling thread.
BenchReport run_bench(const StudentModel<float>& model, const BenchConfig& config);

}  // namespace rotar
