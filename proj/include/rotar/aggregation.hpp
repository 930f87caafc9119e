#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rotar/ngram.hpp"
#include "rotar/nn.hpp"

namespace rotar {

enum class Phi { hadamard, mlp_concat, mlp_rich, ngram_weighted, ngram_threshold };
enum class Rho { mean, min, max, logmeanexp, multihead };
enum class EmptyFallback { zero_vector, unfiltered_mean };

struct AggregationSpec {
  Phi phi = Phi::hadamard;
  Rho rho = Rho::mean;
  std::size_t ngram_order = 1;
  NgramUnit ngram_unit = NgramUnit::word;
  // Rows with similarity <= threshold are dropped by ngram_threshold.
  double threshold = 0.5;
  std::size_t heads = 4;
  EmptyFallback empty_fallback = EmptyFallback::zero_vector;

  void validate() const;
  bool uses_text() const { return phi == Phi::ngram_weighted || phi == Phi::ngram_threshold; }

  nlohmann::json to_json() const;
  static AggregationSpec from_json(const nlohmann::json& j);
  bool operator==(const AggregationSpec&) const = default;
};

std::string to_string(Phi phi);
std::string to_string(Rho rho);
Phi parse_phi(const std::string& name);
Rho parse_rho(const std::string& name);

inline constexpr double kLeakySlope = 0.01;

// Query-specific aggregation: phi per row, then rho over the row set.
template <typename T>
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(ParameterSet<T>& params, const std::string& prefix, AggregationSpec spec,
             std::size_t dim, std::mt19937_64& rng);

  const AggregationSpec& spec() const { return spec_; }
  std::size_t dim() const { return dim_; }

  // Feature for one row, or nullopt when ngram_threshold drops it.
  std::optional<Var<T>> apply_phi(Tape<T>& tape, Var<T> row_vector, Var<T> query_vector,
                                  std::string_view row_text, std::string_view query_text) const;
  // Feature given a precomputed similarity (used by table_representation).
  std::optional<Var<T>> apply_phi_scored(Tape<T>& tape, Var<T> row_vector, Var<T> query_vector,
                                         double similarity) const;

  // Set reduction over a nonempty feature list.
  Var<T> apply_rho(Tape<T>& tape, const std::vector<Var<T>>& features) const;

  // rho({phi(v_i, q)}). When thresholding removes every row the empty
  // fallback decides the result. `row_texts` may be empty unless the spec
  // uses text.
  Var<T> table_representation(Tape<T>& tape, const std::vector<Var<T>>& row_vectors,
                              std::span<const std::string> row_texts, Var<T> query_vector,
                              std::string_view query_text) const;

  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const std::string& prefix,
                                                                     const AggregationSpec& spec,
                                                                     std::size_t dim);

  // Direct access for tests that pin multi-head parameters.
  Parameter<T>* theta() const { return theta_; }
  Parameter<T>* projection() const { return projection_; }

 private:
  // rho over a stacked [N x D] feature matrix.
  Var<T> reduce(Tape<T>& tape, Var<T> stacked) const;

  AggregationSpec spec_;
  std::size_t dim_ = 0;
  Linear<T> mlp_in_;
  Linear<T> mlp_out_;
  Parameter<T>* theta_ = nullptr;
  Parameter<T>* projection_ = nullptr;
};

struct HeadConfig {
  std::size_t head_dim = 128;
  double dropout = 0.1;

  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
  bool operator==(const HeadConfig&) const = default;
};

// Transformation module (two layers, hidden = input dim) followed by the
// three-layer binary classifier. LeakyReLU(0.01) and dropout throughout.
template <typename T>
class HeadStack {
 public:
  HeadStack() = default;
  HeadStack(ParameterSet<T>& params, const std::string& prefix, std::size_t input_dim,
            HeadConfig config, std::mt19937_64& rng);

  Var<T> transform(Tape<T>& tape, Var<T> feature, Mode mode, std::mt19937_64& rng) const;
  Var<T> classify(Tape<T>& tape, Var<T> transformed, Mode mode, std::mt19937_64& rng) const;
  // classify(transform(feature)) -> logits [2]
  Var<T> forward(Tape<T>& tape, Var<T> feature, Mode mode, std::mt19937_64& rng) const;

  std::size_t input_dim() const { return input_dim_; }
  const HeadConfig& config() const { return config_; }

  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const std::string& prefix,
                                                                     std::size_t input_dim,
                                                                     const HeadConfig& config);

 private:
  std::size_t input_dim_ = 0;
  HeadConfig config_;
  Linear<T> transform1_, transform2_;
  Linear<T> classify1_, classify2_, classify3_;
};

}  // namespace rotar
