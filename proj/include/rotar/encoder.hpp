#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rotar/nn.hpp"
#include "rotar/table.hpp"

namespace rotar {

// Which position components are summed into the token embeddings.
struct PositionSwitches {
  bool absolute = false;
  bool cell_index = false;
  bool intra_cell = true;
  bool attribute = true;

  bool operator==(const PositionSwitches&) const = default;
};

enum class Pooling { mean, cls };

struct EncoderConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 128;
  std::size_t vocab_size = 0;
  PositionSwitches pe;
  Pooling pooling = Pooling::mean;
  double dropout = 0.1;
  std::size_t attribute_buckets = kDefaultAttributeBuckets;
  // Cell-index embedding covers cells [0, max_cells).
  std::size_t max_cells = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);

  // Defaults for the query encoder: absolute and intra positions only.
  static EncoderConfig query_defaults();

  bool operator==(const EncoderConfig&) const = default;
};

// Sum of the enabled position components for every token, [len x dim].
// Disabled components contribute exactly zero; all-disabled yields a zero
// matrix. Out-of-range indices throw instead of clamping.
template <typename T>
struct PositionTables {
  Parameter<T>* absolute = nullptr;
  Parameter<T>* cell_index = nullptr;
  Parameter<T>* intra_cell = nullptr;
  Parameter<T>* attribute = nullptr;
};

template <typename T>
Var<T> compose_position_embedding(Tape<T>& tape, std::span<const TokenAnnotation> annotations,
                                  const EncoderConfig& config, const PositionTables<T>& tables);

// mean: average of rows whose mask entry is nonzero; cls: row 0.
template <typename T>
Var<T> pool(Var<T> hidden, std::span<const std::uint8_t> mask, Pooling method);

// Pre-norm transformer encoder over one token sequence, pooled to a vector.
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParameterSet<T>& params, std::string prefix, EncoderConfig config,
                     std::mt19937_64& rng);

  const EncoderConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

  // Hidden states after the final layer norm, [len x dim].
  Var<T> hidden(Tape<T>& tape, const TokenizedRow& input, Mode mode, std::mt19937_64& rng) const;
  // Pooled vector [dim]. Increments the call counter.
  Var<T> encode(Tape<T>& tape, const TokenizedRow& input, Mode mode, std::mt19937_64& rng) const;

  // Eval-mode, gradient-free encoding to a plain tensor.
  Tensor<T> encode_value(const TokenizedRow& input) const;

  std::uint64_t calls() const { return calls_->load(); }
  void reset_calls() const { calls_->store(0); }

  // Parameter names and shapes implied by `config` under `prefix`.
  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const std::string& prefix,
                                                                     const EncoderConfig& config);

 private:
  struct Layer {
    Parameter<T>* ln1_gain;
    Parameter<T>* ln1_bias;
    Linear<T> q, k, v, o;
    Parameter<T>* ln2_gain;
    Parameter<T>* ln2_bias;
    Linear<T> ffn_in, ffn_out;
  };

  Var<T> attention(Tape<T>& tape, const Layer& layer, Var<T> x) const;

  EncoderConfig config_;
  std::string prefix_;
  Parameter<T>* token_embedding_ = nullptr;
  PositionTables<T> positions_;
  std::vector<Layer> layers_;
  Parameter<T>* final_gain_ = nullptr;
  Parameter<T>* final_bias_ = nullptr;
  std::unique_ptr<std::atomic<std::uint64_t>> calls_ =
      std::make_unique<std::atomic<std::uint64_t>>(0);
};

}  // namespace rotar
