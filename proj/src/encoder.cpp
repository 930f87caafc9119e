#include "rotar/encoder.hpp"

#include <cmath>

#include "rotar/ops.hpp"

namespace rotar {

void EncoderConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("encoder: dim " + std::to_string(dim) + " must be divisible by heads " +
                      std::to_string(heads));
  }
  if (layers == 0) throw ConfigError("encoder: layers must be >= 1");
  if (ffn_dim == 0) throw ConfigError("encoder: ffn_dim must be >= 1");
  if (max_len < 2) throw ConfigError("encoder: max_len must be >= 2");
  if (vocab_size <= special::kCount) throw ConfigError("encoder: vocab_size must exceed reserved ids");
  if (dropout < 0 || dropout >= 1) throw ConfigError("encoder: dropout must be in [0, 1)");
  if (attribute_buckets == 0) throw ConfigError("encoder: attribute_buckets must be >= 1");
  if (max_cells == 0) throw ConfigError("encoder: max_cells must be >= 1");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"dim", dim},
          {"layers", layers},
          {"heads", heads},
          {"ffn_dim", ffn_dim},
          {"max_len", max_len},
          {"vocab_size", vocab_size},
          {"pe",
           {{"absolute", pe.absolute},
            {"cell_index", pe.cell_index},
            {"intra_cell", pe.intra_cell},
            {"attribute", pe.attribute}}},
          {"pooling", pooling == Pooling::mean ? "mean" : "cls"},
          {"dropout", dropout},
          {"attribute_buckets", attribute_buckets},
          {"max_cells", max_cells}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.dim = j.value("dim", c.dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_len = j.value("max_len", c.max_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    if (j.contains("pe")) {
      const auto& pe = j.at("pe");
      c.pe.absolute = pe.value("absolute", c.pe.absolute);
      c.pe.cell_index = pe.value("cell_index", c.pe.cell_index);
      c.pe.intra_cell = pe.value("intra_cell", c.pe.intra_cell);
      c.pe.attribute = pe.value("attribute", c.pe.attribute);
    }
    const std::string pooling = j.value("pooling", std::string("mean"));
    if (pooling == "mean") {
      c.pooling = Pooling::mean;
    } else if (pooling == "cls") {
      c.pooling = Pooling::cls;
    } else {
      throw ConfigError("encoder: unknown pooling '" + pooling + "'");
    }
    c.dropout = j.value("dropout", c.dropout);
    c.attribute_buckets = j.value("attribute_buckets", c.attribute_buckets);
    c.max_cells = j.value("max_cells", c.max_cells);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  return c;
}

EncoderConfig EncoderConfig::query_defaults() {
  EncoderConfig c;
  c.pe = {true, false, true, false};
  return c;
}

template <typename T>
Var<T> compose_position_embedding(Tape<T>& tape, std::span<const TokenAnnotation> annotations,
                                  const EncoderConfig& config, const PositionTables<T>& tables) {
  const std::size_t len = annotations.size();
  if (len == 0) throw DimensionError("compose_position_embedding: empty sequence");
  std::vector<Var<T>> parts;
  auto lookup = [&](Parameter<T>* table, const char* what, auto index_of) {
    if (!table) throw ConfigError(std::string("position table '") + what + "' is not allocated");
    std::vector<std::size_t> ids(len);
    for (std::size_t i = 0; i < len; ++i) ids[i] = index_of(annotations[i]);
    parts.push_back(ops::embedding(tape.param(*table), std::span<const std::size_t>(ids)));
  };
  // Cell and attribute tables reserve row 0 for non-cell tokens.
  auto shifted = [](int v) -> std::size_t {
    return v == kNoCell ? 0 : static_cast<std::size_t>(v) + 1;
  };
  if (config.pe.absolute) {
    lookup(tables.absolute, "absolute", [](const TokenAnnotation& a) { return a.absolute_index; });
  }
  if (config.pe.cell_index) {
    lookup(tables.cell_index, "cell_index", [&](const TokenAnnotation& a) { return shifted(a.cell_index); });
  }
  if (config.pe.intra_cell) {
    lookup(tables.intra_cell, "intra_cell", [](const TokenAnnotation& a) { return a.intra_cell_index; });
  }
  if (config.pe.attribute) {
    lookup(tables.attribute, "attribute", [&](const TokenAnnotation& a) { return shifted(a.attribute_id); });
  }
  if (parts.empty()) return tape.constant(Tensor<T>({len, config.dim}));
  Var<T> out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = ops::add(out, parts[i]);
  return out;
}

template <typename T>
Var<T> pool(Var<T> hidden, std::span<const std::uint8_t> mask, Pooling method) {
  if (method == Pooling::mean) return ops::masked_mean_rows(hidden, mask);
  if (mask.size() != hidden.value().rows()) {
    throw DimensionError("pool: mask length does not match sequence length");
  }
  bool any = false;
  for (auto m : mask) any |= m != 0;
  if (!any) throw ValueError("pool: every position is masked");
  return ops::select_row(hidden, 0);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> TransformerEncoder<T>::parameter_shapes(
    const std::string& prefix, const EncoderConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t d = c.dim;
  out.push_back({prefix + ".token_embedding", {c.vocab_size, d}});
  if (c.pe.absolute) out.push_back({prefix + ".pos.absolute", {c.max_len, d}});
  if (c.pe.cell_index) out.push_back({prefix + ".pos.cell_index", {c.max_cells + 1, d}});
  if (c.pe.intra_cell) out.push_back({prefix + ".pos.intra_cell", {c.max_len, d}});
  if (c.pe.attribute) out.push_back({prefix + ".pos.attribute", {c.attribute_buckets + 1, d}});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    out.push_back({p + ".ln1.gain", {d}});
    out.push_back({p + ".ln1.bias", {d}});
    for (const char* w : {"q", "k", "v", "o"}) {
      out.push_back({p + ".attn." + w + ".weight", {d, d}});
      out.push_back({p + ".attn." + w + ".bias", {d}});
    }
    out.push_back({p + ".ln2.gain", {d}});
    out.push_back({p + ".ln2.bias", {d}});
    out.push_back({p + ".ffn.in.weight", {d, c.ffn_dim}});
    out.push_back({p + ".ffn.in.bias", {c.ffn_dim}});
    out.push_back({p + ".ffn.out.weight", {c.ffn_dim, d}});
    out.push_back({p + ".ffn.out.bias", {d}});
  }
  out.push_back({prefix + ".final_ln.gain", {d}});
  out.push_back({prefix + ".final_ln.bias", {d}});
  return out;
}

template <typename T>
TransformerEncoder<T>::TransformerEncoder(ParameterSet<T>& params, std::string prefix,
                                          EncoderConfig config, std::mt19937_64& rng)
    : config_(std::move(config)), prefix_(std::move(prefix)) {
  config_.validate();
  const std::size_t d = config_.dim;
  auto table = [&](const std::string& name, std::size_t rows) {
    return &params.add(prefix_ + name, truncated_normal<T>({rows, d}, 0.02, rng));
  };
  auto ones = [&](const std::string& name) { return &params.add(name, Tensor<T>({d}, T{1})); };
  auto zeros = [&](const std::string& name) { return &params.add(name, Tensor<T>({d})); };

  token_embedding_ = table(".token_embedding", config_.vocab_size);
  if (config_.pe.absolute) positions_.absolute = table(".pos.absolute", config_.max_len);
  if (config_.pe.cell_index) positions_.cell_index = table(".pos.cell_index", config_.max_cells + 1);
  if (config_.pe.intra_cell) positions_.intra_cell = table(".pos.intra_cell", config_.max_len);
  if (config_.pe.attribute) positions_.attribute = table(".pos.attribute", config_.attribute_buckets + 1);

  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = prefix_ + ".layer" + std::to_string(l);
    Layer layer;
    layer.ln1_gain = ones(p + ".ln1.gain");
    layer.ln1_bias = zeros(p + ".ln1.bias");
    layer.q = Linear<T>::create(params, p + ".attn.q", d, d, rng);
    layer.k = Linear<T>::create(params, p + ".attn.k", d, d, rng);
    layer.v = Linear<T>::create(params, p + ".attn.v", d, d, rng);
    layer.o = Linear<T>::create(params, p + ".attn.o", d, d, rng);
    layer.ln2_gain = ones(p + ".ln2.gain");
    layer.ln2_bias = zeros(p + ".ln2.bias");
    layer.ffn_in = Linear<T>::create(params, p + ".ffn.in", d, config_.ffn_dim, rng);
    layer.ffn_out = Linear<T>::create(params, p + ".ffn.out", config_.ffn_dim, d, rng);
    layers_.push_back(layer);
  }
  final_gain_ = ones(prefix_ + ".final_ln.gain");
  final_bias_ = zeros(prefix_ + ".final_ln.bias");
}

template <typename T>
Var<T> TransformerEncoder<T>::attention(Tape<T>& tape, const Layer& layer, Var<T> x) const {
  const std::size_t heads = config_.heads;
  const std::size_t head_dim = config_.dim / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(head_dim));
  Var<T> q = layer.q(tape, x);
  Var<T> k = layer.k(tape, x);
  Var<T> v = layer.v(tape, x);
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t start = h * head_dim;
    Var<T> qh = ops::slice_cols(q, start, head_dim);
    Var<T> kh = ops::slice_cols(k, start, head_dim);
    Var<T> vh = ops::slice_cols(v, start, head_dim);
    Var<T> scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), scale);
    outs.push_back(ops::matmul(ops::softmax(scores, 1), vh));
  }
  Var<T> merged = heads == 1 ? outs.front() : ops::concat(outs);
  return layer.o(tape, merged);
}

template <typename T>
Var<T> TransformerEncoder<T>::hidden(Tape<T>& tape, const TokenizedRow& input, Mode mode,
                                     std::mt19937_64& rng) const {
  const std::size_t len = input.size();
  if (len == 0) throw DimensionError("encoder: empty input sequence");
  if (len > config_.max_len) {
    throw DimensionError("encoder: sequence of " + std::to_string(len) + " tokens exceeds max_len " +
                         std::to_string(config_.max_len));
  }
  if (input.annotations.size() != len) {
    throw DimensionError("encoder: annotation count does not match token count");
  }
  for (std::size_t id : input.token_ids) {
    if (id >= config_.vocab_size) {
      throw DimensionError("encoder: token id " + std::to_string(id) + " overflows vocabulary of " +
                           std::to_string(config_.vocab_size));
    }
  }
  const T p = static_cast<T>(config_.dropout);
  Var<T> x = ops::embedding(tape.param(*token_embedding_), std::span<const std::size_t>(input.token_ids));
  x = ops::add(x, compose_position_embedding(tape, std::span<const TokenAnnotation>(input.annotations),
                                             config_, positions_));
  x = ops::dropout(x, p, mode, rng);
  const T eps = static_cast<T>(1e-5);
  for (const Layer& layer : layers_) {
    Var<T> h = ops::layer_norm(x, tape.param(*layer.ln1_gain), tape.param(*layer.ln1_bias), eps);
    x = ops::add(x, ops::dropout(attention(tape, layer, h), p, mode, rng));
    h = ops::layer_norm(x, tape.param(*layer.ln2_gain), tape.param(*layer.ln2_bias), eps);
    Var<T> f = layer.ffn_out(tape, ops::gelu(layer.ffn_in(tape, h)));
    x = ops::add(x, ops::dropout(f, p, mode, rng));
  }
  return ops::layer_norm(x, tape.param(*final_gain_), tape.param(*final_bias_), eps);
}

template <typename T>
Var<T> TransformerEncoder<T>::encode(Tape<T>& tape, const TokenizedRow& input, Mode mode,
                                     std::mt19937_64& rng) const {
  calls_->fetch_add(1, std::memory_order_relaxed);
  Var<T> h = hidden(tape, input, mode, rng);
  // [PAD] positions never contribute to pooling.
  std::vector<std::uint8_t> mask(input.size(), 1);
  for (std::size_t i = 0; i < input.size(); ++i) mask[i] = input.token_ids[i] != special::kPad;
  return pool(h, std::span<const std::uint8_t>(mask), config_.pooling);
}

template <typename T>
Tensor<T> TransformerEncoder<T>::encode_value(const TokenizedRow& input) const {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  std::mt19937_64 unused(0);
  return encode(tape, input, Mode::eval, unused).value();
}

template class TransformerEncoder<float>;
template class TransformerEncoder<double>;
template Var<float> compose_position_embedding<float>(Tape<float>&, std::span<const TokenAnnotation>,
                                                      const EncoderConfig&, const PositionTables<float>&);
template Var<double> compose_position_embedding<double>(Tape<double>&, std::span<const TokenAnnotation>,
                                                        const EncoderConfig&, const PositionTables<double>&);
template Var<float> pool<float>(Var<float>, std::span<const std::uint8_t>, Pooling);
template Var<double> pool<double>(Var<double>, std::span<const std::uint8_t>, Pooling);

}  // namespace rotar
