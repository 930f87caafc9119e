#include "rotar/aggregation.hpp"

#include "rotar/ops.hpp"

namespace rotar {

namespace {

template <typename E>
struct Named {
  E value;
  const char* name;
};

constexpr Named<Phi> kPhiNames[] = {{Phi::hadamard, "hadamard"},
                                    {Phi::mlp_concat, "mlp_concat"},
                                    {Phi::mlp_rich, "mlp_rich"},
                                    {Phi::ngram_weighted, "ngram_weighted"},
                                    {Phi::ngram_threshold, "ngram_threshold"}};
constexpr Named<Rho> kRhoNames[] = {{Rho::mean, "mean"},
                                    {Rho::min, "min"},
                                    {Rho::max, "max"},
                                    {Rho::logmeanexp, "logmeanexp"},
                                    {Rho::multihead, "multihead"}};

std::size_t mlp_input_width(Phi phi, std::size_t dim) {
  return phi == Phi::mlp_rich ? 4 * dim : 2 * dim;
}

bool uses_mlp(Phi phi) { return phi == Phi::mlp_concat || phi == Phi::mlp_rich; }

}  // namespace

std::string to_string(Phi phi) {
  for (const auto& n : kPhiNames)
    if (n.value == phi) return n.name;
  return "unknown";
}

std::string to_string(Rho rho) {
  for (const auto& n : kRhoNames)
    if (n.value == rho) return n.name;
  return "unknown";
}

Phi parse_phi(const std::string& name) {
  for (const auto& n : kPhiNames)
    if (name == n.name) return n.value;
  throw ConfigError("unknown phi '" + name + "'");
}

Rho parse_rho(const std::string& name) {
  for (const auto& n : kRhoNames)
    if (name == n.name) return n.value;
  throw ConfigError("unknown rho '" + name + "'");
}

void AggregationSpec::validate() const {
  if (ngram_order < 1) throw ConfigError("aggregation: ngram_order must be >= 1");
  if (threshold < 0 || threshold > 1) throw ConfigError("aggregation: threshold must lie in [0, 1]");
  if (heads < 1) throw ConfigError("aggregation: heads must be >= 1");
}

nlohmann::json AggregationSpec::to_json() const {
  return {{"phi", to_string(phi)},
          {"rho", to_string(rho)},
          {"ngram_order", ngram_order},
          {"ngram_unit", ngram_unit == NgramUnit::word ? "word" : "char"},
          {"threshold", threshold},
          {"heads", heads},
          {"empty_fallback", empty_fallback == EmptyFallback::zero_vector ? "zero" : "unfiltered_mean"}};
}

AggregationSpec AggregationSpec::from_json(const nlohmann::json& j) {
  AggregationSpec s;
  try {
    s.phi = parse_phi(j.value("phi", to_string(s.phi)));
    s.rho = parse_rho(j.value("rho", to_string(s.rho)));
    s.ngram_order = j.value("ngram_order", s.ngram_order);
    const std::string unit = j.value("ngram_unit", std::string("word"));
    if (unit == "word") {
      s.ngram_unit = NgramUnit::word;
    } else if (unit == "char") {
      s.ngram_unit = NgramUnit::character;
    } else {
      throw ConfigError("aggregation: unknown ngram_unit '" + unit + "'");
    }
    s.threshold = j.value("threshold", s.threshold);
    s.heads = j.value("heads", s.heads);
    const std::string fb = j.value("empty_fallback", std::string("zero"));
    if (fb == "zero") {
      s.empty_fallback = EmptyFallback::zero_vector;
    } else if (fb == "unfiltered_mean") {
      s.empty_fallback = EmptyFallback::unfiltered_mean;
    } else {
      throw ConfigError("aggregation: unknown empty_fallback '" + fb + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("aggregation config: ") + e.what());
  }
  s.validate();
  return s;
}

template <typename T>
Aggregator<T>::Aggregator(ParameterSet<T>& params, const std::string& prefix, AggregationSpec spec,
                          std::size_t dim, std::mt19937_64& rng)
    : spec_(spec), dim_(dim) {
  spec_.validate();
  if (uses_mlp(spec_.phi)) {
    const std::size_t width = mlp_input_width(spec_.phi, dim);
    mlp_in_ = Linear<T>::create(params, prefix + ".phi.in", width, dim, rng, fan_in_std(width));
    mlp_out_ = Linear<T>::create(params, prefix + ".phi.out", dim, dim, rng, fan_in_std(dim));
  }
  if (spec_.rho == Rho::multihead) {
    Tensor<T> theta = truncated_normal<T>({spec_.heads, dim}, 0.02, rng);
    for (T& v : theta.data()) v += T{1};
    theta_ = &params.add(prefix + ".rho.theta", std::move(theta));
    projection_ = &params.add(prefix + ".rho.projection",
                              truncated_normal<T>({spec_.heads * dim, dim}, 0.02, rng));
  }
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Aggregator<T>::parameter_shapes(
    const std::string& prefix, const AggregationSpec& spec, std::size_t dim) {
  std::vector<std::pair<std::string, Shape>> out;
  if (uses_mlp(spec.phi)) {
    out.push_back({prefix + ".phi.in.weight", {mlp_input_width(spec.phi, dim), dim}});
    out.push_back({prefix + ".phi.in.bias", {dim}});
    out.push_back({prefix + ".phi.out.weight", {dim, dim}});
    out.push_back({prefix + ".phi.out.bias", {dim}});
  }
  if (spec.rho == Rho::multihead) {
    out.push_back({prefix + ".rho.theta", {spec.heads, dim}});
    out.push_back({prefix + ".rho.projection", {spec.heads * dim, dim}});
  }
  return out;
}

template <typename T>
std::optional<Var<T>> Aggregator<T>::apply_phi(Tape<T>& tape, Var<T> row_vector, Var<T> query_vector,
                                               std::string_view row_text,
                                               std::string_view query_text) const {
  double similarity = 0.0;
  if (spec_.uses_text()) {
    similarity = ngram_similarity(row_text, query_text, spec_.ngram_order, spec_.ngram_unit);
  }
  return apply_phi_scored(tape, row_vector, query_vector, similarity);
}

template <typename T>
std::optional<Var<T>> Aggregator<T>::apply_phi_scored(Tape<T>& tape, Var<T> v, Var<T> q,
                                                      double similarity) const {
  const bool needs_query = spec_.phi == Phi::hadamard || uses_mlp(spec_.phi);
  if (needs_query && v.shape() != q.shape()) {
    throw DimensionError("apply_phi: row vector " + shape_string(v.shape()) +
                         " and query vector " + shape_string(q.shape()) + " differ");
  }
  switch (spec_.phi) {
    case Phi::hadamard:
      return ops::mul(v, q);
    case Phi::mlp_concat:
    case Phi::mlp_rich: {
      std::vector<Var<T>> parts{v, q};
      if (spec_.phi == Phi::mlp_rich) {
        parts.push_back(ops::abs(ops::sub(v, q)));
        parts.push_back(ops::mul(v, q));
      }
      Var<T> h = ops::leaky_relu(mlp_in_(tape, ops::concat(parts)), static_cast<T>(kLeakySlope));
      return mlp_out_(tape, h);
    }
    case Phi::ngram_weighted:
      return ops::scale(v, static_cast<T>(similarity));
    case Phi::ngram_threshold:
      if (similarity > spec_.threshold) return v;
      return std::nullopt;
  }
  throw ConfigError("apply_phi: unhandled phi");
}

template <typename T>
Var<T> Aggregator<T>::apply_rho(Tape<T>& tape, const std::vector<Var<T>>& features) const {
  if (features.empty()) throw ValueError("apply_rho: empty feature set");
  return reduce(tape, ops::stack_rows(features));
}

template <typename T>
Var<T> Aggregator<T>::reduce(Tape<T>& tape, Var<T> stacked) const {
  switch (spec_.rho) {
    case Rho::mean:
      return ops::reduce_rows(stacked, ops::RowReduce::mean);
    case Rho::min:
      return ops::reduce_rows(stacked, ops::RowReduce::min);
    case Rho::max:
      return ops::reduce_rows(stacked, ops::RowReduce::max);
    case Rho::logmeanexp:
      return ops::reduce_rows(stacked, ops::RowReduce::logmeanexp);
    case Rho::multihead: {
      const std::size_t d = stacked.value().dim(1);
      if (d != theta_->value.dim(1)) {
        throw DimensionError("apply_rho: feature dim " + std::to_string(d) +
                             " does not match multihead parameters");
      }
      Var<T> theta = tape.param(*theta_);
      std::vector<Var<T>> heads;
      for (std::size_t l = 0; l < spec_.heads; ++l) {
        Var<T> scaled = ops::mul_broadcast(stacked, ops::select_row(theta, l));
        heads.push_back(ops::reduce_rows(ops::leaky_relu(scaled, static_cast<T>(kLeakySlope)),
                                         ops::RowReduce::mean));
      }
      Var<T> joined = ops::reshape(ops::concat(heads), {1, spec_.heads * d});
      return ops::reshape(ops::matmul(joined, tape.param(*projection_)), {d});
    }
  }
  throw ConfigError("apply_rho: unhandled rho");
}

template <typename T>
Var<T> Aggregator<T>::table_representation(Tape<T>& tape, const std::vector<Var<T>>& row_vectors,
                                           std::span<const std::string> row_texts,
                                           Var<T> query_vector, std::string_view query_text) const {
  if (row_vectors.empty()) throw ValueError("table_representation: table has no rows");
  const std::size_t n = row_vectors.size();
  const bool text = spec_.uses_text();
  if (text && row_texts.size() != n) {
    throw DimensionError("table_representation: " + std::to_string(row_texts.size()) +
                         " row texts for " + std::to_string(n) + " rows");
  }
  std::vector<double> similarity(n, 0.0);
  if (text) similarity = ngram_similarities(query_text, row_texts, spec_.ngram_order, spec_.ngram_unit);
  for (const auto& v : row_vectors) {
    if (v.shape() != query_vector.shape()) {
      throw DimensionError("table_representation: row vector " + shape_string(v.shape()) +
                           " and query vector " + shape_string(query_vector.shape()) + " differ");
    }
  }

  // Every phi except thresholding maps the stacked [N x D] rows in one pass;
  // each output row equals apply_phi on that row alone.
  if (spec_.phi == Phi::ngram_threshold) {
    std::vector<Var<T>> kept;
    for (std::size_t i = 0; i < n; ++i) {
      if (similarity[i] > spec_.threshold) kept.push_back(row_vectors[i]);
    }
    if (!kept.empty()) return reduce(tape, ops::stack_rows(kept));
    if (spec_.empty_fallback == EmptyFallback::unfiltered_mean) {
      return ops::reduce_rows(ops::stack_rows(row_vectors), ops::RowReduce::mean);
    }
    return tape.constant(Tensor<T>(query_vector.shape()));
  }

  Var<T> x = ops::stack_rows(row_vectors);
  Var<T> features;
  switch (spec_.phi) {
    case Phi::hadamard:
      features = ops::mul_broadcast(x, query_vector);
      break;
    case Phi::mlp_concat:
    case Phi::mlp_rich: {
      Var<T> q = ops::stack_rows(std::vector<Var<T>>(n, query_vector));
      std::vector<Var<T>> parts{x, q};
      if (spec_.phi == Phi::mlp_rich) {
        parts.push_back(ops::abs(ops::sub(x, q)));
        parts.push_back(ops::mul(x, q));
      }
      Var<T> h = ops::leaky_relu(mlp_in_(tape, ops::concat(parts)), static_cast<T>(kLeakySlope));
      features = mlp_out_(tape, h);
      break;
    }
    case Phi::ngram_weighted: {
      const std::size_t d = query_vector.value().numel();
      Tensor<T> weights({n, d});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) weights.at(i, k) = static_cast<T>(similarity[i]);
      }
      features = ops::mul(x, tape.constant(std::move(weights)));
      break;
    }
    case Phi::ngram_threshold:
      break;
  }
  return reduce(tape, features);
}

nlohmann::json HeadConfig::to_json() const { return {{"head_dim", head_dim}, {"dropout", dropout}}; }

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.head_dim = j.value("head_dim", c.head_dim);
  c.dropout = j.value("dropout", c.dropout);
  if (c.head_dim == 0) throw ConfigError("head: head_dim must be >= 1");
  if (c.dropout < 0 || c.dropout >= 1) throw ConfigError("head: dropout must be in [0, 1)");
  return c;
}

template <typename T>
HeadStack<T>::HeadStack(ParameterSet<T>& params, const std::string& prefix, std::size_t input_dim,
                        HeadConfig config, std::mt19937_64& rng)
    : input_dim_(input_dim), config_(config) {
  const std::size_t h = config_.head_dim;
  transform1_ = Linear<T>::create(params, prefix + ".transform.l1", input_dim, input_dim, rng, fan_in_std(input_dim));
  transform2_ = Linear<T>::create(params, prefix + ".transform.l2", input_dim, h, rng, fan_in_std(input_dim));
  classify1_ = Linear<T>::create(params, prefix + ".classifier.l1", h, h, rng, fan_in_std(h));
  classify2_ = Linear<T>::create(params, prefix + ".classifier.l2", h, h, rng, fan_in_std(h));
  classify3_ = Linear<T>::create(params, prefix + ".classifier.l3", h, 2, rng, fan_in_std(h));
}

template <typename T>
std::vector<std::pair<std::string, Shape>> HeadStack<T>::parameter_shapes(const std::string& prefix,
                                                                          std::size_t in,
                                                                          const HeadConfig& c) {
  const std::size_t h = c.head_dim;
  std::vector<std::pair<std::string, Shape>> out;
  auto lin = [&](const std::string& name, std::size_t i, std::size_t o) {
    out.push_back({prefix + name + ".weight", {i, o}});
    out.push_back({prefix + name + ".bias", {o}});
  };
  lin(".transform.l1", in, in);
  lin(".transform.l2", in, h);
  lin(".classifier.l1", h, h);
  lin(".classifier.l2", h, h);
  lin(".classifier.l3", h, 2);
  return out;
}

template <typename T>
Var<T> HeadStack<T>::transform(Tape<T>& tape, Var<T> feature, Mode mode, std::mt19937_64& rng) const {
  if (feature.value().numel() != input_dim_ || feature.value().rank() != 1) {
    throw DimensionError("head: feature " + shape_string(feature.shape()) + " does not match input dim " +
                         std::to_string(input_dim_));
  }
  const T slope = static_cast<T>(kLeakySlope);
  const T p = static_cast<T>(config_.dropout);
  Var<T> h = ops::dropout(ops::leaky_relu(transform1_(tape, feature), slope), p, mode, rng);
  return transform2_(tape, h);
}

template <typename T>
Var<T> HeadStack<T>::classify(Tape<T>& tape, Var<T> x, Mode mode, std::mt19937_64& rng) const {
  const T slope = static_cast<T>(kLeakySlope);
  const T p = static_cast<T>(config_.dropout);
  Var<T> h = ops::dropout(ops::leaky_relu(classify1_(tape, x), slope), p, mode, rng);
  h = ops::dropout(ops::leaky_relu(classify2_(tape, h), slope), p, mode, rng);
  return classify3_(tape, h);
}

template <typename T>
Var<T> HeadStack<T>::forward(Tape<T>& tape, Var<T> feature, Mode mode, std::mt19937_64& rng) const {
  return classify(tape, transform(tape, feature, mode, rng), mode, rng);
}

template class Aggregator<float>;
template class Aggregator<double>;
template class HeadStack<float>;
template class HeadStack<double>;

}  // namespace rotar
