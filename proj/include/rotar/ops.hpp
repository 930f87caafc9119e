#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rotar/autograd.hpp"

namespace rotar::ops {

// Matrix product of rank-2 operands.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
// Elementwise (Hadamard) product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
// x[..., n] + bias[n], broadcast over leading rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias);
// x[..., n] * v[n], broadcast over leading rows.
template <typename T>
Var<T> mul_broadcast(Var<T> x, Var<T> v);
template <typename T>
Var<T> scale(Var<T> x, T factor);
template <typename T>
Var<T> abs(Var<T> x);

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope);
// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x);

// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis);

// Normalizes over the last dimension, then applies gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);

// Mean negative log-likelihood of `labels` under softmax(logits). Logits are
// [B x C] or a single row [C].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels);
template <typename T>
Var<T> mse(Var<T> a, Var<T> b);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);

// Inverted dropout; the identity in eval mode or when p == 0.
template <typename T>
Var<T> dropout(Var<T> x, T p, Mode mode, std::mt19937_64& rng);

// Gathers rows of `table` [V x D] -> [ids.size() x D].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> ids);

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count);
// Concatenates along the last dimension. All parts share rank and row count.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);
// Stacks rank-1 tensors of equal length into a [N x D] matrix.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows);
template <typename T>
Var<T> select_row(Var<T> x, std::size_t row);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

enum class RowReduce { mean, min, max, logmeanexp };

// Reduces a [N x D] matrix over its rows to a [D] vector. min/max route the
// gradient to the first extremal row.
template <typename T>
Var<T> reduce_rows(Var<T> x, RowReduce kind);

// Mean over the rows whose mask entry is nonzero.
template <typename T>
Var<T> masked_mean_rows(Var<T> x, std::span<const std::uint8_t> mask);

}  // namespace rotar::ops
