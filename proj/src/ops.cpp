#include "rotar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "rotar/kernels.hpp"

namespace rotar::ops {
namespace {

template <typename T>
const Tensor<T>& out_grad(Tape<T>& tape, std::size_t self) {
  return *tape.grad_sink(self);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(a.shape()));
  }
}

template <typename T>
void axpy(std::span<T> dst, std::span<const T> src, T factor = T{1}) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

template <typename T>
T gelu_value(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm<T>({m, n, k, false, false, false}, av.data(), bv.data(), out.data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, n, k](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      // dA += dC * B^T
      kernels::gemm<T>({m, k, n, false, true, true}, g.data(), t.value(ib).data(), ga->data());
    }
    if (Tensor<T>* gb = t.grad_sink(ib)) {
      // dB += A^T * dC
      kernels::gemm<T>({k, n, m, true, false, true}, t.value(ia).data(), g.data(), gb->data());
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank(a, 2, "transpose");
  const Tensor<T>& av = a.value();
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, r, c](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* ga = t.grad_sink(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga->at(i, j) += g.at(j, i);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  axpy<T>(out.data(), b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    if (Tensor<T>* ga = t.grad_sink(ia)) axpy<T>(ga->data(), g.data());
    if (Tensor<T>* gb = t.grad_sink(ib)) axpy<T>(gb->data(), g.data());
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  axpy<T>(out.data(), b.value().data(), T{-1});
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    if (Tensor<T>* ga = t.grad_sink(ia)) axpy<T>(ga->data(), g.data());
    if (Tensor<T>* gb = t.grad_sink(ib)) axpy<T>(gb->data(), g.data(), T{-1});
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      const Tensor<T>& bv = t.value(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor<T>* gb = t.grad_sink(ib)) {
      const Tensor<T>& av = t.value(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  require_rank(bias, 1, "add_bias");
  const Tensor<T>& xv = x.value();
  const std::size_t n = bias.value().dim(0);
  if (xv.cols() != n || xv.rank() > 2) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match input " + shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r) axpy<T>(out.row(r), bv.data());
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    if (Tensor<T>* gx = t.grad_sink(ix)) axpy<T>(gx->data(), g.data());
    if (Tensor<T>* gb = t.grad_sink(ib)) {
      for (std::size_t r = 0; r < g.rows(); ++r) axpy<T>(gb->data(), g.row(r));
    }
  });
}

template <typename T>
Var<T> mul_broadcast(Var<T> x, Var<T> v) {
  require_rank(v, 1, "mul_broadcast");
  const Tensor<T>& xv = x.value();
  const std::size_t n = v.value().dim(0);
  if (xv.cols() != n || xv.rank() > 2) {
    throw DimensionError("mul_broadcast: vector " + shape_string(v.shape()) +
                         " does not match input " + shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const Tensor<T>& vv = v.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= vv[c];
  const std::size_t ix = x.id(), iv = v.id();
  return x.tape().record(std::move(out), {ix, iv}, [ix, iv, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    const std::size_t rows = g.numel() / n;
    if (Tensor<T>* gx = t.grad_sink(ix)) {
      const Tensor<T>& vv = t.value(iv);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) (*gx)[r * n + c] += g[r * n + c] * vv[c];
    }
    if (Tensor<T>* gv = t.grad_sink(iv)) {
      const Tensor<T>& xv = t.value(ix);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) (*gv)[c] += g[r * n + c] * xv[r * n + c];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, factor](Tape<T>& t, std::size_t self) {
    axpy<T>(t.grad_sink(ix)->data(), out_grad(t, self).data(), factor);
  });
}

template <typename T>
Var<T> abs(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = std::abs(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    const Tensor<T>& xv = t.value(ix);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T s = xv[i] > T{0} ? T{1} : (xv[i] < T{0} ? T{-1} : T{0});
      (*gx)[i] += s * g[i];
    }
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  if (slope < T{0}) throw ValueError("leaky_relu: slope must be >= 0");
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v >= T{0} ? v : slope * v;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, slope](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    const Tensor<T>& xv = t.value(ix);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += (xv[i] >= T{0} ? T{1} : slope) * g[i];
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = gelu_value(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    const Tensor<T>& xv = t.value(ix);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += gelu_grad(xv[i]) * g[i];
  });
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  const std::size_t len = shape[axis];

  Tensor<T> out = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, out[base + i * inner]);
      T total{0};
      for (std::size_t i = 0; i < len; ++i) {
        T& v = out[base + i * inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, outer, inner, len](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot{0};
        for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t p = base + i * inner;
          (*gx)[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.cols();
  if (xv.rank() > 2 || gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) +
                         " must match last dimension of " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  // Normalized input and per-row inverse std are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<T>>(xv.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    T mu{0};
    for (T v : in) mu += v;
    mu /= static_cast<T>(n);
    T var{0};
    for (T v : in) var += (v - mu) * (v - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (in[c] - mu) * is;
      (*xhat)[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, n, xhat, inv_std](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = out_grad(t, self);
        const Tensor<T>& gv = t.value(ig);
        if (Tensor<T>* gg = t.grad_sink(ig)) {
          for (std::size_t i = 0; i < g.numel(); ++i) (*gg)[i % n] += g[i] * (*xhat)[i];
        }
        if (Tensor<T>* gb = t.grad_sink(ib)) {
          for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i % n] += g[i];
        }
        if (Tensor<T>* gx = t.grad_sink(ix)) {
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{0}, mean_dh{0};
            for (std::size_t c = 0; c < n; ++c) {
              const T d = g[r * n + c] * gv[c];
              mean_d += d;
              mean_dh += d * (*xhat)[r * n + c];
            }
            mean_d /= static_cast<T>(n);
            mean_dh /= static_cast<T>(n);
            for (std::size_t c = 0; c < n; ++c) {
              const T d = g[r * n + c] * gv[c];
              (*gx)[r * n + c] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * n + c] * mean_dh);
            }
          }
        }
      });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  const Tensor<T>& lv = logits.value();
  if (lv.rank() > 2) throw DimensionError("cross_entropy: logits must be rank 1 or 2");
  const std::size_t batch = lv.rows(), classes = lv.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  auto probs = std::make_shared<std::vector<T>>(lv.numel());
  T loss{0};
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ValueError("cross_entropy: label " + std::to_string(labels[b]) +
                       " out of range for " + std::to_string(classes) + " classes");
    }
    auto row = lv.row(b);
    T mx = *std::max_element(row.begin(), row.end());
    T total{0};
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T log_total = std::log(total) + mx;
    for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - log_total);
    loss += log_total - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<T>({1}, {loss}), {il},
      [il, probs, lab = std::move(lab), batch, classes](Tape<T>& t, std::size_t self) {
        const T g = out_grad(t, self)[0] / static_cast<T>(batch);
        Tensor<T>* gl = t.grad_sink(il);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T onehot = c == lab[b] ? T{1} : T{0};
            (*gl)[b * classes + c] += g * ((*probs)[b * classes + c] - onehot);
          }
        }
      });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mse");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  T total{0};
  for (std::size_t i = 0; i < av.numel(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T count = static_cast<T>(av.numel());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Tensor<T>({1}, {total / count}), {ia, ib},
                         [ia, ib, count](Tape<T>& t, std::size_t self) {
                           const T g = out_grad(t, self)[0] * T{2} / count;
                           const Tensor<T>& av = t.value(ia);
                           const Tensor<T>& bv = t.value(ib);
                           Tensor<T>* ga = t.grad_sink(ia);
                           Tensor<T>* gb = t.grad_sink(ib);
                           for (std::size_t i = 0; i < av.numel(); ++i) {
                             const T d = g * (av[i] - bv[i]);
                             if (ga) (*ga)[i] += d;
                             if (gb) (*gb)[i] -= d;
                           }
                         });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>({1}, {total}), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const T g = out_grad(t, self)[0];
    for (T& v : t.grad_sink(ix)->data()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> dropout(Var<T> x, T p, Mode mode, std::mt19937_64& rng) {
  if (p < T{0} || p >= T{1}) throw ValueError("dropout: p must be in [0, 1)");
  if (mode == Mode::eval || p == T{0}) return x;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const T keep_scale = T{1} / (T{1} - p);
  auto mask = std::make_shared<std::vector<T>>(x.value().numel());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    (*mask)[i] = uniform(rng) >= static_cast<double>(p) ? keep_scale : T{0};
    out[i] *= (*mask)[i];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, mask](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += (*mask)[i] * g[i];
  });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "embedding");
  const Tensor<T>& tv = table.value();
  const std::size_t vocab = tv.dim(0), dim = tv.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor<T> out({ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw DimensionError("embedding: index " + std::to_string(ids[r]) +
                           " out of range for table with " + std::to_string(vocab) + " rows");
    }
    auto src = tv.row(ids[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {it}, [it, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* gt = t.grad_sink(it);
    for (std::size_t r = 0; r < idx.size(); ++r) axpy<T>(gt->row(idx[r]), g.row(r));
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() > 2 || count == 0 || start + count > xv.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Shape shape = xv.shape();
  shape.back() = count;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r * cols + start + c];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, rows, cols, start, count](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) (*gx)[r * cols + start + c] += g[r * count + c];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Tensor<T>& first = parts.front().value();
  const std::size_t rank = first.rank(), rows = first.rows();
  if (rank > 2) throw DimensionError("concat: rank must be 1 or 2");
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    if (p.value().rank() != rank || p.value().rows() != rows) {
      throw DimensionError("concat: incompatible shapes " + shape_string(first.shape()) + " and " +
                           shape_string(p.shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor<T> out(rank == 1 ? Shape{total} : Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[p]; ++c) out[r * total + offset + c] = v[r * widths[p] + c];
    offset += widths[p];
  }
  return parts.front().tape().record(
      std::move(out), ids, [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = out_grad(t, self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (Tensor<T>* gp = t.grad_sink(ids[p])) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[p]; ++c)
                (*gp)[r * widths[p] + c] += g[r * total + offset + c];
          }
          offset += widths[p];
        }
      });
}

template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t dim = rows.front().value().numel();
  std::vector<std::size_t> ids;
  Tensor<T> out({rows.size(), dim});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor<T>& v = rows[r].value();
    if (v.rank() != 1 || v.numel() != dim) {
      throw DimensionError("stack_rows: row " + std::to_string(r) + " has shape " +
                           shape_string(v.shape()) + ", expected [" + std::to_string(dim) + "]");
    }
    std::copy(v.data().begin(), v.data().end(), out.row(r).begin());
    ids.push_back(rows[r].id());
  }
  return rows.front().tape().record(std::move(out), ids, [ids](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    for (std::size_t r = 0; r < ids.size(); ++r)
      if (Tensor<T>* gr = t.grad_sink(ids[r])) axpy<T>(gr->data(), g.row(r));
  });
}

template <typename T>
Var<T> select_row(Var<T> x, std::size_t row) {
  require_rank(x, 2, "select_row");
  const Tensor<T>& xv = x.value();
  if (row >= xv.dim(0)) {
    throw DimensionError("select_row: row " + std::to_string(row) + " out of range for " +
                         shape_string(xv.shape()));
  }
  auto src = xv.row(row);
  Tensor<T> out({xv.cols()}, std::vector<T>(src.begin(), src.end()));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, row](Tape<T>& t, std::size_t self) {
    axpy<T>(t.grad_sink(ix)->row(row), out_grad(t, self).data());
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    axpy<T>(t.grad_sink(ix)->data(), out_grad(t, self).data());
  });
}

template <typename T>
Var<T> reduce_rows(Var<T> x, RowReduce kind) {
  require_rank(x, 2, "reduce_rows");
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out({d});
  // For min/max: index of the winning row per column. For logmeanexp: the
  // softmax weights over rows per column.
  auto aux_idx = std::make_shared<std::vector<std::size_t>>();
  auto aux_w = std::make_shared<std::vector<T>>();
  switch (kind) {
    case RowReduce::mean:
      for (std::size_t r = 0; r < n; ++r) axpy<T>(out.data(), xv.row(r));
      for (T& v : out.data()) v /= static_cast<T>(n);
      break;
    case RowReduce::min:
    case RowReduce::max: {
      aux_idx->assign(d, 0);
      const bool want_max = kind == RowReduce::max;
      for (std::size_t c = 0; c < d; ++c) {
        std::size_t best = 0;
        for (std::size_t r = 1; r < n; ++r) {
          const T v = xv.at(r, c), b = xv.at(best, c);
          if (want_max ? v > b : v < b) best = r;
        }
        (*aux_idx)[c] = best;
        out[c] = xv.at(best, c);
      }
      break;
    }
    case RowReduce::logmeanexp: {
      aux_w->assign(n * d, T{0});
      for (std::size_t c = 0; c < d; ++c) {
        T mx = xv.at(0, c);
        for (std::size_t r = 1; r < n; ++r) mx = std::max(mx, xv.at(r, c));
        T total{0};
        for (std::size_t r = 0; r < n; ++r) {
          const T e = std::exp(xv.at(r, c) - mx);
          (*aux_w)[r * d + c] = e;
          total += e;
        }
        for (std::size_t r = 0; r < n; ++r) (*aux_w)[r * d + c] /= total;
        out[c] = mx + std::log(total / static_cast<T>(n));
      }
      break;
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, kind, n, d, aux_idx, aux_w](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* gx = t.grad_sink(ix);
    switch (kind) {
      case RowReduce::mean:
        for (std::size_t r = 0; r < n; ++r) axpy<T>(gx->row(r), g.data(), T{1} / static_cast<T>(n));
        break;
      case RowReduce::min:
      case RowReduce::max:
        for (std::size_t c = 0; c < d; ++c) gx->at((*aux_idx)[c], c) += g[c];
        break;
      case RowReduce::logmeanexp:
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gx->at(r, c) += (*aux_w)[r * d + c] * g[c];
        break;
    }
  });
}

template <typename T>
Var<T> masked_mean_rows(Var<T> x, std::span<const std::uint8_t> mask) {
  require_rank(x, 2, "masked_mean_rows");
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (mask.size() != n) {
    throw DimensionError("masked_mean_rows: mask length " + std::to_string(mask.size()) +
                         " for " + std::to_string(n) + " rows");
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const auto count = static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
  if (count == 0) throw ValueError("masked_mean_rows: every position is masked");
  Tensor<T> out({d});
  for (std::size_t r = 0; r < n; ++r)
    if (m[r]) axpy<T>(out.data(), xv.row(r));
  for (T& v : out.data()) v /= static_cast<T>(count);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, m = std::move(m), count](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = out_grad(t, self);
    Tensor<T>* gx = t.grad_sink(ix);
    for (std::size_t r = 0; r < m.size(); ++r)
      if (m[r]) axpy<T>(gx->row(r), g.data(), T{1} / static_cast<T>(count));
  });
}

#define ROTAR_INSTANTIATE_OPS(T)                                                   \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                       \
  template Var<T> transpose<T>(Var<T>);                                            \
  template Var<T> add<T>(Var<T>, Var<T>);                                          \
  template Var<T> sub<T>(Var<T>, Var<T>);                                          \
  template Var<T> mul<T>(Var<T>, Var<T>);                                          \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                     \
  template Var<T> mul_broadcast<T>(Var<T>, Var<T>);                               \
  template Var<T> scale<T>(Var<T>, T);                                             \
  template Var<T> abs<T>(Var<T>);                                                  \
  template Var<T> leaky_relu<T>(Var<T>, T);                                        \
  template Var<T> gelu<T>(Var<T>);                                                 \
  template Var<T> softmax<T>(Var<T>, std::size_t);                                 \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                        \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const std::size_t>);          \
  template Var<T> mse<T>(Var<T>, Var<T>);                                          \
  template Var<T> sum<T>(Var<T>);                                                  \
  template Var<T> mean<T>(Var<T>);                                                 \
  template Var<T> dropout<T>(Var<T>, T, Mode, std::mt19937_64&);                   \
  template Var<T> embedding<T>(Var<T>, std::span<const std::size_t>);              \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                \
  template Var<T> concat<T>(const std::vector<Var<T>>&);                           \
  template Var<T> stack_rows<T>(const std::vector<Var<T>>&);                       \
  template Var<T> select_row<T>(Var<T>, std::size_t);                              \
  template Var<T> reshape<T>(Var<T>, Shape);                                       \
  template Var<T> reduce_rows<T>(Var<T>, RowReduce);                               \
  template Var<T> masked_mean_rows<T>(Var<T>, std::span<const std::uint8_t>);

ROTAR_INSTANTIATE_OPS(float)
ROTAR_INSTANTIATE_OPS(double)

}  // namespace rotar::ops
