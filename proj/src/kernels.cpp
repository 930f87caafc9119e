#include "rotar/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rotar::kernels {
namespace {

template <typename T>
inline T load_a(const GemmArgs& g, std::span<const T> a, std::size_t i, std::size_t p) {
  return g.trans_a ? a[p * g.m + i] : a[i * g.k + p];
}

template <typename T>
inline T load_b(const GemmArgs& g, std::span<const T> b, std::size_t p, std::size_t j) {
  return g.trans_b ? b[j * g.k + p] : b[p * g.n + j];
}

// Row-major views of op(A) as m x k and op(B) as k x n. Transposed operands
// are copied once per call so the inner loop is always unit-stride.
template <typename T>
struct Packed {
  std::vector<T> a_buf, b_buf;
  const T* a = nullptr;
  const T* b = nullptr;

  Packed(const GemmArgs& g, std::span<const T> a_in, std::span<const T> b_in) {
    a = a_in.data();
    b = b_in.data();
    if (g.trans_a) {
      a_buf.resize(g.m * g.k);
      for (std::size_t p = 0; p < g.k; ++p)
        for (std::size_t i = 0; i < g.m; ++i) a_buf[i * g.k + p] = a_in[p * g.m + i];
      a = a_buf.data();
    }
    if (g.trans_b) {
      b_buf.resize(g.k * g.n);
      for (std::size_t j = 0; j < g.n; ++j)
        for (std::size_t p = 0; p < g.k; ++p) b_buf[p * g.n + j] = b_in[j * g.k + p];
      b = b_buf.data();
    }
  }
};

// Computes output row i. Both serial and parallel drivers call this, which
// pins the summation order.
template <typename T>
void gemm_row(const GemmArgs& g, const Packed<T>& pk, std::span<T> c, std::size_t i,
              std::vector<T>& scratch) {
  T* crow = c.data() + i * g.n;
  T* out = crow;
  if (g.accumulate) {
    scratch.assign(g.n, T{0});
    out = scratch.data();
  } else {
    std::fill(crow, crow + g.n, T{0});
  }
  const T* arow = pk.a + i * g.k;
  for (std::size_t p = 0; p < g.k; ++p) {
    const T av = arow[p];
    const T* brow = pk.b + p * g.n;
    for (std::size_t j = 0; j < g.n; ++j) out[j] += av * brow[j];
  }
  if (g.accumulate) {
    for (std::size_t j = 0; j < g.n; ++j) crow[j] += out[j];
  }
}

}  // namespace

template <typename T>
void gemm_reference(const GemmArgs& g, std::span<const T> a, std::span<const T> b,
                    std::span<T> c) {
  for (std::size_t i = 0; i < g.m; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < g.k; ++p) acc += load_a(g, a, i, p) * load_b(g, b, p, j);
      c[i * g.n + j] = g.accumulate ? c[i * g.n + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_serial(const GemmArgs& g, std::span<const T> a, std::span<const T> b,
                 std::span<T> c) {
  const Packed<T> pk(g, a, b);
  std::vector<T> scratch;
  for (std::size_t i = 0; i < g.m; ++i) gemm_row(g, pk, c, i, scratch);
}

template <typename T>
void gemm_parallel(const GemmArgs& g, std::span<const T> a, std::span<const T> b,
                   std::span<T> c) {
  const auto m = static_cast<long long>(g.m);
  const Packed<T> pk(g, a, b);
#pragma omp parallel
  {
    std::vector<T> scratch;
#pragma omp for schedule(static)
    for (long long i = 0; i < m; ++i) gemm_row(g, pk, c, static_cast<std::size_t>(i), scratch);
  }
}

template <typename T>
void gemm(const GemmArgs& g, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  if (g.m > 1 && g.m * g.n * g.k >= kParallelGemmWork && max_threads() > 1) {
    gemm_parallel(g, a, b, c);
  } else {
    gemm_serial(g, a, b, c);
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define ROTAR_INSTANTIATE_GEMM(T)                                                          \
  template void gemm_reference<T>(const GemmArgs&, std::span<const T>, std::span<const T>, \
                                  std::span<T>);                                          \
  template void gemm_serial<T>(const GemmArgs&, std::span<const T>, std::span<const T>,    \
                               std::span<T>);                                             \
  template void gemm_parallel<T>(const GemmArgs&, std::span<const T>, std::span<const T>,  \
                                 std::span<T>);                                           \
  template void gemm<T>(const GemmArgs&, std::span<const T>, std::span<const T>, std::span<T>);

ROTAR_INSTANTIATE_GEMM(float)
ROTAR_INSTANTIATE_GEMM(double)

}  // namespace rotar::kernels
