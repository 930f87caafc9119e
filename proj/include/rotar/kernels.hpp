#pragma once

#include <cstddef>
#include <span>

namespace rotar::kernels {

// C (m x n) [+]= op(A) * op(B), where op(A) is m x k and op(B) is k x n.
// Storage is row-major; a transposed operand is read from its untransposed
// layout (A stored k x m when trans_a, B stored n x k when trans_b).
struct GemmArgs {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;
};

// Naive triple loop. Kept as the reference the parallel kernel is tested
// against; never used on a hot path.
template <typename T>
void gemm_reference(const GemmArgs& args, std::span<const T> a, std::span<const T> b,
                    std::span<T> c);

// Cache-friendly single-threaded kernel.
template <typename T>
void gemm_serial(const GemmArgs& args, std::span<const T> a, std::span<const T> b,
                 std::span<T> c);

// OpenMP kernel, parallel over output rows. Every output element is reduced
// in the same order as gemm_serial, so results are bitwise identical to it.
template <typename T>
void gemm_parallel(const GemmArgs& args, std::span<const T> a, std::span<const T> b,
                   std::span<T> c);

// Picks gemm_parallel above a work threshold, gemm_serial otherwise.
template <typename T>
void gemm(const GemmArgs& args, std::span<const T> a, std::span<const T> b,
          std::span<T> c);

// Work (m*n*k) above which gemm() goes parallel.
inline constexpr std::size_t kParallelGemmWork = std::size_t{1} << 18;

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace rotar::kernels
