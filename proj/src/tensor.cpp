#include "rotar/tensor.hpp"

#include <atomic>
#include <cmath>

namespace rotar {
namespace {
std::atomic<bool> g_debug_checks{false};
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled); }
bool debug_checks_enabled() { return g_debug_checks.load(std::memory_order_relaxed); }

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(std::string("non-finite value in output of ") + where + " at flat index " +
                         std::to_string(i));
    }
  }
}

template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace rotar
