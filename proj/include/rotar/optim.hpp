#pragma once

#include <cstdint>
#include <vector>

#include "rotar/autograd.hpp"

namespace rotar {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;

  void validate() const;
};

// AdamW with bias correction and decoupled weight decay:
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig config);

  // Applies one update using each parameter's grad buffer. `lr` overrides
  // config.lr for this step (the scheduler drives it).
  void step(double lr);
  void step() { step(config_.lr); }
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig config_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::uint64_t step_ = 0;
};

// Linear warmup 0 -> peak over `warmup_steps`, then cosine decay to `floor`
// at `total_steps`.
double cosine_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps,
                 double peak, double floor);

}  // namespace rotar
