#include "rotar/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rotar {

void AdamWConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("adamw: lr must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw ConfigError("adamw: betas must lie in (0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("adamw: eps must be positive");
  if (weight_decay < 0) throw ConfigError("adamw: weight_decay must be >= 0");
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (Parameter<T>* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (Parameter<T>* p : params_) {
    if (!p->grad.same_shape(p->value)) {
      throw ValueError("adamw: missing gradient for parameter '" + p->name + "'");
    }
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& theta = params_[i]->value.storage();
    const auto& g = params_[i]->grad.storage();
    auto& m = m_[i].storage();
    auto& v = v_[i].storage();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + config_.eps);
      const double t = theta[j];
      theta[j] = static_cast<T>(t - lr * (update + config_.weight_decay * t));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (Parameter<T>* p : params_) p->zero_grad();
}

double cosine_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps,
                 double peak, double floor) {
  if (warmup_steps >= total_steps) {
    throw ConfigError("cosine_lr: warmup_steps must be smaller than total_steps");
  }
  step = std::min(step, total_steps);
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace rotar
