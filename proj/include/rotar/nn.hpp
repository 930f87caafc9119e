#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rotar/autograd.hpp"

namespace rotar {

// Owns every parameter of a model. Parameter addresses are stable for the
// lifetime of the set, which tapes rely on.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter<T>*> all();
  std::vector<const Parameter<T>*> all() const;
  // Parameters whose name starts with `prefix`.
  std::vector<Parameter<T>*> with_prefix(const std::string& prefix);

  std::size_t size() const { return params_.size(); }
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

// Uniform [0, 1) and Box-Muller normals built from raw engine output so
// initialization is identical across standard libraries.
double uniform01(std::mt19937_64& rng);
double standard_normal(std::mt19937_64& rng);

// Normal(0, std) resampled outside two standard deviations.
template <typename T>
Tensor<T> truncated_normal(Shape shape, double std, std::mt19937_64& rng);

// He-style std for layers followed by a (leaky) ReLU.
inline double fan_in_std(std::size_t in) { return std::sqrt(2.0 / static_cast<double>(in)); }

// y = x W + b with W [in x out]. Accepts x of shape [in] or [rows x in].
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Linear create(ParameterSet<T>& params, const std::string& name, std::size_t in,
                       std::size_t out, std::mt19937_64& rng, double init_std = 0.02);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
  std::size_t in_features() const { return weight->value.dim(0); }
  std::size_t out_features() const { return weight->value.dim(1); }
};

}  // namespace rotar
