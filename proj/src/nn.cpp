#include "rotar/nn.hpp"

#include <cmath>
#include <numbers>

#include "rotar/ops.hpp"

namespace rotar {

template <typename T>
Parameter<T>& ParameterSet<T>::add(std::string name, Tensor<T> value) {
  if (contains(name)) throw ValueError("duplicate parameter '" + name + "'");
  params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value)));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParameterSet<T>::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw MissingTensorError("no parameter named '" + name + "'");
}

template <typename T>
const Parameter<T>& ParameterSet<T>::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw MissingTensorError("no parameter named '" + name + "'");
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return true;
  return false;
}

template <typename T>
std::vector<Parameter<T>*> ParameterSet<T>::all() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ParameterSet<T>::all() const {
  std::vector<const Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<Parameter<T>*> ParameterSet<T>::with_prefix(const std::string& prefix) {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_)
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  return out;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
Tensor<T> truncated_normal(Shape shape, double std, std::mt19937_64& rng) {
  Tensor<T> out(std::move(shape));
  for (T& v : out.data()) {
    double z = standard_normal(rng);
    while (std::abs(z) > 2.0) z = standard_normal(rng);
    v = static_cast<T>(z * std);
  }
  return out;
}

template <typename T>
Linear<T> Linear<T>::create(ParameterSet<T>& params, const std::string& name, std::size_t in,
                            std::size_t out, std::mt19937_64& rng, double init_std) {
  Linear<T> l;
  l.weight = &params.add(name + ".weight", truncated_normal<T>({in, out}, init_std, rng));
  l.bias = &params.add(name + ".bias", Tensor<T>({out}));
  return l;
}

template <typename T>
Var<T> Linear<T>::operator()(Tape<T>& tape, Var<T> x) const {
  const bool vector_input = x.value().rank() == 1;
  Var<T> in = vector_input ? ops::reshape(x, {1, x.value().numel()}) : x;
  Var<T> y = ops::add_bias(ops::matmul(in, tape.param(*weight)), tape.param(*bias));
  return vector_input ? ops::reshape(y, {out_features()}) : y;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct Linear<float>;
template struct Linear<double>;
template Tensor<float> truncated_normal<float>(Shape, double, std::mt19937_64&);
template Tensor<double> truncated_normal<double>(Shape, double, std::mt19937_64&);

}  // namespace rotar
