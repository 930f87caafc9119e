#include "rotar/autograd.hpp"

namespace rotar {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    // A parameter first seen under no-grad stays constant for this tape;
    // re-register it if grad has since been enabled.
    if (!grad_enabled_ || nodes_[it->second].requires_grad) return {this, it->second};
  }
  Node n;
  n.ref = &p.value;
  n.requires_grad = grad_enabled_;
  n.param = grad_enabled_ ? &p : nullptr;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_[&p] = id;
  return {this, id};
}

template <typename T>
Var<T> Tape<T>::detach(Var<T> v) {
  Node n;
  n.value = v.value();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (debug_checks_enabled()) check_finite(value, "tape op");
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (std::size_t id : inputs) {
      if (nodes_[id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor<T>(value(id).shape());
    n.has_grad = true;
  }
  return &n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor<T>(value(v.id()).shape());
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.value().numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         shape_string(loss.shape()));
  }
  if (backward_done_) throw ValueError("backward() already ran on this tape");
  backward_done_ = true;
  backward_visits_ = 0;
  Tensor<T>* seed = grad_sink(loss.id());
  if (!seed) return;
  seed->fill(T{1});
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) {
      n.backward(*this, id);
      ++backward_visits_;
    }
    if (n.param) {
      auto& dst = n.param->grad.storage();
      const auto& src = nodes_[id].grad.storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rotar
