#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rotar/tensor.hpp"

namespace rotar {

enum class Mode { train, eval };

// A trainable tensor owned by a model. The gradient buffer persists across
// tapes so micro-batches can accumulate into it.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
// node list is already topologically sorted; backward() walks it once in
// reverse. A tape must stay on one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  // Differentiable input that is not bound to a model parameter.
  Var<T> leaf(Tensor<T> value);
  // The node for a parameter is created once per tape and reused.
  Var<T> param(Parameter<T>& p);
  // Same value, no gradient path.
  Var<T> detach(Var<T> v);

  // Appends an op result. When no input requires grad (or grad is disabled)
  // the backward rule is dropped.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, allocated on first use. Returns nullptr when
  // the node does not take gradients.
  Tensor<T>* grad_sink(std::size_t id);
  // Gradient after backward(); zero tensor if nothing flowed into the node.
  Tensor<T> grad(Var<T> v) const;

  void backward(Var<T> loss);

  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }
  // Number of backward rules executed by the last backward() call.
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

// Disables gradient recording on a tape for the lifetime of the guard.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace rotar
