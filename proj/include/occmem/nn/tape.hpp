#pragma once

// Reverse-mode autodiff over whole tensors. A Tape records every op in
// creation order, so walking it backwards is a valid topological order.

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "occmem/nn/tensor.hpp"

namespace occmem::nn {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Named parameter tensors. std::map keeps a stable, sorted iteration order,
// which the weight archive and the optimizer rely on.
template <typename T>
class ParamStore {
 public:
  void set(const std::string& name, Tensor<T> v) { params_[name] = std::move(v); }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    OCCMEM_CHECK(it != params_.end(), "unknown parameter '", name, "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    OCCMEM_CHECK(it != params_.end(), "unknown parameter '", name, "'");
    return it->second;
  }
  void erase(const std::string& name) { params_.erase(name); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : params_) out.set(k, v.template cast<U>());
    return out;
  }

  bool all_finite() const {
    for (const auto& [k, v] : params_)
      if (!v.all_finite()) return false;
    return true;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.params_ == b.params_;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

template <typename T>
using GradStore = std::map<std::string, Tensor<T>>;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  // With gradients disabled, params become constants and nothing records a
  // backward path (inference mode).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }
  Var<T> leaf(Tensor<T> v) { return push(std::move(v), true, {}); }

  // Leaf bound to a named parameter. Repeated calls with the same name in one
  // tape return the same leaf, so unrolled recurrences share gradients.
  Var<T> param(const ParamStore<T>& store, const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Var<T>{this, it->second};
    Var<T> v = grad_enabled_ ? leaf(store.at(name)) : constant(store.at(name));
    bound_[name] = v.id;
    return v;
  }

  // Makes later param(name) calls resolve to `v`.
  void bind(const std::string& name, Var<T> v) { bound_[name] = v.id; }

  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (!requires_grad) fn = nullptr;
    return push(std::move(value), requires_grad, std::move(fn));
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value(int id) const { return nodes_[id].value; }

  // Gradient buffer of node `id`, allocated on first use; null when the node
  // does not require a gradient.
  Tensor<T>* grad_sink(int id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }
  const Tensor<T>* grad_or_null(int id) const {
    const Node& n = nodes_[id];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 for a single-element loss and back-propagates.
  void backward(Var<T> loss) {
    OCCMEM_CHECK(value(loss).size() == 1, "backward needs a scalar loss, got ",
                 value(loss).shape());
    if (!requires_grad(loss)) return;
    grad_sink(loss.id)->fill(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // Gradients of every bound parameter (zeros for unused ones).
  void collect_param_grads(GradStore<T>& out) const {
    for (const auto& [name, id] : bound_) {
      const Node& n = nodes_[id];
      auto it = out.find(name);
      if (it == out.end()) {
        out.emplace(name, n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad);
      } else if (!n.grad.empty()) {
        it->second += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> v, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, rg, std::move(fn)});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;  // deque: references stay valid across push_back
  std::map<std::string, int> bound_;
  bool grad_enabled_ = true;
};

}  // namespace occmem::nn
