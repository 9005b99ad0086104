#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "effir/errors.hpp"
#include "effir/rng.hpp"

namespace effir {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Copies are shallow (shared storage); use clone()
// for a deep copy. Data is immutable by convention once a tensor enters a
// model; grad buffers and optimizer updates are the sanctioned mutations.
//
// T is float for training/benchmarking and double for the verification mode.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), T(0));
    set_requires_grad(requires_grad);
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return TensorT(std::move(shape), requires_grad);
  }

  static TensorT ones(Shape shape, bool requires_grad = false) {
    TensorT t(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = T(1);
    return t;
  }

  static TensorT full(Shape shape, T value, bool requires_grad = false) {
    TensorT t(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = value;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    TensorT t(Shape{1}, requires_grad);
    t.node_->data[0] = value;
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ContractError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    TensorT t(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  bool is_scalar() const { return numel() == 1; }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T& at(std::size_t i) { return node_->data[i]; }
  T at(std::size_t i) const { return node_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return node_->data[r * node_->shape[1] + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape[1] + c]; }

  T item() const {
    if (!is_scalar()) throw ContractError("item() called on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Turning grad on allocates a zero grad buffer, so tensors off the path to
  // any loss report all-zero gradients after backward.
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->data.size())
      node_->grad.assign(node_->data.size(), T(0));
    if (!on) node_->grad.clear();
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  T* grad() { return node_->grad.data(); }
  const T* grad() const { return node_->grad.data(); }
  std::vector<T>& grad_vec() { return node_->grad; }
  const std::vector<T>& grad_vec() const { return node_->grad; }

  void zero_grad() {
    for (auto& g : node_->grad) g = T(0);
  }

  TensorT clone() const {
    TensorT t;
    t.node_ = std::make_shared<Node>(*node_);
    return t;
  }

  // identity of the underlying storage, for aliasing checks
  const void* id() const { return node_.get(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. Ops append their backward closure in
// forward execution order, which makes the record topological by
// construction. backward() replays the records once, in reverse, and then
// clears the tape; record a fresh graph for every backward pass.
template <typename T>
class TapeT {
 public:
  void record(std::function<void()> backward_fn) {
    records_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients (sum over fan-out)
  // into every recorded tensor's grad buffer.
  void backward(TensorT<T> loss) {
    if (!loss.is_scalar())
      throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (records_.empty()) throw ContractError("backward on an empty tape");
    if (!loss.requires_grad())
      throw ContractError("backward on a loss that was not recorded on this tape");
    loss.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
  }

 private:
  std::vector<std::function<void()>> records_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// Non-deduced tape parameter type, so call sites may pass a plain nullptr
// without pinning T themselves.
template <typename T>
using TapePtr = TapeT<std::type_identity_t<T>>*;

}  // namespace effir
