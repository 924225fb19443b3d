#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mipseg/common.hpp"

namespace mipseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense n-d array with an optional gradient grid of the same shape.
// Copies are shallow: a Tensor is a handle to shared storage, so parameters
// held by a network and by an optimizer are the same object. Ops never
// mutate their inputs; only explicit accessors (optimizer updates, weight
// init) write through values_mut().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values.assign(shape_size(t.node_->shape), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (T& v : t.node_->values) v = value;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor: value count does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t size() const { return node_->values.size(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::span<const T> values() const { return node_->values; }
  std::span<T> values_mut() { return node_->values; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }

  // Allocates a zero gradient grid on first use.
  std::span<T> grad_mut() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
    return node_->grad;
  }

  void zero_grad() {
    for (T& g : node_->grad) g = T(0);
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
  }

  // Storage identity; distinguishes shared parameters from equal-valued copies.
  const void* id() const { return node_.get(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

// Ordered record of backward closures for one forward pass. Ops push their
// adjoints while a tape is active (see Scope); backward() replays them in
// reverse. Closures hold Tensor handles, so the tape keeps the graph alive
// until clear(). Single-threaded by design: one training step builds and
// consumes one tape on one thread.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { records_.push_back(std::move(backward_fn)); }

  void backward(Tensor<T> loss) {
    if (loss.size() != 1) throw ShapeError("backward() requires a scalar loss");
    loss.grad_mut()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active()) { active() = &tape; }
    ~Scope() { active() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<std::function<void()>> records_;
};

// True when the result of an op over these inputs should join the graph.
template <typename T, typename... Ts>
bool tracks_grad(const Tensor<T>& first, const Ts&... rest) {
  if (Tape<T>::active() == nullptr) return false;
  return (first.requires_grad() || ... || rest.requires_grad());
}

}  // namespace mipseg
