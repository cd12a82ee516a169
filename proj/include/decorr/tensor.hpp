#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Ops record onto the thread's active tape (see TapeScope) whenever at least
// one input requires a gradient. Without an active tape every op is a plain
// forward computation, which is how eval-mode inference and attacks on frozen
// parameters avoid paying for bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "decorr/errors.hpp"

namespace decorr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct NodeBase {
  virtual ~NodeBase() = default;
  virtual void clear_grad() = 0;
  bool requires_grad = false;
  bool leaf = true;
  // Set once some gradient has been accumulated since the last clear.
  bool touched = false;
  long id = -1;
};

template <class T>
struct Node final : NodeBase {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  void clear_grad() override {
    std::fill(grad.begin(), grad.end(), T{0});
    touched = false;
  }
  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    touched = true;
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor;

class Tape {
 public:
  struct Record {
    std::vector<std::shared_ptr<detail::NodeBase>> inputs;
    std::shared_ptr<detail::NodeBase> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::shared_ptr<detail::NodeBase>> inputs,
              std::shared_ptr<detail::NodeBase> output, std::function<void()> backward) {
    for (auto& in : inputs)
      if (in->id < 0) in->id = next_id_++;
    output->id = next_id_++;
    output->leaf = false;
    records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
  }

  // Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
  // interior gradients are reset first so that a second loss on the same tape
  // only contributes its own share.
  template <class T>
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() {
    records_.clear();
    next_id_ = 0;
  }

 private:
  std::vector<Record> records_;
  long next_id_ = 0;
};

namespace detail {
inline thread_local Tape* current_tape = nullptr;
}

inline Tape* active_tape() { return detail::current_tape; }

// Makes `tape` the recording target for the current thread until destroyed.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::current_tape) { detail::current_tape = &tape; }
  ~TapeScope() { detail::current_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(detail::current_tape) { detail::current_tape = nullptr; }
  ~NoGradScope() { detail::current_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

  explicit Tensor(Shape shape, T fill = T{0}) : Tensor() {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    node_->value.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor() {
    if (numel_of(shape) != values.size())
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != numel()) node_->grad.assign(numel(), T{0});
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == numel(); }
  // Gradient buffer; zeros when nothing has flowed here.
  std::span<const T> grad() const {
    if (!has_grad()) node_->grad.assign(numel(), T{0});
    return node_->grad;
  }
  std::span<T> mutable_grad() {
    if (!has_grad()) node_->grad.assign(numel(), T{0});
    return node_->grad;
  }
  void zero_grad() { node_->clear_grad(); }

  // Fresh leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), values()); }

  // Reinterprets the shape in place (no copy, no tape record). Use ops::reshape
  // inside differentiable code.
  Tensor& reshape_inplace(Shape s) {
    if (numel_of(s) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    node_->shape = std::move(s);
    return *this;
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  long node_id() const { return node_->id; }
  bool is_leaf() const { return node_->leaf; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
void Tape::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad() || loss.is_leaf())
    throw ContractError("backward() on a loss that is not recorded on a live tape");
  for (auto& r : records_) r.output->clear_grad();
  loss.node()->grad_buffer()[0] = T{1};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it)
    if (it->output->touched) it->backward();
}

namespace detail {

// True when an op on these inputs must be recorded.
template <class... Ts>
bool wants_grad(const Ts&... ins) {
  return active_tape() != nullptr && (ins.requires_grad() || ...);
}

template <class T, class... Ins>
void record(const Tensor<T>& out, std::function<void()> bw, const Ins&... ins) {
  out.node()->requires_grad = true;
  active_tape()->record({std::static_pointer_cast<NodeBase>(ins.node())...},
                        std::static_pointer_cast<NodeBase>(out.node()), std::move(bw));
}

// Gradient buffer of an input if it participates, else empty span.
template <class T>
std::span<T> grad_of(const std::shared_ptr<Node<T>>& n) {
  if (!n->requires_grad) return {};
  return n->grad_buffer();
}

}  // namespace detail

}  // namespace decorr
