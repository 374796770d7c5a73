#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "fisr/common.hpp"

namespace fisr {

// Reverse-mode autodiff on dense [N,C,H,W]-style tensors. The graph is a
// dynamic tape: every op that sees a grad-requiring input records a Node with
// a backward rule; backward() replays the tape in reverse topological order
// and then frees it.

template <typename T>
struct TensorData;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorData<T>>> inputs;
  // Reads the output's grad and accumulates into the inputs' grads.
  std::function<void(const TensorData<T>&)> backward;
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until the first accumulation
  std::shared_ptr<Node<T>> creator;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void accumulate_grad(const T* g, int64_t n) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    T* dst = grad.data();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
  }
};

// Grad recording can be switched off for inference / finite-difference evals.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : d_(std::make_shared<TensorData<T>>()) {
    d_->shape = std::move(shape);
    d_->data.assign(shape_numel(d_->shape), T(0));
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.d_->data.begin(), t.d_->data.end(), value);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->data = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor uniform(Rng& rng, Shape shape, T lo, T hi,
                        bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (T& v : t.d_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t dim(size_t i) const { return d_->shape[i]; }
  size_t rank() const { return d_->shape.size(); }
  int64_t numel() const { return d_->numel(); }

  T* data() { return d_->data.data(); }
  const T* data() const { return d_->data.data(); }
  std::vector<T>& vec() { return d_->data; }
  const std::vector<T>& vec() const { return d_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return d_->data[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), T(0));
    return d_->grad;
  }
  std::vector<T>& grad_vec() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), T(0));
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->data = d_->data;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(d_->shape);
    for (int64_t i = 0; i < numel(); ++i)
      t.data()[i] = static_cast<U>(d_->data[i]);
    return t;
  }

  std::shared_ptr<TensorData<T>>& impl() { return d_; }
  const std::shared_ptr<TensorData<T>>& impl() const { return d_; }

  // Runs the tape in reverse topological order, then frees it. Grads
  // accumulate; call zero_grad on leaves between optimization steps.
  void backward() const {
    if (!d_) throw Error("backward() on undefined tensor");
    if (numel() != 1)
      throw ShapeError("backward() requires a scalar loss, got " +
                       shape_str(d_->shape));
    d_->grad.assign(1, T(1));
    if (!d_->creator) return;

    std::vector<std::shared_ptr<TensorData<T>>> order;
    topo_sort(d_, order);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorData<T>& out = **it;
      if (!out.grad.empty()) out.creator->backward(out);
    }
    for (auto& t : order) t->creator.reset();
  }

 private:
  static void topo_sort(const std::shared_ptr<TensorData<T>>& root,
                        std::vector<std::shared_ptr<TensorData<T>>>& order) {
    // Iterative post-order DFS; each tensor with a creator appears once,
    // after all tensors computed from it.
    std::unordered_set<const TensorData<T>*> visited;
    struct Frame {
      std::shared_ptr<TensorData<T>> t;
      size_t next_input = 0;
    };
    std::vector<Frame> stack;
    if (root->creator) stack.push_back({root});
    visited.insert(root.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      auto& ins = f.t->creator->inputs;
      if (f.next_input < ins.size()) {
        auto& in = ins[f.next_input++];
        if (in->requires_grad && in->creator && !visited.count(in.get())) {
          visited.insert(in.get());
          stack.push_back({in});
        }
      } else {
        order.push_back(f.t);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorData<T>> d_;
};

// Shared helper for op construction: wires the tape node when any input
// requires grad and recording is enabled.
template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<Tensor<T>> inputs,
                         std::function<void(const TensorData<T>&)> backward) {
  Tensor<T> out(std::move(shape));
  bool rg = false;
  if (grad_mode_flag())
    for (const auto& in : inputs)
      if (in.requires_grad()) rg = true;
  if (rg) {
    out.set_requires_grad(true);
    auto node = std::make_shared<Node<T>>();
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->creator = std::move(node);
  }
  return out;
}

}  // namespace fisr
