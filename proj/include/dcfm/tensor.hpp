#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcfm/common.hpp"

namespace dcfm {

namespace autograd {

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool enabled() { return detail::no_grad_depth == 0; }

// Suppresses tape construction for the enclosing scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;  // leaf parameter
  bool tape = false;           // participates in a backward graph
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";
};

// Dense row-major tensor handle. Values are immutable once an op has produced
// them (except via data() on freshly built leaves); grad buffers are the only
// mutable state, which makes read-only sharing across threads safe.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, T fill, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev, bool requires_grad = false);
  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> mutable_grad() { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.assign(node_->grad.size(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ConfigError("item() requires a scalar tensor");
    return node_->value[0];
  }

  // Copy of the values with no tape attached.
  Tensor detach() const;

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// --- differentiable ops -----------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad);

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w);

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& input, T eps);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c_begin, int c_end);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                                int ignore = kIgnoreLabel);

// b and mask are constants: no gradient flows through them.
template <typename T>
Tensor<T> mse_masked(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Grows H and W by mirroring rows/columns at the bottom/right edge.
template <typename T>
Tensor<T> reflect_pad_br(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
void backward(const Tensor<T>& loss);

// --- parameters and optimization --------------------------------------------

template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t);
  Tensor<T>* find(const std::string& name);
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  size_t size() const { return items_.size(); }
  size_t total_scalars() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

// v <- momentum * v + grad; p <- p - lr * v; grads cleared after the step.
template <typename T>
class SgdOptimizer {
 public:
  void step(ParamStore<T>& params, T lr, T momentum);

 private:
  std::vector<std::vector<T>> velocity_;
};

double poly_lr(int iter, int total, double base, double power);

}  // namespace dcfm
