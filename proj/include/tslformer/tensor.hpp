#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tslformer/rng.hpp"

// Dense rank <= 3 tensors with reverse-mode differentiation.
//
// Every op returns a fresh tensor. When any input requires a gradient the
// result keeps its inputs alive and a closure that pushes the result's
// gradient back into them; otherwise nothing is recorded. `backward` walks
// the recorded nodes reachable from a scalar loss in reverse topological
// order. All ops are instantiated for float (training and inference) and
// double (gradient checking).
namespace tslformer::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> values() const { return node_->value; }
  /// Leaves only: optimizers and finite-difference probes update in place.
  std::span<T> mutable_values();
  T item() const;
  T at(std::size_t flat) const { return node_->value.at(flat); }

  /// Deep copy of the values as a new leaf.
  Tensor clone(bool requires_grad) const;

  const Node<T>* id() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Nodes reachable from a root, inputs before consumers.
template <typename T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root);
  std::span<Node<T>* const> nodes() const { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

/// Gradients of every requires-grad leaf reached from the loss.
template <typename T>
class GradientMap {
 public:
  bool contains(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }
  /// Zeros when the tensor does not influence the loss.
  std::vector<T> of(const Tensor<T>& t) const;
  std::size_t size() const noexcept { return grads_.size(); }

  void set(const Node<T>* node, std::vector<T> grad) { grads_[node] = std::move(grad); }

 private:
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

/// Throws NotScalar if the loss has more than one element and DetachedLoss
/// if nothing upstream requires a gradient.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss);

// --- ops ---------------------------------------------------------------------

/// a [m x k] or [B x m x k] (rows flattened) times b [k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Per-batch product of a [N x m x k] and b [N x k x n], or b [N x n x k]
/// when `transpose_b`.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// x + y where y's shape equals the trailing dims of x (bias rows, or a
/// [T x d] table added to every sample of [B x T x d]).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Softmax over the last axis where `key_mask[g * n + j] == 0` removes key
/// j for every row in leading group g (groups = numel / (rows * n)).
/// Removed keys get exactly zero weight. Throws EmptyMask when a group has
/// no usable key.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> key_mask);

/// Row-wise (x - mean) / sqrt(var + eps) * gain + bias, population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// Identity when !training or p == 0. Throws BadProbability unless 0 <= p < 1.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng);

/// [B x T x d] -> [B*h x T x d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

/// [B*h x T x d/h] -> [B x T x d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);

/// Mean of the rows of each sample whose mask entry is nonzero:
/// [B x T x d] -> [B x d]. Throws EmptyMask.
template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::uint8_t> mask);

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
/// Throws LabelOutOfRange.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// max |a - b| / max(|a|, |b|, floor) over paired elements.
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor);

}  // namespace tslformer::ad
