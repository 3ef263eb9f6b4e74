#include "tslformer/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "tslformer/error.hpp"

namespace tslformer::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> value, const char* op,
                                   std::initializer_list<const Tensor<T>*> inputs) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  for (const auto* in : inputs) node->requires_grad = node->requires_grad || in->requires_grad();
  if (node->requires_grad) {
    for (const auto* in : inputs) node->inputs.push_back(in->node());
  }
  return node;
}

// Gradient buffer of input i, or nullptr when that input is not tracked.
template <typename T>
T* input_grad(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? in.grad.data() : nullptr;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw Error(ErrorCode::ShapeMismatch, op + ": " + detail);
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) shape_error(op, "undefined tensor");
}

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream s;
  s << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? "x" : "") << shape[i];
  s << ']';
  return s.str();
}

// --- Tensor -------------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (shape.empty() || shape.size() > 3) shape_error("tensor", "rank must be 1..3");
  for (auto d : shape) {
    if (d == 0) shape_error("tensor", "zero-sized dimension in " + shape_string(shape));
  }
  if (numel(shape) != values.size()) {
    shape_error("tensor", shape_string(shape) + " needs " + std::to_string(numel(shape)) +
                              " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  std::size_t n = numel(shape);
  Tensor t = constant(std::move(shape), std::vector<T>(n, T(0)));
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({1}, {value});
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!node_->inputs.empty() || node_->backward) {
    throw Error(ErrorCode::ShapeMismatch, "only leaf tensors can be modified in place");
  }
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw Error(ErrorCode::NotScalar, "item() on " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  Tensor t = constant(shape(), node_->value);
  t.node_->requires_grad = requires_grad;
  return t;
}

// --- graph and backward -------------------------------------------------------

template <typename T>
Graph<T> Graph<T>::trace(const Tensor<T>& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  std::unordered_set<const Node<T>*> visited;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

template <typename T>
std::vector<T> GradientMap<T>::of(const Tensor<T>& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return std::vector<T>(t.size(), T(0));
  return it->second;
}

template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw Error(ErrorCode::NotScalar,
                "loss must have exactly one element, got " +
                    (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorCode::DetachedLoss, "loss does not depend on any tensor that requires grad");
  }
  Graph<T> graph = Graph<T>::trace(loss);
  for (Node<T>* node : graph.nodes()) node->grad.assign(node->value.size(), T(0));
  loss.node()->grad[0] = T(1);

  GradientMap<T> out;
  auto nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward) node->backward(*node);
    if (node->inputs.empty()) {
      out.set(node, std::move(node->grad));
    }
    node->grad = std::vector<T>();
  }
  return out;
}

// --- linear algebra -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (b.rank() != 2 || a.rank() < 2) {
    shape_error("matmul", shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  const std::size_t k = a.shape().back();
  if (k != b.dim(0)) {
    shape_error("matmul", "inner dimensions differ: " + shape_string(a.shape()) + " * " +
                              shape_string(b.shape()));
  }
  const std::size_t m = a.size() / k;
  const std::size_t n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;

  std::vector<T> out(m * n);
  {
    ConstMapMat<T> A(a.values().data(), m, k);
    ConstMapMat<T> B(b.values().data(), k, n);
    MapMat<T> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "matmul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n](Node<T>& self) {
      ConstMapMat<T> dC(self.grad.data(), m, n);
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      if (T* ga = input_grad(self, 0)) {
        MapMat<T>(ga, m, k).noalias() += dC * ConstMapMat<T>(bv.data(), k, n).transpose();
      }
      if (T* gb = input_grad(self, 1)) {
        MapMat<T>(gb, k, n).noalias() += ConstMapMat<T>(av.data(), m, k).transpose() * dC;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a, "batched_matmul");
  require_defined(b, "batched_matmul");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    shape_error("batched_matmul", shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  const std::size_t batches = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (bk != k) {
    shape_error("batched_matmul", "inner dimensions differ: " + shape_string(a.shape()) + " * " +
                                      shape_string(b.shape()));
  }
  std::vector<T> out(batches * m * n);
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMapMat<T> A(a.values().data() + i * m * k, m, k);
    MapMat<T> C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * ConstMapMat<T>(b.values().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMapMat<T>(b.values().data() + i * k * n, k, n);
    }
  }
  auto node = make_node<T>({batches, m, n}, std::move(out), "batched_matmul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [batches, m, k, n, transpose_b](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      T* ga = input_grad(self, 0);
      T* gb = input_grad(self, 1);
      for (std::size_t i = 0; i < batches; ++i) {
        ConstMapMat<T> dC(self.grad.data() + i * m * n, m, n);
        ConstMapMat<T> A(av.data() + i * m * k, m, k);
        if (transpose_b) {
          // C = A Bt with B [n x k]: dA = dC B, dB = dC^T A
          ConstMapMat<T> B(bv.data() + i * n * k, n, k);
          if (ga) MapMat<T>(ga + i * m * k, m, k).noalias() += dC * B;
          if (gb) MapMat<T>(gb + i * n * k, n, k).noalias() += dC.transpose() * A;
        } else {
          ConstMapMat<T> B(bv.data() + i * k * n, k, n);
          if (ga) MapMat<T>(ga + i * m * k, m, k).noalias() += dC * B.transpose();
          if (gb) MapMat<T>(gb + i * k * n, k, n).noalias() += A.transpose() * dC;
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// --- elementwise --------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) {
    shape_error("add", shape_string(a.shape()) + " + " + shape_string(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto node = make_node<T>(a.shape(), std::move(out), "add", {&a, &b});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      for (std::size_t j = 0; j < 2; ++j) {
        if (T* g = input_grad(self, j)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  require_defined(x, "add_broadcast");
  require_defined(y, "add_broadcast");
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  bool ok = ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin());
  if (!ok) shape_error("add_broadcast", shape_string(xs) + " + " + shape_string(ys));
  const std::size_t inner = y.size();
  const std::size_t outer = x.size() / inner;
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x.values()[o * inner + i] + y.values()[i];
  }
  auto node = make_node<T>(xs, std::move(out), "add_broadcast", {&x, &y});
  if (node->requires_grad) {
    node->backward = [outer, inner](Node<T>& self) {
      if (T* gx = input_grad(self, 0)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
      }
      if (T* gy = input_grad(self, 1)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) gy[i] += self.grad[o * inner + i];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) {
    shape_error("mul", shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto node = make_node<T>(a.shape(), std::move(out), "mul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      if (T* ga = input_grad(self, 0)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i];
      }
      if (T* gb = input_grad(self, 1)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * av[i];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  require_defined(x, "scale");
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
  auto node = make_node<T>(x.shape(), std::move(out), "scale", {&x});
  if (node->requires_grad) {
    node->backward = [factor](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_defined(x, "relu");
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > T(0) ? x.values()[i] : T(0);
  auto node = make_node<T>(x.shape(), std::move(out), "relu", {&x});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* g = input_grad(self, 0);
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (xv[i] > T(0)) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  T total = T(0);
  for (T v : x.values()) total += v;
  auto node = make_node<T>({1}, {total}, "sum", {&x});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* g = input_grad(self, 0);
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size() || shape.empty() || shape.size() > 3) {
    shape_error("reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  auto node = make_node<T>(std::move(shape), std::move(out), "reshape", {&x});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(node));
}

// --- softmax family -------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x, std::span<const std::uint8_t> key_mask, bool masked,
                       const char* op) {
  require_defined(x, op);
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const std::size_t rows_per_group = x.rank() >= 2 ? x.shape()[x.rank() - 2] : 1;
  const std::size_t groups = rows / rows_per_group;
  if (masked && key_mask.size() != groups * n) {
    shape_error(op, "mask has " + std::to_string(key_mask.size()) + " entries, expected " +
                        std::to_string(groups * n));
  }
  std::vector<T> out(x.size(), T(0));
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* keep = masked ? key_mask.data() + (r / rows_per_group) * n : nullptr;
    const T* in = xv + r * n;
    T* o = out.data() + r * n;
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep || keep[j]) peak = std::max(peak, in[j]);
    }
    if (peak == -std::numeric_limits<T>::infinity()) {
      throw Error(ErrorCode::EmptyMask, std::string(op) + ": row " + std::to_string(r) +
                                            " has no attendable position");
    }
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep || keep[j]) {
        o[j] = std::exp(in[j] - peak);
        total += o[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  auto node = make_node<T>(x.shape(), std::move(out), op, {&x});
  if (node->requires_grad) {
    node->backward = [n, rows](Node<T>& self) {
      T* g = input_grad(self, 0);
      const auto& y = self.value;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor<T>(std::move(node));
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax_impl<T>(x, {}, false, "softmax");
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> key_mask) {
  return softmax_impl<T>(x, key_mask, true, "masked_softmax");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.shape().back();
  if (d < 2) shape_error("layer_norm", "needs at least two features per row");
  if (gain.size() != d || bias.size() != d) {
    shape_error("layer_norm", "gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    // zero variance with eps = 0 collapses the row to its bias
    T s = var + eps > T(0) ? T(1) / std::sqrt(var + eps) : T(0);
    rstd[r] = s;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (in[j] - mu) * s;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "layer_norm", {&x, &gain, &bias});
  if (node->requires_grad) {
    node->backward = [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
      T* gx = input_grad(self, 0);
      T* gg = input_grad(self, 1);
      T* gb = input_grad(self, 2);
      const auto& gain_v = self.inputs[1]->value;
      std::vector<T> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dy = self.grad.data() + r * d;
        const T* h = xhat.data() + r * d;
        if (gg) for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * h[j];
        if (gb) for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
        if (gx) {
          T mean_d = T(0), mean_dh = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dy[j] * gain_v[j];
            mean_d += dxhat[j];
            mean_dh += dxhat[j] * h[j];
          }
          mean_d /= static_cast<T>(d);
          mean_dh /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
          }
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  require_defined(x, "dropout");
  if (!(p >= 0.0 && p < 1.0)) {
    throw Error(ErrorCode::BadProbability, "dropout probability must be in [0, 1), got " +
                                               std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> factor(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = x.values()[i] * factor[i];
  }
  auto node = make_node<T>(x.shape(), std::move(out), "dropout", {&x});
  if (node->requires_grad) {
    node->backward = [factor = std::move(factor)](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor[i];
    };
  }
  return Tensor<T>(std::move(node));
}

// --- attention plumbing ---------------------------------------------------------

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require_defined(x, "split_heads");
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    shape_error("split_heads", shape_string(x.shape()) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t B = x.dim(0), T_ = x.dim(1), d = x.dim(2), dk = d / heads;
  std::vector<T> out(x.size());
  const T* xv = x.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T_; ++t)
        std::copy_n(xv + (b * T_ + t) * d + h * dk, dk, out.data() + ((b * heads + h) * T_ + t) * dk);
  auto node = make_node<T>({B * heads, T_, dk}, std::move(out), "split_heads", {&x});
  if (node->requires_grad) {
    node->backward = [B, heads, T_, d, dk](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < T_; ++t) {
            const T* src = self.grad.data() + ((b * heads + h) * T_ + t) * dk;
            T* dst = g + (b * T_ + t) * d + h * dk;
            for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
          }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  require_defined(x, "merge_heads");
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
    shape_error("merge_heads", shape_string(x.shape()) + " from " + std::to_string(heads) + " heads");
  }
  const std::size_t B = x.dim(0) / heads, T_ = x.dim(1), dk = x.dim(2), d = dk * heads;
  std::vector<T> out(x.size());
  const T* xv = x.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T_; ++t)
        std::copy_n(xv + ((b * heads + h) * T_ + t) * dk, dk, out.data() + (b * T_ + t) * d + h * dk);
  auto node = make_node<T>({B, T_, d}, std::move(out), "merge_heads", {&x});
  if (node->requires_grad) {
    node->backward = [B, heads, T_, d, dk](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < T_; ++t) {
            const T* src = self.grad.data() + (b * T_ + t) * d + h * dk;
            T* dst = g + ((b * heads + h) * T_ + t) * dk;
            for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
          }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require_defined(x, "masked_mean_pool");
  if (x.rank() != 3) shape_error("masked_mean_pool", "expects [B x T x d], got " + shape_string(x.shape()));
  const std::size_t B = x.dim(0), T_ = x.dim(1), d = x.dim(2);
  if (mask.size() != B * T_) {
    shape_error("masked_mean_pool", "mask has " + std::to_string(mask.size()) + " entries, expected " +
                                        std::to_string(B * T_));
  }
  std::vector<T> out(B * d, T(0));
  std::vector<T> inv_count(B);
  const T* xv = x.values().data();
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < T_; ++t) {
      if (!mask[b * T_ + t]) continue;
      ++count;
      const T* row = xv + (b * T_ + t) * d;
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += row[j];
    }
    if (count == 0) {
      throw Error(ErrorCode::EmptyMask, "sample " + std::to_string(b) + " has no attendable frame");
    }
    inv_count[b] = T(1) / static_cast<T>(count);
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv_count[b];
  }
  auto node = make_node<T>({B, d}, std::move(out), "masked_mean_pool", {&x});
  if (node->requires_grad) {
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    node->backward = [B, T_, d, keep = std::move(keep), inv_count = std::move(inv_count)](Node<T>& self) {
      T* g = input_grad(self, 0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T_; ++t) {
          if (!keep[b * T_ + t]) continue;
          for (std::size_t j = 0; j < d; ++j) g[(b * T_ + t) * d + j] += self.grad[b * d + j] * inv_count[b];
        }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    shape_error("cross_entropy", "logits " + shape_string(logits.shape()) + " with " +
                                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<T> probs(B * C);
  T total = T(0);
  const T* lv = logits.values().data();
  for (std::size_t b = 0; b < B; ++b) {
    int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= C) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label) + " outside [0, " +
                                                  std::to_string(C) + ")");
    }
    const T* row = lv + b * C;
    T peak = *std::max_element(row, row + C);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - peak);
    T lse = peak + std::log(z);
    total += lse - row[label];
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(row[c] - lse);
  }
  std::vector<int> targets(labels.begin(), labels.end());
  auto node = make_node<T>({1}, {total / static_cast<T>(B)}, "cross_entropy", {&logits});
  if (node->requires_grad) {
    node->backward = [B, C, probs = std::move(probs), targets = std::move(targets)](Node<T>& self) {
      T* g = input_grad(self, 0);
      const T upstream = self.grad[0] / static_cast<T>(B);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          T delta = probs[b * C + c] - (static_cast<int>(c) == targets[b] ? T(1) : T(0));
          g[b * C + c] += upstream * delta;
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// --- oracles ----------------------------------------------------------------------

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw Error(ErrorCode::BadConfig, "finite-difference step must be positive");
  Tensor<T> probe = x.clone(false);
  auto values = probe.mutable_values();
  std::vector<T> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = original + h;
    const T up = f(probe);
    values[i] = original - h;
    const T down = f(probe);
    values[i] = original;
    grad[i] = (up - down) / (T(2) * h);
  }
  return Tensor<T>::constant(x.shape(), std::move(grad));
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) shape_error("max_relative_error", "length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

#define TSLFORMER_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                   \
  template class Graph<T>;                                                                    \
  template class GradientMap<T>;                                                              \
  template GradientMap<T> backward<T>(const Tensor<T>&);                                      \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&, bool);             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add_broadcast<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                               \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                \
  template Tensor<T> mean<T>(const Tensor<T>&);                                               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                     \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                            \
  template Tensor<T> masked_softmax<T>(const Tensor<T>&, std::span<const std::uint8_t>);      \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, Rng&);                        \
  template Tensor<T> split_heads<T>(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> merge_heads<T>(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> masked_mean_pool<T>(const Tensor<T>&, std::span<const std::uint8_t>);    \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);                \
  template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&, const Tensor<T>&, T);

TSLFORMER_INSTANTIATE(float)
TSLFORMER_INSTANTIATE(double)

#undef TSLFORMER_INSTANTIATE

}  // namespace tslformer::ad
