#pragma once

// Dense float64 tensor with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations producing a
// tensor from inputs that require gradients record the inputs and a local
// backward rule on the output node; Tensor::backward() replays those rules in
// reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mros/error.hpp"

namespace mros {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's grad into the grads of `inputs`.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto extent : shape) {
      if (extent == 0) raise<DimensionError>("zero extent in shape ", shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      raise<DimensionError>("shape ", shape_str(shape), " needs ", shape_numel(shape),
                            " values, got ", data.size());
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) raise<DimensionError>("axis ", axis, " out of range for ", shape_str(shape()));
    return node().shape[axis];
  }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  // In-place access for parameter leaves (optimizer steps, initialization).
  std::span<double> mutable_data() {
    if (!is_leaf()) raise<ContractError>("mutable_data() on non-leaf tensor produced by ", node().op);
    return node_->data;
  }

  double item() const {
    if (numel() != 1) raise<ContractError>("item() on tensor of shape ", shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!is_leaf()) raise<ContractError>("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
    return *this;
  }

  bool is_leaf() const { return node().op == "leaf"; }
  const std::string& op_name() const { return node().op; }

  bool has_grad() const { return !node().grad.empty(); }
  // Empty span when no gradient reached this tensor.
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() { node_->grad.clear(); }

  // A leaf holding a copy of the values, disconnected from the tape.
  Tensor detach() const { return Tensor(shape(), node().data, false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  void backward() const;

  // Internal: used by operation implementations.
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  const detail::Node& node() const {
    if (!node_) raise<ContractError>("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Creates an operation output. Inputs and the backward rule are kept only
// when recording is enabled and some input requires a gradient.
inline Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  bool track = grad_enabled() &&
               std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  auto& node = *out.node_ptr();
  node.op = std::move(op);
  if (track) {
    node.requires_grad = true;
    for (auto& in : inputs) node.inputs.push_back(in.node_ptr());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

// Grad buffer of input `i`, or nullptr when that input is not differentiable.
inline std::vector<double>* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; graphs from deep backbones overflow recursion.
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Topologically ordered view of the operations recorded behind a tensor.
// Every entry's inputs appear before it.
struct ComputationRecord {
  struct Entry {
    std::string op;
    const detail::Node* node;
    std::vector<const detail::Node*> inputs;
  };
  std::vector<Entry> entries;
};

inline ComputationRecord record_of(const Tensor& root) {
  ComputationRecord rec;
  if (!root.requires_grad()) return rec;
  for (auto* node : detail::topological_order(root.node_ptr().get())) {
    ComputationRecord::Entry e{node->op, node, {}};
    for (auto& in : node->inputs) e.inputs.push_back(in.get());
    rec.entries.push_back(std::move(e));
  }
  return rec;
}

inline void Tensor::backward() const {
  if (numel() != 1 || rank() != 0) {
    raise<ContractError>("backward() requires a scalar loss, got shape ", shape_str(shape()));
  }
  if (!requires_grad()) raise<ContractError>("backward() on a tensor that does not require grad");
  auto order = detail::topological_order(node_.get());
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise<DimensionError>(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    }
    if (auto* g = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result("scale", a.shape(), std::move(out), {a},
                             [factor](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
                               }
                             });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::make_result("sum", {}, {total}, {a}, [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ReLU with subgradient 0 at 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return detail::make_result("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      const auto& x = self.inputs[0]->data;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    raise<DimensionError>("matmul: incompatible shapes ", shape_str(a.shape()), " and ",
                          shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[p * n + j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    const auto& go = self.grad;
    if (auto* g = detail::input_grad(self, 0)) {
      // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * y[p * n + j];
          (*g)[i * k + p] += acc;
        }
    }
    if (auto* g = detail::input_grad(self, 1)) {
      // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*g)[p * n + j] += xv * go[i * n + j];
        }
    }
  });
}

// x[m×n] + b[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
    raise<DimensionError>("add_bias: incompatible shapes ", shape_str(x.shape()), " and ",
                          shape_str(bias.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return detail::make_result("add_bias", x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
    }
  });
}

// Valid (unpadded) cross-correlation of a C_in×H×W map with C_out×C_in×k×k kernels.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride) {
  if (stride == 0) raise<ContractError>("conv2d: stride must be positive");
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dim(1) != input.dim(0) ||
      kernels.dim(2) != kernels.dim(3)) {
    raise<DimensionError>("conv2d: incompatible input ", shape_str(input.shape()), " and kernels ",
                          shape_str(kernels.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), ks = kernels.dim(2);
  if (ks > h || ks > w) {
    raise<DimensionError>("conv2d: kernel ", ks, "x", ks, " larger than input ", shape_str(input.shape()));
  }
  const std::size_t oh = (h - ks) / stride + 1, ow = (w - ks) / stride + 1;
  std::vector<double> out(cout * oh * ow, 0.0);
  auto x = input.data();
  auto k = kernels.data();
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ky = 0; ky < ks; ++ky)
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const double kv = k[((co * cin + ci) * ks + ky) * ks + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const double* row = &x[(ci * h + oy * stride + ky) * w + kx];
            double* dst = &out[(co * oh + oy) * ow];
            for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] += kv * row[ox * stride];
          }
        }
  return detail::make_result(
      "conv2d", {cout, oh, ow}, std::move(out), {input, kernels},
      [=](detail::Node& self) {
        const auto& x = self.inputs[0]->data;
        const auto& k = self.inputs[1]->data;
        const auto& go = self.grad;
        auto* gx = detail::input_grad(self, 0);
        auto* gk = detail::input_grad(self, 1);
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < ks; ++ky)
              for (std::size_t kx = 0; kx < ks; ++kx) {
                const std::size_t kidx = ((co * cin + ci) * ks + ky) * ks + kx;
                double acc = 0.0;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const std::size_t base = (ci * h + oy * stride + ky) * w + kx;
                  const double* g = &go[(co * oh + oy) * ow];
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    acc += g[ox] * x[base + ox * stride];
                    if (gx) (*gx)[base + ox * stride] += g[ox] * k[kidx];
                  }
                }
                if (gk) (*gk)[kidx] += acc;
              }
      });
}

// x[C×H×W] + b[C] broadcast over spatial positions.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || x.dim(0) != bias.dim(0)) {
    raise<DimensionError>("add_channel_bias: incompatible shapes ", shape_str(x.shape()), " and ",
                          shape_str(bias.shape()));
  }
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] += bias.data()[ch];
  return detail::make_result("add_channel_bias", x.shape(), std::move(out), {x, bias},
                             [c, plane](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                               }
                               if (auto* g = detail::input_grad(self, 1)) {
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t i = 0; i < plane; ++i) (*g)[ch] += self.grad[ch * plane + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalization

enum class Mode { kTrain, kEval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  static RunningStats identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
};

// Batch normalization over the rows of x[m×C]. Train mode uses biased batch
// statistics and folds the unbiased variance into `stats` with the given
// momentum; eval mode normalizes with `stats`.
inline Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            RunningStats& stats, Mode mode, BatchNormOptions opts = {}) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1)) {
    raise<DimensionError>("batch_norm_1d: incompatible shapes x", shape_str(x.shape()), " gamma",
                          shape_str(gamma.shape()), " beta", shape_str(beta.shape()));
  }
  const std::size_t m = x.dim(0), c = x.dim(1);
  if (stats.mean.size() != c || stats.var.size() != c) {
    raise<DimensionError>("batch_norm_1d: running stats width ", stats.mean.size(), " vs ", c, " channels");
  }
  if (mode == Mode::kTrain && m < 2) {
    raise<ContractError>("batch_norm_1d: degenerate batch of size ", m, " in train mode");
  }
  auto xv = x.data();
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  if (mode == Mode::kTrain) {
    std::vector<double> var(c, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
    for (auto& v : mu) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xv[i * c + j] - mu[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < c; ++j) {
      const double biased = var[j] / static_cast<double>(m);
      inv_std[j] = 1.0 / std::sqrt(biased + opts.eps);
      const double unbiased = var[j] / static_cast<double>(m - 1);
      stats.mean[j] = (1.0 - opts.momentum) * stats.mean[j] + opts.momentum * mu[j];
      stats.var[j] = (1.0 - opts.momentum) * stats.var[j] + opts.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = stats.mean[j];
      inv_std[j] = 1.0 / std::sqrt(stats.var[j] + opts.eps);
    }
  }
  std::vector<double> xhat(m * c), out(m * c);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mu[j]) * inv_std[j];
      out[i * c + j] = gamma.data()[j] * xhat[i * c + j] + beta.data()[j];
    }
  const bool batch_stats = mode == Mode::kTrain;
  return detail::make_result(
      "batch_norm_1d", x.shape(), std::move(out), {x, gamma, beta},
      [m, c, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& go = self.grad;
        const auto& gam = self.inputs[1]->data;
        if (auto* g = detail::input_grad(self, 1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) (*g)[j] += go[i * c + j] * xhat[i * c + j];
        }
        if (auto* g = detail::input_grad(self, 2)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) (*g)[j] += go[i * c + j];
        }
        if (auto* g = detail::input_grad(self, 0)) {
          if (!batch_stats) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += go[i * c + j] * gam[j] * inv_std[j];
            return;
          }
          const double md = static_cast<double>(m);
          for (std::size_t j = 0; j < c; ++j) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              const double d = go[i * c + j] * gam[j];
              sum_d += d;
              sum_dx += d * xhat[i * c + j];
            }
            for (std::size_t i = 0; i < m; ++i) {
              const double d = go[i * c + j] * gam[j];
              (*g)[i * c + j] += inv_std[j] / md * (md * d - sum_d - xhat[i * c + j] * sum_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation and pooling

// Per-channel mean of t[C×H×W] over rows [row_begin, row_end) and all columns.
inline Tensor mean_over_region(const Tensor& t, std::size_t row_begin, std::size_t row_end) {
  if (t.rank() != 3) raise<DimensionError>("mean_over_region: expected C×H×W, got ", shape_str(t.shape()));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (row_begin >= row_end || row_end > h) {
    raise<DimensionError>("mean_over_region: rows [", row_begin, ", ", row_end, ") outside height ", h);
  }
  const double inv_count = 1.0 / static_cast<double>((row_end - row_begin) * w);
  std::vector<double> out(c, 0.0);
  auto x = t.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t y = row_begin; y < row_end; ++y)
      for (std::size_t col = 0; col < w; ++col) acc += x[(ch * h + y) * w + col];
    out[ch] = acc * inv_count;
  }
  return detail::make_result("mean_over_region", {c}, std::move(out), {t},
                             [=](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const double v = self.grad[ch] * inv_count;
                                   for (std::size_t y = row_begin; y < row_end; ++y)
                                     for (std::size_t col = 0; col < w; ++col) (*g)[(ch * h + y) * w + col] += v;
                                 }
                               }
                             });
}

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    raise<DimensionError>("reshape: cannot view ", shape_str(t.shape()), " as ", shape_str(shape));
  }
  std::vector<double> out(t.data().begin(), t.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {t}, [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

// Joins tensors along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) raise<ContractError>("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) raise<DimensionError>("concat: axis ", axis, " out of range for ", shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) raise<DimensionError>("concat: shape ", shape_str(s), " incompatible with ", shape_str(ref));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = total * inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    offset += widths[k];
  }
  return detail::make_result("concat", std::move(out_shape), std::move(out), parts,
                             [outer, row, widths](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 if (auto* g = detail::input_grad(self, k)) {
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < widths[k]; ++i)
                                       (*g)[o * widths[k] + i] += self.grad[o * row + offset + i];
                                 }
                                 offset += widths[k];
                               }
                             });
}

// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) raise<ContractError>("stack: no inputs");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape()) {
      raise<DimensionError>("stack: shape ", shape_str(p.shape()), " differs from ",
                            shape_str(parts.front().shape()));
    }
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, std::move(s)));
  }
  return concat(lifted, 0);
}

// Contiguous range [begin, end) along `axis`; rank is preserved.
inline Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = t.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    raise<DimensionError>("slice: range [", begin, ", ", end, ") on axis ", axis, " invalid for ",
                          shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t extent = s[axis], width = (end - begin) * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * width);
  auto x = t.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + (o * extent + begin) * inner, width, out.begin() + o * width);
  return detail::make_result("slice", std::move(out_shape), std::move(out), {t},
                             [=](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < width; ++i)
                                     (*g)[(o * extent + begin) * inner + i] += self.grad[o * width + i];
                               }
                             });
}

// Slice at `index` along `axis`, dropping that axis.
inline Tensor select(const Tensor& t, std::size_t axis, std::size_t index) {
  const Shape& s = t.shape();
  if (axis >= s.size() || index >= s[axis]) {
    raise<DimensionError>("select: index ", index, " on axis ", axis, " out of range for ", shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner);
  auto x = t.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + (o * extent + index) * inner, inner, out.begin() + o * inner);
  return detail::make_result("select", std::move(out_shape), std::move(out), {t},
                             [=](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < inner; ++i)
                                     (*g)[(o * extent + index) * inner + i] += self.grad[o * inner + i];
                               }
                             });
}

}  // namespace mros
