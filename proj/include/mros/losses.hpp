#pragma once

// Metric and classification losses:
//   batch-hard triplet on descriptors, center loss with its own update rule,
//   label-smoothed cross-entropy per stripe, and their weighted sum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mros/error.hpp"
#include "mros/tensor.hpp"

namespace mros {

struct LossWeights {
  double alpha = 0.3;     // triplet margin
  double beta = 0.0005;   // center-loss weight
  double epsilon = 0.1;   // label-smoothing mass
};

struct BatchShape {
  std::size_t p = 0;  // distinct identities
  std::size_t k = 0;  // samples per identity
};

// Checks the P×K structure of `labels`: P distinct labels, each exactly K times.
inline BatchShape check_pk_labels(std::span<const int> labels) {
  if (labels.empty()) raise<ContractError>("empty batch: K < 1");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  const std::size_t k = counts.begin()->second;
  for (const auto& [label, n] : counts) {
    if (n != k) {
      raise<ContractError>("batch is not P×K: label ", label, " appears ", n, " times, expected ", k);
    }
  }
  if (counts.size() < 2) {
    raise<ContractError>("degenerate batch: P=", counts.size(), " identity, need P >= 2 for negatives");
  }
  return {counts.size(), k};
}

inline void check_rows(const Tensor& g, std::size_t n, const char* what) {
  if (g.rank() != 2 || g.dim(0) != n) {
    raise<DimensionError>(what, ": expected ", n, " embedding rows, got shape ", shape_str(g.shape()));
  }
}

// Euclidean distance between rows i and j of a row-major m×d buffer.
inline double row_distance(std::span<const double> x, std::size_t d, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = x[i * d + c] - x[j * d + c];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

// Sum over every anchor of [alpha + max_pos d(a,p) - min_neg d(a,n)]_+.
// The positive set includes the anchor itself. Ties pick the first index.
inline Tensor triplet_batch_hard(const Tensor& g, std::span<const int> labels, double alpha) {
  check_rows(g, labels.size(), "triplet_batch_hard");
  check_pk_labels(labels);
  const std::size_t m = g.dim(0), d = g.dim(1);
  auto x = g.data();
  struct Active {
    std::size_t anchor, pos, neg;
    double dp, dn;
  };
  std::vector<Active> active;
  double total = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    std::size_t pos = a, neg = m;
    double dp = -1.0, dn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      const double dist = row_distance(x, d, a, j);
      if (labels[j] == labels[a]) {
        if (dist > dp) dp = dist, pos = j;
      } else if (dist < dn) {
        dn = dist, neg = j;
      }
    }
    const double term = alpha + dp - dn;
    if (term > 0.0) {
      total += term;
      active.push_back({a, pos, neg, dp, dn});
    }
  }
  return detail::make_result("triplet_batch_hard", {}, {total}, {g},
                             [d, active = std::move(active)](detail::Node& self) {
                               auto* grad = detail::input_grad(self, 0);
                               if (!grad) return;
                               const auto& x = self.inputs[0]->data;
                               const double up = self.grad[0];
                               for (const auto& t : active) {
                                 // d||a-p||/da = (a-p)/||a-p||; zero distance contributes nothing.
                                 if (t.dp > 0.0) {
                                   for (std::size_t c = 0; c < d; ++c) {
                                     const double u = up * (x[t.anchor * d + c] - x[t.pos * d + c]) / t.dp;
                                     (*grad)[t.anchor * d + c] += u;
                                     (*grad)[t.pos * d + c] -= u;
                                   }
                                 }
                                 if (t.dn > 0.0) {
                                   for (std::size_t c = 0; c < d; ++c) {
                                     const double u = up * (x[t.anchor * d + c] - x[t.neg * d + c]) / t.dn;
                                     (*grad)[t.anchor * d + c] -= u;
                                     (*grad)[t.neg * d + c] += u;
                                   }
                                 }
                               }
                             });
}

// One center row per training identity, moved by update_centers rather than
// by gradient descent.
struct ClassCenters {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  double update_rate = 0.5;
  std::vector<double> values;  // num_classes × dim

  static ClassCenters zeros(std::size_t num_classes, std::size_t dim, double update_rate = 0.5) {
    return {num_classes, dim, update_rate, std::vector<double>(num_classes * dim, 0.0)};
  }

  std::span<const double> row(std::size_t c) const { return {values.data() + c * dim, dim}; }
  std::span<double> row(std::size_t c) { return {values.data() + c * dim, dim}; }

  void check_label(int y) const {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      raise<ContractError>("no center for label ", y, " (", num_classes, " classes)");
    }
  }
};

// ½ Σ_i ||G_i - c_{y_i}||². Gradient flows to G only.
inline Tensor center_loss(const Tensor& g, std::span<const int> labels, const ClassCenters& centers) {
  check_rows(g, labels.size(), "center_loss");
  if (g.dim(1) != centers.dim) {
    raise<DimensionError>("center_loss: embedding width ", g.dim(1), " vs center width ", centers.dim);
  }
  for (int y : labels) centers.check_label(y);
  const std::size_t m = g.dim(0), d = g.dim(1);
  auto x = g.data();
  std::vector<double> diff(m * d);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    auto c = centers.row(static_cast<std::size_t>(labels[i]));
    for (std::size_t j = 0; j < d; ++j) {
      diff[i * d + j] = x[i * d + j] - c[j];
      total += diff[i * d + j] * diff[i * d + j];
    }
  }
  return detail::make_result("center_loss", {}, {0.5 * total}, {g},
                             [diff = std::move(diff)](detail::Node& self) {
                               if (auto* grad = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < diff.size(); ++i) (*grad)[i] += self.grad[0] * diff[i];
                               }
                             });
}

// c_j <- c_j - rate · Σ_{i: y_i=j} (c_j - G_i) / (1 + n_j) for classes present
// in the batch; other centers are untouched.
inline void update_centers(const Tensor& g, std::span<const int> labels, ClassCenters& centers) {
  check_rows(g, labels.size(), "update_centers");
  if (g.dim(1) != centers.dim) {
    raise<DimensionError>("update_centers: embedding width ", g.dim(1), " vs center width ", centers.dim);
  }
  for (int y : labels) centers.check_label(y);
  const std::size_t d = centers.dim;
  auto x = g.data();
  std::map<int, std::pair<std::vector<double>, std::size_t>> delta;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [acc, count] = delta[labels[i]];
    if (acc.empty()) acc.assign(d, 0.0);
    auto c = centers.row(static_cast<std::size_t>(labels[i]));
    for (std::size_t j = 0; j < d; ++j) acc[j] += c[j] - x[i * d + j];
    ++count;
  }
  for (auto& [label, entry] : delta) {
    auto c = centers.row(static_cast<std::size_t>(label));
    const double denom = 1.0 + static_cast<double>(entry.second);
    for (std::size_t j = 0; j < d; ++j) c[j] -= centers.update_rate * entry.first[j] / denom;
  }
}

// Mean over the batch of -Σ_c q(c) log softmax(z)_c with
// q = (1-eps)·onehot(label) + eps/C.
inline Tensor cross_entropy_ls(const Tensor& logits, std::span<const int> labels, double epsilon) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    raise<DimensionError>("cross_entropy_ls: logits ", shape_str(logits.shape()), " for ", labels.size(),
                          " labels");
  }
  if (epsilon < 0.0 || epsilon >= 1.0) raise<ContractError>("label smoothing epsilon ", epsilon, " not in [0,1)");
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (c < 2) raise<ContractError>("cross_entropy_ls: need at least 2 classes");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) raise<ContractError>("label ", y, " out of range [0, ", c, ")");
  }
  auto z = logits.data();
  const double off = epsilon / static_cast<double>(c), on = 1.0 - epsilon + off;
  std::vector<double> dz(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &z[i * c];
    const double mx = *std::max_element(row, row + c);
    double norm = 0.0;
    for (std::size_t j = 0; j < c; ++j) norm += std::exp(row[j] - mx);
    const double log_norm = std::log(norm);
    for (std::size_t j = 0; j < c; ++j) {
      const double log_p = row[j] - mx - log_norm;
      const double q = static_cast<std::size_t>(labels[i]) == j ? on : off;
      total -= q * log_p;
      dz[i * c + j] = (std::exp(log_p) - q) / static_cast<double>(m);
    }
  }
  return detail::make_result("cross_entropy_ls", {}, {total / static_cast<double>(m)}, {logits},
                             [dz = std::move(dz)](detail::Node& self) {
                               if (auto* grad = detail::input_grad(self, 0)) {
                                 for (std::size_t i = 0; i < dz.size(); ++i) (*grad)[i] += self.grad[0] * dz[i];
                               }
                             });
}

// Single-sample form: logits is a length-C vector.
inline Tensor cross_entropy_ls(const Tensor& logits, int label, double epsilon) {
  if (logits.rank() != 1) raise<DimensionError>("cross_entropy_ls: expected a logit vector, got ", shape_str(logits.shape()));
  const int labels[] = {label};
  return cross_entropy_ls(reshape(logits, {1, logits.dim(0)}), labels, epsilon);
}

// Arithmetic mean of the per-stripe batch cross-entropies.
inline Tensor total_cross_entropy(const std::vector<Tensor>& logit_sets, std::span<const int> labels,
                                  double epsilon, std::size_t expected_sets) {
  if (logit_sets.size() != expected_sets || logit_sets.empty()) {
    raise<ConfigError>("expected ", expected_sets, " stripe logit sets, got ", logit_sets.size());
  }
  Tensor acc = cross_entropy_ls(logit_sets[0], labels, epsilon);
  for (std::size_t k = 1; k < logit_sets.size(); ++k) acc = add(acc, cross_entropy_ls(logit_sets[k], labels, epsilon));
  return scale(acc, 1.0 / static_cast<double>(logit_sets.size()));
}

struct LossParts {
  Tensor triplet;
  Tensor center;
  Tensor cross;
};

// L = triplet + beta·center + cross.
inline Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  const std::pair<const char*, const Tensor*> named[] = {
      {"triplet", &parts.triplet}, {"center", &parts.center}, {"cross-entropy", &parts.cross}};
  for (const auto& [name, t] : named) {
    if (!t->defined() || t->numel() != 1) raise<ContractError>("loss part ", name, " is not a scalar");
    if (!std::isfinite(t->item())) raise<DivergenceError>("training diverged: ", name, " loss is ", t->item());
  }
  return add(add(parts.triplet, scale(parts.center, w.beta)), parts.cross);
}

}  // namespace mros
