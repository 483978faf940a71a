// Copyright 2026 The salign Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode automatic differentiation over dense row-major double
// matrices. The graph is built eagerly: every op computes its value
// immediately and, when gradients are enabled and any input requires one,
// records a closure that propagates the output gradient to its inputs.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "salign/error.hpp"
#include "salign/rng.hpp"

namespace salign {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
/// Validity mask over the time axis: true = real position, false = padding.
using Mask = std::vector<bool>;

inline std::size_t count_valid(const Mask& mask) {
  std::size_t n = 0;
  for (bool b : mask) n += b ? 1 : 0;
  return n;
}

/// A trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Parameter* param = nullptr;

  void accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  /// Gradient after backward(); a zero matrix when none reached this node.
  Matrix grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

/// Differentiable input that is not a parameter (gradient checks, probes).
inline Var leaf(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

/// Live view of a parameter: gradients flow back into `p.grad`.
inline Var param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->value = p.value;
  n->requires_grad = true;
  n->param = &p;
  return Var(std::move(n));
}

/// Same value, cut from the graph.
inline Var detach(const Var& v) { return constant(v.value()); }

inline Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const auto& in : inputs) n->parents.push_back(in.node());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

/// Backpropagates from a 1x1 root. Parameter gradients are added to
/// Parameter::grad; other leaves keep theirs on the node.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad.resize(0, 0);
  root.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (n->param) {
      if (n->param->grad.size() == 0) n->param->zero_grad();
      n->param->grad += n->grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear ops

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    n.parent(0).accumulate(n.grad);
    n.parent(1).accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
    n.parent(0).accumulate(n.grad);
    n.parent(1).accumulate(-n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    n.parent(0).accumulate(n.grad.cwiseProduct(n.parent(1).value));
    n.parent(1).accumulate(n.grad.cwiseProduct(n.parent(0).value));
  });
}

inline Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& n) { n.parent(0).accumulate(n.grad * s); });
}

/// x [T x c] plus a broadcast row b [1 x c].
inline Var add_row(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix out = x.value();
  out.rowwise() += b.value().row(0);
  return make_op(std::move(out), {x, b}, [](Node& n) {
    n.parent(0).accumulate(n.grad);
    n.parent(1).accumulate(n.grad.colwise().sum());
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return make_op(a.value().lazyProduct(b.value()), {a, b}, [](Node& n) {
    if (n.parent(0).requires_grad) n.parent(0).accumulate(n.grad * n.parent(1).value.transpose());
    if (n.parent(1).requires_grad) n.parent(1).accumulate(n.parent(0).value.transpose() * n.grad);
  });
}

/// a * b^T.
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  return make_op(a.value().lazyProduct(b.value().transpose()), {a, b}, [](Node& n) {
    if (n.parent(0).requires_grad) n.parent(0).accumulate(n.grad * n.parent(1).value);
    if (n.parent(1).requires_grad) n.parent(1).accumulate(n.grad.transpose() * n.parent(0).value);
  });
}

inline Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a}, [](Node& n) { n.parent(0).accumulate(n.grad.transpose()); });
}

inline Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    const Matrix& x = n.parent(0).value;
    n.parent(0).accumulate(Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
  });
}

/// Weighted sum of 1x1 terms.
inline Var weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
  double total = 0.0;
  std::vector<Var> inputs;
  std::vector<double> weights;
  for (const auto& [v, w] : terms) {
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    total += w * v.item();
    inputs.push_back(v);
    weights.push_back(w);
  }
  return make_op(Matrix::Constant(1, 1, total), inputs, [weights](Node& n) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      n.parent(i).accumulate(Matrix::Constant(1, 1, weights[i] * n.grad(0, 0)));
    }
  });
}

inline Var sigmoid(const Var& x) {
  Matrix y = x.value().unaryExpr([](double v) {
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
  return make_op(y, {x}, [](Node& n) {
    const Matrix& y = n.value;
    n.parent(0).accumulate(n.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace detail

/// tanh-approximated GELU.
inline Var gelu(const Var& x) {
  Matrix y = x.value().unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v)));
  });
  return make_op(y, {x}, [](Node& n) {
    const Matrix& x = n.parent(0).value;
    Matrix d = x.unaryExpr([](double v) {
      double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
      double t = std::tanh(u);
      double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    n.parent(0).accumulate(n.grad.cwiseProduct(d));
  });
}

/// log(max(p, eps)) with zero gradient where the clamp is active.
inline Var log_clamped(const Var& p, double eps) {
  Matrix y = p.value().unaryExpr([eps](double v) { return std::log(std::max(v, eps)); });
  return make_op(y, {p}, [eps](Node& n) {
    Matrix d = n.parent(0).value.unaryExpr([eps](double v) { return v > eps ? 1.0 / v : 0.0; });
    n.parent(0).accumulate(n.grad.cwiseProduct(d));
  });
}

/// log(max(1 - p, eps)) with zero gradient where the clamp is active.
inline Var log1m_clamped(const Var& p, double eps) {
  Matrix y = p.value().unaryExpr([eps](double v) { return std::log(std::max(1.0 - v, eps)); });
  return make_op(y, {p}, [eps](Node& n) {
    Matrix d = n.parent(0).value.unaryExpr([eps](double v) { return 1.0 - v > eps ? -1.0 / (1.0 - v) : 0.0; });
    n.parent(0).accumulate(n.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Row-structured ops

inline Matrix log_softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  return y;
}

inline Var log_softmax_rows(const Var& x) {
  return make_op(log_softmax_rows_value(x.value()), {x}, [](Node& n) {
    Matrix p = n.value.array().exp();
    Matrix gsum = n.grad.rowwise().sum();
    Matrix g = n.grad;
    for (Index r = 0; r < g.rows(); ++r) g.row(r) -= p.row(r) * gsum(r, 0);
    n.parent(0).accumulate(g);
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Matrix& xv = x.value();
  const Index rows = xv.rows(), cols = xv.cols();
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return make_op(std::move(y), {x, gamma, beta}, [xhat, inv_std](Node& n) {
    const Matrix& g = n.grad;
    const auto& gam = n.parent(1).value;
    if (n.parent(0).requires_grad) {
      Matrix dxhat = g;
      dxhat.array().rowwise() *= gam.row(0).array();
      Matrix dx(g.rows(), g.cols());
      for (Index r = 0; r < g.rows(); ++r) {
        double m1 = dxhat.row(r).mean();
        double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
      }
      n.parent(0).accumulate(dx);
    }
    n.parent(1).accumulate(g.cwiseProduct(xhat).colwise().sum());
    n.parent(2).accumulate(g.colwise().sum());
  });
}

/// Inverted dropout; identity when rate is zero.
inline Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  Matrix keep(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() >= rate ? s : 0.0;
  return make_op(x.value().cwiseProduct(keep), {x}, [keep](Node& n) {
    n.parent(0).accumulate(n.grad.cwiseProduct(keep));
  });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(const Var& table, std::span<const int> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op(std::move(out), {table}, [idx](Node& n) {
    Matrix g = Matrix::Zero(n.parent(0).value.rows(), n.parent(0).value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Index>(i));
    n.parent(0).accumulate(g);
  });
}

/// Masked rows replaced by zeros. Selection, not multiplication, so
/// non-finite padding never leaks.
inline Var mask_rows(const Var& x, const Mask& mask) {
  if (static_cast<Index>(mask.size()) != x.rows()) throw ShapeError("mask_rows: mask length mismatch");
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    if (mask[static_cast<std::size_t>(r)]) out.row(r) = x.value().row(r);
  return make_op(std::move(out), {x}, [mask](Node& n) {
    Matrix g = n.grad;
    for (Index r = 0; r < g.rows(); ++r)
      if (!mask[static_cast<std::size_t>(r)]) g.row(r).setZero();
    n.parent(0).accumulate(g);
  });
}

/// Mean over unmasked rows -> [1 x c].
inline Var masked_mean_rows(const Var& x, const Mask& mask) {
  if (static_cast<Index>(mask.size()) != x.rows()) throw ShapeError("masked_mean_rows: mask length mismatch");
  const std::size_t n_valid = count_valid(mask);
  if (n_valid == 0) throw EmptyInputError("masked_mean_rows: every position is masked");
  Matrix out = Matrix::Zero(1, x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    if (mask[static_cast<std::size_t>(r)]) out.row(0) += x.value().row(r);
  const double inv = 1.0 / static_cast<double>(n_valid);
  out *= inv;
  return make_op(std::move(out), {x}, [mask, inv](Node& n) {
    Matrix g = Matrix::Zero(n.parent(0).value.rows(), n.parent(0).value.cols());
    for (Index r = 0; r < g.rows(); ++r)
      if (mask[static_cast<std::size_t>(r)]) g.row(r) = n.grad.row(0) * inv;
    n.parent(0).accumulate(g);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(out), parts, [](Node& n) {
    Index at = 0;
    for (auto& p : n.parents) {
      const Index r = p->value.rows();
      p->accumulate(n.grad.middleRows(at, r));
      at += r;
    }
  });
}

/// Time unfolding for strided 1-D convolution. Output row t holds input rows
/// stride*t - pad + k for k in [0, kernel), concatenated; rows outside the
/// sequence or masked are read as zeros.
inline Var unfold_time(const Var& x, const Mask& mask, int kernel, int stride, int pad) {
  if (static_cast<Index>(mask.size()) != x.rows()) throw ShapeError("unfold_time: mask length mismatch");
  const Index t_in = x.rows(), c = x.cols();
  const Index t_out = (t_in + 2 * pad - kernel) / stride + 1;
  Matrix out = Matrix::Zero(std::max<Index>(t_out, 0), c * kernel);
  for (Index t = 0; t < t_out; ++t) {
    for (int k = 0; k < kernel; ++k) {
      Index src = stride * t - pad + k;
      if (src < 0 || src >= t_in || !mask[static_cast<std::size_t>(src)]) continue;
      out.block(t, k * c, 1, c) = x.value().row(src);
    }
  }
  return make_op(std::move(out), {x}, [mask, kernel, stride, pad](Node& n) {
    const Index t_in = n.parent(0).value.rows(), c = n.parent(0).value.cols();
    Matrix g = Matrix::Zero(t_in, c);
    for (Index t = 0; t < n.grad.rows(); ++t) {
      for (int k = 0; k < kernel; ++k) {
        Index src = stride * t - pad + k;
        if (src < 0 || src >= t_in || !mask[static_cast<std::size_t>(src)]) continue;
        g.row(src) += n.grad.block(t, k * c, 1, c);
      }
    }
    n.parent(0).accumulate(g);
  });
}

/// Multi-head scaled dot-product attention with the head split done inside
/// one node. Masked keys receive no weight and are never read; masked query
/// rows produce zeros. With `causal`, query i attends to keys j <= i.
inline Var attention(const Var& q, const Var& k, const Var& v, const Mask& key_mask, const Mask& query_mask,
                     bool causal, int heads) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols()) throw ShapeError("attention: shape mismatch");
  if (static_cast<Index>(key_mask.size()) != k.rows() || static_cast<Index>(query_mask.size()) != q.rows())
    throw ShapeError("attention: mask length mismatch");
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: model width not divisible by head count");
  const Index dh = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Index> keys;
  for (Index j = 0; j < k.rows(); ++j)
    if (key_mask[static_cast<std::size_t>(j)]) keys.push_back(j);
  const Index nk = static_cast<Index>(keys.size());
  const Index tq = q.rows();

  Matrix kv(nk, d), vv(nk, d);
  for (Index j = 0; j < nk; ++j) {
    kv.row(j) = k.value().row(keys[j]);
    vv.row(j) = v.value().row(keys[j]);
  }
  auto probs = std::make_shared<std::vector<Matrix>>(heads);
  Matrix out = Matrix::Zero(tq, d);
  for (int h = 0; h < heads; ++h) {
    Matrix s = q.value().middleCols(h * dh, dh).lazyProduct(kv.middleCols(h * dh, dh).transpose()) * scale_f;
    Matrix a = Matrix::Zero(tq, nk);
    for (Index i = 0; i < tq; ++i) {
      if (!query_mask[static_cast<std::size_t>(i)]) continue;
      double m = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < nk; ++j)
        if (!causal || keys[j] <= i) m = std::max(m, s(i, j));
      if (!std::isfinite(m)) continue;
      double z = 0.0;
      for (Index j = 0; j < nk; ++j) {
        if (causal && keys[j] > i) continue;
        a(i, j) = std::exp(s(i, j) - m);
        z += a(i, j);
      }
      a.row(i) /= z;
    }
    out.middleCols(h * dh, dh) = a.lazyProduct(vv.middleCols(h * dh, dh));
    (*probs)[h] = std::move(a);
  }
  return make_op(std::move(out), {q, k, v}, [probs, keys, kv, vv, heads, dh, scale_f](Node& n) {
    const Index tq = n.grad.rows(), d = n.grad.cols();
    const Index nk = static_cast<Index>(keys.size());
    const Matrix& qv = n.parent(0).value;
    Matrix dq = Matrix::Zero(tq, d);
    Matrix dk = Matrix::Zero(nk, d), dv = Matrix::Zero(nk, d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& a = (*probs)[h];
      Matrix go = n.grad.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = a.transpose() * go;
      Matrix da = go * vv.middleCols(h * dh, dh).transpose();
      Matrix ds = a.cwiseProduct(da);
      Eigen::VectorXd rs = ds.rowwise().sum();
      for (Index i = 0; i < tq; ++i) ds.row(i) -= a.row(i) * rs(i);
      dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh) * scale_f;
      dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh) * scale_f;
    }
    n.parent(0).accumulate(dq);
    if (n.parent(1).requires_grad) {
      Matrix g = Matrix::Zero(n.parent(1).value.rows(), d);
      for (Index j = 0; j < nk; ++j) g.row(keys[j]) += dk.row(j);
      n.parent(1).accumulate(g);
    }
    if (n.parent(2).requires_grad) {
      Matrix g = Matrix::Zero(n.parent(2).value.rows(), d);
      for (Index j = 0; j < nk; ++j) g.row(keys[j]) += dv.row(j);
      n.parent(2).accumulate(g);
    }
  });
}

/// Rows scaled to unit L2 norm (norms floored at eps).
inline Var normalize_rows(const Var& x, double eps = 1e-12) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm().cwiseMax(eps);
  Matrix y = xv;
  for (Index r = 0; r < y.rows(); ++r) y.row(r) /= norms(r);
  return make_op(y, {x}, [norms](Node& n) {
    const Matrix& y = n.value;
    Matrix g(n.grad.rows(), n.grad.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      double dot = n.grad.row(r).dot(y.row(r));
      g.row(r) = (n.grad.row(r) - y.row(r) * dot) / norms(r);
    }
    n.parent(0).accumulate(g);
  });
}

/// Sum of x(r, c) over the listed coordinates -> [1 x 1].
inline Var pick_sum(const Var& x, const std::vector<std::pair<Index, Index>>& coords) {
  double s = 0.0;
  for (auto [r, c] : coords) s += x.value()(r, c);
  return make_op(Matrix::Constant(1, 1, s), {x}, [coords](Node& n) {
    Matrix g = Matrix::Zero(n.parent(0).value.rows(), n.parent(0).value.cols());
    for (auto [r, c] : coords) g(r, c) += n.grad(0, 0);
    n.parent(0).accumulate(g);
  });
}

}  // namespace ag
}  // namespace salign
