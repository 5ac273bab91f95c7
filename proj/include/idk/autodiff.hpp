#pragma once

// Small dense reverse-mode autodiff over row-major double tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their parents and a
// backward closure while grad mode is on and some input requires a gradient.
// Tensor::backward() on a scalar runs the closures in reverse topological
// order and then releases the recorded graph.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "idk/error.hpp"
#include "idk/objective.hpp"

namespace idk::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline thread_local bool grad_enabled = true;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool released = false;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->value.assign(numel_of(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    IDK_CHECK(numel_of(shape) == values.size(), "Tensor: value count does not match shape");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  double item() const {
    IDK_CHECK(numel() == 1, "Tensor::item on a non-scalar tensor");
    return node_->value[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Back-propagates d(this)/d(leaf) into every reachable leaf that requires
  /// a gradient. A tensor that does not require grad is a constant: nothing
  /// reachable changes.
  void backward() {
    IDK_CHECK(defined(), "backward: no forward pass recorded");
    IDK_CHECK(numel() == 1, "backward: loss must be a scalar");
    IDK_CHECK(!node_->released, "backward: graph already consumed; run forward again");
    if (!node_->requires_grad) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (auto* n : order) n->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
    for (auto* n : order) {
      if (n->backward_fn) {
        n->backward_fn = nullptr;
        n->parents.clear();
        n->released = true;
      }
    }
  }

  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape, std::vector<Tensor>, std::function<void(detail::Node&)>);
  friend Tensor make_result_values(Shape, std::vector<double>, std::vector<Tensor>,
                                   std::function<void(detail::Node&)>);

  detail::NodePtr node_;
};

/// Creates an op output. The closure is kept only when some input needs a
/// gradient and grad mode is enabled.
inline Tensor make_result_values(Shape shape, std::vector<double> values,
                                 std::vector<Tensor> inputs,
                                 std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  bool needs = false;
  if (detail::grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node_);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result(Shape shape, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward_fn) {
  std::vector<double> v(numel_of(shape), 0.0);
  return make_result_values(std::move(shape), std::move(v), std::move(inputs),
                            std::move(backward_fn));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_matrix(const Tensor& t, const char* op) {
  IDK_CHECK(t.shape().size() == 2, std::string(op) + ": expected a 2-D tensor");
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Tensor add(const Tensor& a, const Tensor& b) {
  IDK_CHECK(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return make_result_values(a.shape(), std::move(v), {a, b}, [](detail::Node& out) {
    for (auto& p : out.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < out.grad.size(); ++i) p->grad[i] += out.grad[i];
    }
  });
}

/// x[n, d] + bias[d] broadcast over rows.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_rowwise");
  const std::size_t n = x.dim(0), d = x.dim(1);
  IDK_CHECK(bias.numel() == d, "add_rowwise: bias length mismatch");
  std::vector<double> v(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = x.values()[r * d + c] + bias.values()[c];
  return make_result_values(x.shape(), std::move(v), {x, bias}, [n, d](detail::Node& out) {
    auto& px = *out.parents[0];
    auto& pb = *out.parents[1];
    if (px.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) px.grad[i] += out.grad[i];
    if (pb.requires_grad)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) pb.grad[c] += out.grad[r * d + c];
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * x.values()[i];
  return make_result_values(x.shape(), std::move(v), {x}, [c](detail::Node& out) {
    auto& p = *out.parents[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i) p.grad[i] += c * out.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result_values({1}, {s}, {x}, [](detail::Node& out) {
    auto& p = *out.parents[0];
    for (double& g : p.grad) g += out.grad[0];
  });
}

/// Σ w_i x_i with constant weights.
inline Tensor weighted_sum(const Tensor& x, std::vector<double> weights) {
  IDK_CHECK(weights.size() == x.numel(), "weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.values()[i];
  return make_result_values({1}, {s}, {x}, [w = std::move(weights)](detail::Node& out) {
    auto& p = *out.parents[0];
    for (std::size_t i = 0; i < w.size(); ++i) p.grad[i] += w[i] * out.grad[0];
  });
}

/// Scalar whose value and gradient with respect to `logits` were computed
/// outside the graph (the objective's analytic gradient).
inline Tensor attach_loss(const Tensor& logits, double value, std::vector<double> dvalue) {
  IDK_CHECK(dvalue.size() == logits.numel(), "attach_loss: gradient length mismatch");
  return make_result_values({1}, {value}, {logits}, [g = std::move(dvalue)](detail::Node& out) {
    auto& p = *out.parents[0];
    for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] * out.grad[0];
  });
}

inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gelu_value(x.values()[i]);
  return make_result_values(x.shape(), std::move(v), {x}, [](detail::Node& out) {
    auto& p = *out.parents[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      p.grad[i] += out.grad[i] * gelu_derivative(p.value[i]);
  });
}

// ---------------------------------------------------------------------------
// Matrix ops

/// a[n, k] * b[k, m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  IDK_CHECK(b.dim(0) == k, "matmul: inner dimension mismatch");
  std::vector<double> v(n * m);
  as_matrix(v, n, m).noalias() = as_matrix(a.node().value, n, k) * as_matrix(b.node().value, k, m);
  return make_result_values({n, m}, std::move(v), {a, b}, [n, k, m](detail::Node& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    const auto dc = as_matrix(out.grad, n, m);
    if (pa.requires_grad)
      as_matrix(pa.grad, n, k).noalias() += dc * as_matrix(pb.value, k, m).transpose();
    if (pb.requires_grad)
      as_matrix(pb.grad, k, m).noalias() += as_matrix(pa.value, n, k).transpose() * dc;
  });
}

/// a[n, k] * b[m, k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  IDK_CHECK(b.dim(1) == k, "matmul_nt: inner dimension mismatch");
  std::vector<double> v(n * m);
  as_matrix(v, n, m).noalias() =
      as_matrix(a.node().value, n, k) * as_matrix(b.node().value, m, k).transpose();
  return make_result_values({n, m}, std::move(v), {a, b}, [n, k, m](detail::Node& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    const auto dc = as_matrix(out.grad, n, m);
    if (pa.requires_grad) as_matrix(pa.grad, n, k).noalias() += dc * as_matrix(pb.value, m, k);
    if (pb.requires_grad)
      as_matrix(pb.grad, m, k).noalias() += dc.transpose() * as_matrix(pa.value, n, k);
  });
}

/// Gathers rows of table[V, d] for each id.
inline Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<TokenId> idx(ids.begin(), ids.end());
  const std::size_t n = idx.size();
  std::vector<double> v(n * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    IDK_CHECK(idx[r] < vocab, "embedding: token id out of range");
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                v.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return make_result_values({n, d}, std::move(v), {table},
                            [idx = std::move(idx), d](detail::Node& out) {
                              auto& p = *out.parents[0];
                              for (std::size_t r = 0; r < idx.size(); ++r)
                                for (std::size_t c = 0; c < d; ++c)
                                  p.grad[idx[r] * d + c] += out.grad[r * d + c];
                            });
}

/// Row-wise layer normalization with affine gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  IDK_CHECK(gamma.numel() == d && beta.numel() == d, "layer_norm: parameter length mismatch");
  std::vector<double> v(n * d), xhat(n * d), rstd(n);
  const auto xs = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xs[r * d + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = xs[r * d + c] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xs[r * d + c] - mean) * rstd[r];
      v[r * d + c] = xhat[r * d + c] * gamma.values()[c] + beta.values()[c];
    }
  }
  return make_result_values(
      x.shape(), std::move(v), {x, gamma, beta},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& out) {
        auto& px = *out.parents[0];
        auto& pg = *out.parents[1];
        auto& pb = *out.parents[2];
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
          const double* dy = &out.grad[r * d];
          const double* xh = &xhat[r * d];
          if (pg.requires_grad)
            for (std::size_t c = 0; c < d; ++c) pg.grad[c] += dy[c] * xh[c];
          if (pb.requires_grad)
            for (std::size_t c = 0; c < d; ++c) pb.grad[c] += dy[c];
          if (!px.requires_grad) continue;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = dy[c] * pg.value[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            px.grad[r * d + c] += rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
      });
}

/// Row-wise softmax of x[n, m].
inline Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> v(n * m);
  for (std::size_t r = 0; r < n; ++r)
    kernels::softmax_into(x.values().subspan(r * m, m), std::span<double>(v).subspan(r * m, m));
  return make_result_values(x.shape(), std::move(v), {x}, [n, m](detail::Node& out) {
    auto& p = *out.parents[0];
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = &out.value[r * m];
      const double* dy = &out.grad[r * m];
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += y[c] * dy[c];
      for (std::size_t c = 0; c < m; ++c) p.grad[r * m + c] += y[c] * (dy[c] - dot);
    }
  });
}

/// Multi-head causal self-attention. `qkv` is [batch * seq, 3 * d] holding the
/// query, key and value projections side by side; the result is [batch * seq, d]
/// with heads concatenated. Position t attends to positions <= t of its own row.
inline Tensor causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq,
                               std::size_t heads) {
  require_matrix(qkv, "causal_attention");
  IDK_CHECK(qkv.dim(0) == batch * seq, "causal_attention: row count mismatch");
  IDK_CHECK(qkv.dim(1) % 3 == 0, "causal_attention: width must be 3 * d");
  const std::size_t d = qkv.dim(1) / 3;
  IDK_CHECK(heads > 0 && d % heads == 0, "causal_attention: d must be divisible by heads");
  const std::size_t hd = d / heads;
  const std::size_t stride = 3 * d;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto in = qkv.values();

  // probs[(b * heads + h) * seq * seq + t * seq + s], zero above the diagonal
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> v(batch * seq * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = &probs[(b * heads + h) * seq * seq];
      for (std::size_t t = 0; t < seq; ++t) {
        const double* q = &in[(b * seq + t) * stride + h * hd];
        double mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* k = &in[(b * seq + s) * stride + d + h * hd];
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q[c] * k[c];
          P[t * seq + s] = dot * sc;
          mx = std::max(mx, P[t * seq + s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          P[t * seq + s] = std::exp(P[t * seq + s] - mx);
          z += P[t * seq + s];
        }
        double* o = &v[(b * seq + t) * d + h * hd];
        for (std::size_t s = 0; s <= t; ++s) {
          P[t * seq + s] /= z;
          const double* val = &in[(b * seq + s) * stride + 2 * d + h * hd];
          for (std::size_t c = 0; c < hd; ++c) o[c] += P[t * seq + s] * val[c];
        }
      }
    }
  }
  return make_result_values(
      {batch * seq, d}, std::move(v), {qkv},
      [batch, seq, heads, d, hd, stride, sc, probs = std::move(probs)](detail::Node& out) {
        auto& p = *out.parents[0];
        const auto& x = p.value;
        auto& gx = p.grad;
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = &probs[(b * heads + h) * seq * seq];
            for (std::size_t t = 0; t < seq; ++t) {
              const double* dout = &out.grad[(b * seq + t) * d + h * hd];
              double weighted = 0.0;
              for (std::size_t s = 0; s <= t; ++s) {
                const std::size_t vrow = (b * seq + s) * stride + 2 * d + h * hd;
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                  dot += dout[c] * x[vrow + c];
                  gx[vrow + c] += P[t * seq + s] * dout[c];
                }
                dp[s] = dot;
                weighted += P[t * seq + s] * dot;
              }
              const std::size_t qrow = (b * seq + t) * stride + h * hd;
              for (std::size_t s = 0; s <= t; ++s) {
                const double ds = P[t * seq + s] * (dp[s] - weighted) * sc;
                const std::size_t krow = (b * seq + s) * stride + d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  gx[qrow + c] += ds * x[krow + c];
                  gx[krow + c] += ds * x[qrow + c];
                }
              }
            }
          }
        }
      });
}

}  // namespace idk::ad
