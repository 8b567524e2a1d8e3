#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation: every op
// result keeps shared pointers to its inputs and a closure that pushes its
// gradient back into them. backward() orders the reachable nodes topologically
// and runs the closures in reverse.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "kestory/error.hpp"
#include "kestory/rng.hpp"
#include "kestory/tokenizer.hpp"

namespace kestory {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_string(shape) + " given " + std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  // In-place access for leaves owned by an optimizer or a loader.
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value.at(i); }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  // Copy of the values as a new leaf, disconnected from any graph.
  Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Wraps a freshly computed value; records the backward closure when any input
// takes gradients and recording is on.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->grad.assign(n->value.size(), 0.0);
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_string(t.shape()));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), m, n).noalias() = detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    detail::ConstMap g(self.grad.data(), m, n);
    if (an->requires_grad) {
      detail::MutMap(an->grad.data(), m, k).noalias() += g * detail::ConstMap(bn->value.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      detail::MutMap(bn->grad.data(), k, n).noalias() += detail::ConstMap(an->value.data(), m, k).transpose() * g;
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto an = a.node();
  return detail::make_result("transpose", {c, r}, std::move(out), {a}, [an, r, c](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  auto an = a.node();
  return detail::make_result("reshape", std::move(shape), an->value, {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

// x[m, n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  const auto m = x.dim(0), n = x.dim(1);
  if (bias.size() != n) throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " for " + shape_string(x.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  auto xn = x.node(), bn = bias.node();
  return detail::make_result("add_bias", x.shape(), std::move(out), {x, bias}, [xn, bn, m, n](Node& self) {
    if (xn->requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) bn->grad[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
      if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [an, c](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto an = a.node();
  return detail::make_result("sum", {}, {s}, {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    for (auto& g : an->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Column means of a [m, n] tensor, as [1, n].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank2(x, "mean_rows");
  const auto m = x.dim(0), n = x.dim(1);
  if (m == 0) throw ShapeError("mean_rows of an empty tensor");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return detail::make_result("mean_rows", {1, n}, std::move(out), {x}, [xn, m, n, inv](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += self.grad[j] * inv;
  });
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

// Exact GELU: x * Phi(x), Phi the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto an = a.node();
  return detail::make_result("gelu", a.shape(), std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

// Normalizes over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon = 1e-5) {
  if (x.rank() == 0) throw ShapeError("layer_norm of a scalar");
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias of size " + std::to_string(gain.size()) + "/" +
                     std::to_string(bias.size()) + " for last axis " + std::to_string(n));
  }
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gain.data()[j] + bias.data()[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * n;
          const double* xh = xhat.data() + r * n;
          if (gn->requires_grad || bn->requires_grad) {
            for (std::size_t j = 0; j < n; ++j) {
              if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
              if (bn->requires_grad) bn->grad[j] += g[j];
            }
          }
          if (!xn->requires_grad) continue;
          // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[j] * gn->value[j];
            m1 += d;
            m2 += d * xh[j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[j] * gn->value[j];
            xn->grad[r * n + j] += inv_std[r] * (d - m1 - xh[j] * m2);
          }
        }
      });
}

// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax axis " + std::to_string(axis) + " for " + shape_string(x.shape()));
  const std::size_t len = x.dim(axis);
  if (len == 0) throw ShapeError("softmax over an empty axis");
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.size() / (len * inner);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x.data()[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x.data()[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x.data()[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  auto xn = x.node();
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [xn, len, inner, outer](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

// Row-wise softmax of a [T, T] score matrix where row i only sees columns <= i;
// masked entries are exactly zero.
inline Tensor causal_softmax(const Tensor& x) {
  detail::require_rank2(x, "causal_softmax");
  const auto t = x.dim(0);
  if (x.dim(1) != t) throw ShapeError("causal_softmax expects a square matrix, got " + shape_string(x.shape()));
  std::vector<double> out(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    const double* row = x.data().data() + i * t;
    double mx = row[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += (out[i * t + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j <= i; ++j) out[i * t + j] /= z;
  }
  auto xn = x.node();
  return detail::make_result("causal_softmax", x.shape(), std::move(out), {x}, [xn, t](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += self.grad[i * t + j] * self.value[i * t + j];
      for (std::size_t j = 0; j <= i; ++j) {
        xn->grad[i * t + j] += self.value[i * t + j] * (self.grad[i * t + j] - dot);
      }
    }
  });
}

// Rows of `table` selected by `ids`: [ids.size(), d].
inline Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  detail::require_rank2(table, "embedding");
  const auto v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside table of " + std::to_string(v) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  return detail::make_result("embedding", {ids.size(), d}, std::move(out), {table},
                             [tn, d, rows = std::move(rows)](Node& self) {
                               if (!tn->requires_grad) return;
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) tn->grad[rows[i] * d + j] += self.grad[i * d + j];
                             });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  detail::require_rank2(x, "slice_cols");
  const auto m = x.dim(0), n = x.dim(1);
  if (start + len > n) throw ShapeError("slice_cols out of range");
  std::vector<double> out(m * len);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data().data() + i * n + start, len, out.data() + i * len);
  auto xn = x.node();
  return detail::make_result("slice_cols", {m, len}, std::move(out), {x}, [xn, m, n, start, len](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) xn->grad[i * n + start + j] += self.grad[i * len + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const auto m = parts.front().dim(0);
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols row mismatch");
    n += p.dim(1);
  }
  std::vector<double> out(m * n);
  std::vector<std::shared_ptr<Node>> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
    off += w;
    nodes.push_back(p.node());
  }
  return detail::make_result("concat_cols", {m, n}, std::move(out), parts, [nodes, m, n](Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      const auto w = p->shape[1];
      if (p->requires_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate). rate == 0 is the
// identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  std::vector<double> mask(x.size());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = rng.uniform01() < rate ? 0.0 : keep;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return detail::make_result("dropout", x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * mask[i];
  });
}

// Mean over positions with mask[t] of -log softmax(logits[t])[targets[t]].
// An empty mask means "all positions".
inline Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, const std::vector<bool>& mask = {}) {
  detail::require_rank2(logits, "cross_entropy");
  const auto t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(t) + " rows");
  if (!mask.empty() && mask.size() != t) throw ShapeError("cross_entropy: mask length mismatch");
  std::size_t count = 0;
  for (std::size_t i = 0; i < t; ++i) count += mask.empty() || mask[i];
  if (count == 0) throw ConfigError("cross_entropy: mask selects no positions");
  std::vector<double> probs(t * v, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary " + std::to_string(v));
    }
    const double* row = logits.data().data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (probs[i * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  auto ln = logits.node();
  std::vector<TokenId> tg(targets.begin(), targets.end());
  return detail::make_result("cross_entropy", {}, {total * inv}, {logits},
                             [ln, t, v, inv, mask, tg = std::move(tg), probs = std::move(probs)](Node& self) {
                               if (!ln->requires_grad) return;
                               const double g = self.grad[0] * inv;
                               for (std::size_t i = 0; i < t; ++i) {
                                 if (!mask.empty() && !mask[i]) continue;
                                 for (std::size_t j = 0; j < v; ++j) ln->grad[i * v + j] += g * probs[i * v + j];
                                 ln->grad[i * v + static_cast<std::size_t>(tg[i])] -= g;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Backward pass

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Interior gradients start from zero on each call because result nodes are
// created fresh per forward pass.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  bool passed() const noexcept { return failures == 0; }
};

// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps tiny true
// gradients from being judged on rounding noise alone.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares a given analytic gradient against central differences of `f`
// around `values` (modified in place and restored).
inline void compare_with_central_differences(const std::function<double()>& f, std::span<double> values,
                                             std::span<const double> analytic, double h, double tolerance,
                                             GradCheckReport& report, double floor = 1e-6) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f();
    values[i] = saved - h;
    const double down = f();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = relative_error(analytic[i], numeric, floor);
    ++report.checked;
    if (rel > tolerance) ++report.failures;
    report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic[i] - numeric));
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
}

// Checks the autodiff gradient of scalar-valued `f` at `point`.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h,
                                  double tolerance, double floor = 1e-6) {
  Tensor x = point.detach(true);
  backward(f(x));
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  Tensor probe = point.detach(false);
  auto value = [&] {
    NoGradGuard guard;
    return f(probe).item();
  };
  GradCheckReport report;
  compare_with_central_differences(value, probe.mutable_data(), analytic, h, tolerance, report, floor);
  return report;
}

}  // namespace kestory
