#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlens/tensor.hpp"

namespace trojanlens {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var variable(Tensor value) { return push(std::move(value), true, {}); }

  // Borrowed leaves: the caller keeps `value` alive for the tape's lifetime.
  Var constant_ref(const Tensor& value) { return push_ref(value, false); }
  Var parameter(const Tensor& value) { return push_ref(value, true); }

  const Tensor& value(Var v) const { return node(v).value(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  // Attaches the adjoint rule after the fact, for ops whose backward reads their own output.
  void attach_backward(Var v, BackwardFn backward) {
    Node& n = nodes_[v.id_];
    if (n.requires_grad) n.backward = std::move(backward);
  }

  // Seeds d(loss)/d(loss) = 1 and propagates adjoints to every node upstream.
  void backward(Var loss) {
    check_owned(loss, "backward");
    if (value(loss).size() != 1) throw GraphError("backward() needs a scalar loss");
    for (auto& n : nodes_) {
      n.grad = Tensor();
      n.has_grad = false;
    }
    Node& root = nodes_[loss.id_];
    root.grad = Tensor(root.value().shape(), 1.0);
    root.has_grad = true;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    last_loss_ = loss.id_;
    has_backward_ = true;
  }

  // d(loss)/d(wrt); zeros when wrt does not influence loss.
  Tensor grad(Var loss, Var wrt) {
    check_owned(wrt, "grad");
    if (!has_backward_ || last_loss_ != loss.id_) backward(loss);
    const Node& n = nodes_[wrt.id_];
    if (!n.has_grad) return Tensor(n.value().shape(), 0.0);
    return n.grad;
  }

  // Gradient buffer left by the last backward(); nullptr when never reached.
  const Tensor* gradient(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? &n.grad : nullptr;
  }

  // Adjoint accumulator used by op backward functions.
  Tensor* accumulate_target(Var v) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value().shape(), 0.0);
      n.has_grad = true;
    }
    return &n.grad;
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  Var push_ref(const Tensor& value, bool requires_grad) {
    Node n;
    n.external = &value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v, const char* what) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
      throw GraphError(std::string(what) + ": variable is not recorded on this tape");
    }
  }

  const Node& node(Var v) const {
    check_owned(v, "value");
    return nodes_[v.id_];
  }

  std::deque<Node> nodes_;
  std::size_t last_loss_ = 0;
  bool has_backward_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw GraphError("use of an unbound variable");
  return tape_->value(*this);
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_matrix(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

inline Tape& same_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw GraphError("operands live on different tapes");
  return *a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

inline bool any_grad(Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.requires_grad(v)) return true;
  return false;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// C = A·B
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) {
      detail::as_matrix(*da).noalias() += detail::as_matrix(g) * detail::as_matrix(b.value()).transpose();
    }
    if (Tensor* db = tp.accumulate_target(b)) {
      detail::as_matrix(*db).noalias() += detail::as_matrix(a.value()).transpose() * detail::as_matrix(g);
    }
  });
}

// C = A·Bᵀ
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(av.rows(), bv.rows());
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv).transpose();
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) {
      detail::as_matrix(*da).noalias() += detail::as_matrix(g) * detail::as_matrix(b.value());
    }
    if (Tensor* db = tp.accumulate_target(b)) {
      detail::as_matrix(*db).noalias() += detail::as_matrix(g).transpose() * detail::as_matrix(a.value());
    }
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) detail::add_into(*da, g);
    if (Tensor* db = tp.accumulate_target(b)) detail::add_into(*db, g);
  });
}

// Adds a 1×n bias row to every row of an m×n matrix.
inline Var add_row(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  return t.push(std::move(out), detail::any_grad(t, {a, bias}), [a, bias, n](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) detail::add_into(*da, g);
    if (Tensor* db = tp.accumulate_target(bias)) {
      const std::size_t m = g.size() / n;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) (*db)[c] += g[r * n + c];
    }
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) {
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
    }
    if (Tensor* db = tp.accumulate_target(b)) {
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return t.push(std::move(out), t.requires_grad(a), [a, s](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += s * g[i];
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return t.push(Tensor::scalar(s), t.requires_grad(a), [a](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a))
      for (double& v : da->values()) v += g[0];
  });
}

// Single entry as a 1×1 node.
inline Var element(Var a, std::size_t r, std::size_t c) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (r >= av.rows() || c >= av.cols()) throw DimensionError("element: index out of range");
  const std::size_t idx = r * av.cols() + c;
  return t.push(Tensor::scalar(av[idx]), t.requires_grad(a), [a, idx](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) (*da)[idx] += g[0];
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) {
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) (*da)[i] += g[i];
    }
  });
}

// Exact (erf) GELU.
inline Var gelu(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a)) {
      const Tensor& av = a.value();
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = av[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        (*da)[i] += g[i] * (cdf + x * pdf);
      }
    }
  });
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows_value(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("softmax_rows: expected a 2-D tensor, got " + shape_string(x.shape()));
  Tensor out = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = out.data().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) row[c] /= z;
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  Tensor out = softmax_rows_value(a.value());
  const std::size_t n = out.cols();
  Var self = t.push(std::move(out), t.requires_grad(a), {});
  t.attach_backward(self, [a, self, n](Tape& tp, const Tensor& g) {
    Tensor* da = tp.accumulate_target(a);
    if (!da) return;
    const Tensor& y = self.value();
    const std::size_t m = g.size() / n;
    for (std::size_t r = 0; r < m; ++r) {
      const double* yr = y.data().data() + r * n;
      const double* gr = g.data().data() + r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += yr[c] * gr[c];
      for (std::size_t c = 0; c < n; ++c) (*da)[r * n + c] += yr[c] * (gr[c] - dot);
    }
  });
  return self;
}

// Row-wise layer normalization with learned gain and shift (both 1×n).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma);
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows();
  const std::size_t n = xv.cols();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: gain/shift width does not match input " + shape_string(xv.shape()));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * inv_std[r];
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return t.push(std::move(out), detail::any_grad(t, {x, gamma, beta}),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Tape& tp, const Tensor& g) {
                  if (Tensor* dg = tp.accumulate_target(gamma))
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) (*dg)[c] += g[r * n + c] * xhat[r * n + c];
                  if (Tensor* db = tp.accumulate_target(beta))
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) (*db)[c] += g[r * n + c];
                  if (Tensor* dx = tp.accumulate_target(x)) {
                    const Tensor& gv = gamma.value();
                    std::vector<double> dh(n);
                    for (std::size_t r = 0; r < m; ++r) {
                      double mean_dh = 0.0;
                      double mean_dh_h = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        dh[c] = g[r * n + c] * gv[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * xhat[r * n + c];
                      }
                      mean_dh /= static_cast<double>(n);
                      mean_dh_h /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c)
                        (*dx)[r * n + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
                    }
                  }
                });
}

// Mean softmax cross-entropy over the rows of a B×C logit matrix.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  const std::size_t b = lv.rows();
  const std::size_t c = lv.cols();
  if (labels.size() != b) throw DimensionError("cross_entropy: one label per logit row required");
  Tensor probs = softmax_rows_value(lv);
  double loss = 0.0;
  std::vector<int> y(labels.begin(), labels.end());
  for (std::size_t r = 0; r < b; ++r) {
    if (y[r] < 0 || static_cast<std::size_t>(y[r]) >= c) throw DimensionError("cross_entropy: label out of range");
    loss -= std::log(std::max(probs[r * c + static_cast<std::size_t>(y[r])], std::numeric_limits<double>::min()));
  }
  loss /= static_cast<double>(b);
  return t.push(Tensor::scalar(loss), t.requires_grad(logits),
                [logits, probs = std::move(probs), y = std::move(y), b, c](Tape& tp, const Tensor& g) {
                  Tensor* dl = tp.accumulate_target(logits);
                  if (!dl) return;
                  const double k = g[0] / static_cast<double>(b);
                  for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      const double target = static_cast<std::size_t>(y[r]) == j ? 1.0 : 0.0;
                      (*dl)[r * c + j] += k * (probs[r * c + j] - target);
                    }
                });
}

// Row gather: out[i] = table[rows[i]]. Used for token/position embeddings.
inline Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Tape& t = *table.tape();
  const Tensor& tv = table.value();
  const std::size_t n = tv.cols();
  Tensor out = Tensor::matrix(rows.size(), n);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= tv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.data().data() + idx[i] * n, n, out.data().data() + i * n);
  }
  return t.push(std::move(out), t.requires_grad(table), [table, idx = std::move(idx), n](Tape& tp, const Tensor& g) {
    if (Tensor* dt = tp.accumulate_target(table))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < n; ++c) (*dt)[idx[i] * n + c] += g[i * n + c];
  });
}

inline Var embedding(Var table, std::span<const std::size_t> ids) { return gather_rows(table, ids); }

// Sub-block [r0, r1) × [c0, c1).
inline Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (r0 > r1 || r1 > av.rows() || c0 > c1 || c1 > av.cols()) {
    throw DimensionError("slice: block outside " + shape_string(av.shape()));
  }
  const std::size_t n = av.cols();
  const std::size_t w = c1 - c0;
  Tensor out = Tensor::matrix(r1 - r0, w);
  for (std::size_t r = r0; r < r1; ++r) std::copy_n(av.data().data() + r * n + c0, w, out.data().data() + (r - r0) * w);
  return t.push(std::move(out), t.requires_grad(a), [a, r0, r1, c0, w, n](Tape& tp, const Tensor& g) {
    if (Tensor* da = tp.accumulate_target(a))
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = 0; c < w; ++c) (*da)[r * n + c0 + c] += g[(r - r0) * w + c];
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Tape& t = *parts.front().tape();
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    if (p.tape() != &t) throw GraphError("concat_rows: operands live on different tapes");
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
    needs_grad = needs_grad || t.requires_grad(p);
  }
  Tensor out = Tensor::matrix(total, n);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), needs_grad, [ps = std::move(ps)](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t sz = p.value().size();
      if (Tensor* dp = tp.accumulate_target(p))
        for (std::size_t i = 0; i < sz; ++i) (*dp)[i] += g[off + i];
      off += sz;
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  Tape& t = *parts.front().tape();
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    if (p.tape() != &t) throw GraphError("concat_cols: operands live on different tapes");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
    needs_grad = needs_grad || t.requires_grad(p);
  }
  Tensor out = Tensor::matrix(m, total);
  std::size_t c0 = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    const std::size_t w = pv.cols();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(pv.data().data() + r * w, w, out.data().data() + r * total + c0);
    c0 += w;
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), needs_grad, [ps = std::move(ps), m, total](Tape& tp, const Tensor& g) {
    std::size_t c0 = 0;
    for (Var p : ps) {
      const std::size_t w = p.value().cols();
      if (Tensor* dp = tp.accumulate_target(p))
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < w; ++c) (*dp)[r * w + c] += g[r * total + c0 + c];
      c0 += w;
    }
  });
}

}  // namespace trojanlens

namespace trojanlens {

// d(loss)/d(wrt) on the tape that recorded both.
inline Tensor grad(Var loss, Var wrt) {
  if (!loss.valid() || loss.tape() != wrt.tape()) throw GraphError("grad: wrt is not recorded on the loss tape");
  return loss.tape()->grad(loss, wrt);
}

}  // namespace trojanlens
