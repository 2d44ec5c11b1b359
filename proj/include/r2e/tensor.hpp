#pragma once

// Dense 2-D tensors with a tape-based reverse-mode differentiation graph.
//
// Every value is a row-major matrix; scalars are 1x1 and vectors are 1xn.
// A Graph records operations in creation order and backward() replays them
// in exact reverse. Parameter leaves may view externally owned storage and
// accumulate gradients straight into an external buffer, which lets many
// per-instance graphs share one set of weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "r2e/errors.hpp"

namespace r2e {

template <typename Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<Real> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw DimensionError("matrix values do not match shape");
  }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  std::vector<std::size_t> shape() const { return {rows, cols}; }
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

namespace debug {
// Negative-control switch: when set, silu's backward uses a wrong derivative.
inline bool& break_silu_backward() {
  static bool flag = false;
  return flag;
}
}  // namespace debug

template <typename Real>
class Graph;

template <typename Real>
struct Tensor {
  Graph<Real>* graph = nullptr;
  std::size_t id = 0;

  std::size_t rows() const { return graph->node(id).rows; }
  std::size_t cols() const { return graph->node(id).cols; }
  std::size_t size() const { return rows() * cols(); }
  std::span<const Real> values() const { return {graph->data(id), size()}; }
  Real operator()(std::size_t r, std::size_t c) const { return graph->data(id)[r * cols() + c]; }
  Real item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(rows(), cols()));
    return graph->data(id)[0];
  }
  bool requires_grad() const { return graph->node(id).requires_grad; }
  Matrix<Real> value() const {
    auto v = values();
    return Matrix<Real>(rows(), cols(), std::vector<Real>(v.begin(), v.end()));
  }
  // Gradient accumulated by backward(); zeros when nothing reached this node.
  Matrix<Real> grad() const { return graph->grad_matrix(id); }
};

template <typename Real>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Real> value;
    const Real* external = nullptr;
    std::vector<Real> grad;
    Real* external_grad = nullptr;
    bool requires_grad = false;
    bool is_leaf = true;
    BackwardFn backward;
  };

  explicit Graph(bool track = true) : track_(track) { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  const Real* data(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? n.external : n.value.data();
  }

  Tensor<Real> constant(Matrix<Real> m) { return leaf(std::move(m), false); }

  Tensor<Real> leaf(Matrix<Real> m, bool requires_grad) {
    Node n;
    n.rows = m.rows;
    n.cols = m.cols;
    n.value = std::move(m.data);
    n.requires_grad = requires_grad && track_;
    return push(std::move(n));
  }

  // Leaf that views `value` without copying. When `grad_sink` is given the
  // leaf is tracked and its gradient accumulates into that buffer.
  Tensor<Real> bind(const Matrix<Real>& value, Matrix<Real>* grad_sink) {
    Node n;
    n.rows = value.rows;
    n.cols = value.cols;
    n.external = value.data.data();
    if (grad_sink && track_) {
      if (grad_sink->rows != value.rows || grad_sink->cols != value.cols)
        throw DimensionError("gradient sink shape " + shape_str(grad_sink->rows, grad_sink->cols) +
                             " differs from parameter " + shape_str(value.rows, value.cols));
      n.external_grad = grad_sink->data.data();
      n.requires_grad = true;
    }
    return push(std::move(n));
  }

  Tensor<Real> op(std::size_t rows, std::size_t cols, std::vector<Real> value,
                  std::initializer_list<Tensor<Real>> inputs, BackwardFn fn) {
    bool needs = false;
    if (track_)
      for (const auto& t : inputs) needs = needs || nodes_[t.id].requires_grad;
    return op_if(rows, cols, std::move(value), needs, std::move(fn));
  }

  Tensor<Real> op_if(std::size_t rows, std::size_t cols, std::vector<Real> value, bool needs_grad,
                     BackwardFn fn) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.is_leaf = false;
    n.requires_grad = needs_grad && track_;
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer for accumulation; nullptr if the node is not tracked.
  Real* grad_buf(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.external_grad) return n.external_grad;
    if (n.grad.empty()) n.grad.assign(n.rows * n.cols, Real(0));
    return n.grad.data();
  }

  const Real* grad_of(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.external_grad) return n.external_grad;
    return n.grad.empty() ? nullptr : n.grad.data();
  }

  Matrix<Real> grad_matrix(std::size_t id) const {
    const Node& n = nodes_[id];
    Matrix<Real> m(n.rows, n.cols);
    if (const Real* g = grad_of(id)) std::copy(g, g + m.size(), m.data.begin());
    return m;
  }

  // Reverse sweep from a scalar loss. Intermediate gradients are reset at the
  // start so repeated calls accumulate exactly once more into the leaves.
  void backward(Tensor<Real> loss) {
    if (loss.graph != this) throw ContractError("loss belongs to another graph");
    const Node& ln = nodes_[loss.id];
    if (ln.rows * ln.cols != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_str(ln.rows, ln.cols));
    if (!ln.requires_grad) return;
    for (auto& n : nodes_)
      if (!n.is_leaf && !n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), Real(0));
    grad_buf(loss.id)[0] += Real(1);
    visits_ = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      ++visits_;
      n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), Real(0));
      if (n.external_grad) std::fill(n.external_grad, n.external_grad + n.rows * n.cols, Real(0));
    }
  }

  // Number of op nodes whose backward ran during the last sweep.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  Tensor<Real> push(Node n) {
    nodes_.push_back(std::move(n));
    return Tensor<Real>{this, nodes_.size() - 1};
  }

  bool track_;
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
void same_graph(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.graph != b.graph) throw ContractError("tensors belong to different graphs");
}

template <typename Real>
void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.rows(), a.cols()) + " and " +
                         shape_str(b.rows(), b.cols()) + " differ");
}

template <typename Real, typename F, typename D>
Tensor<Real> unary(const Tensor<Real>& a, F f, D dfdx) {
  Graph<Real>& g = *a.graph;
  const std::size_t n = a.size();
  const Real* x = a.values().data();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id;
  return g.op(a.rows(), a.cols(), std::move(out), {a}, [ia, n, dfdx](Graph<Real>& gr, std::size_t self) {
    const Real* go = gr.grad_of(self);
    const Real* x = gr.data(ia);
    const Real* y = gr.data(self);
    Real* ga = gr.grad_buf(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

// a[r x s] . b[s x t]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::same_graph(a, b);
  const std::size_t r = a.rows(), s = a.cols(), t = b.cols();
  if (b.rows() != s)
    throw DimensionError("matmul: inner extents differ for " + shape_str(r, s) + " and " +
                         shape_str(b.rows(), t));
  std::vector<Real> out(r * t, Real(0));
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t i = 0; i < r; ++i) {
    Real* o = out.data() + i * t;
    for (std::size_t k = 0; k < s; ++k) {
      const Real av = A[i * s + k];
      const Real* brow = B + k * t;
      for (std::size_t j = 0; j < t; ++j) o[j] += av * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(r, t, std::move(out), {a, b}, [ia, ib, r, s, t](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    const Real* A = g.data(ia);
    const Real* B = g.data(ib);
    if (Real* ga = g.grad_buf(ia)) {
      for (std::size_t i = 0; i < r; ++i) {
        const Real* grow = go + i * t;
        for (std::size_t k = 0; k < s; ++k) {
          const Real* brow = B + k * t;
          Real acc = 0;
          for (std::size_t j = 0; j < t; ++j) acc += grow[j] * brow[j];
          ga[i * s + k] += acc;
        }
      }
    }
    if (Real* gb = g.grad_buf(ib)) {
      for (std::size_t i = 0; i < r; ++i) {
        const Real* grow = go + i * t;
        for (std::size_t k = 0; k < s; ++k) {
          const Real av = A[i * s + k];
          Real* gbrow = gb + k * t;
          for (std::size_t j = 0; j < t; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

// a[r x s] . b[t x s]^T
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::same_graph(a, b);
  const std::size_t r = a.rows(), s = a.cols(), t = b.rows();
  if (b.cols() != s)
    throw DimensionError("matmul_nt: inner extents differ for " + shape_str(r, s) + " and " +
                         shape_str(t, b.cols()) + "^T");
  std::vector<Real> out(r * t);
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      Real acc = 0;
      for (std::size_t k = 0; k < s; ++k) acc += A[i * s + k] * B[j * s + k];
      out[i * t + j] = acc;
    }
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(r, t, std::move(out), {a, b}, [ia, ib, r, s, t](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    const Real* A = g.data(ia);
    const Real* B = g.data(ib);
    if (Real* ga = g.grad_buf(ia)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < t; ++j) {
          const Real gv = go[i * t + j];
          const Real* brow = B + j * s;
          Real* garow = ga + i * s;
          for (std::size_t k = 0; k < s; ++k) garow[k] += gv * brow[k];
        }
    }
    if (Real* gb = g.grad_buf(ib)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < t; ++j) {
          const Real gv = go[i * t + j];
          const Real* arow = A + i * s;
          Real* gbrow = gb + j * s;
          for (std::size_t k = 0; k < s; ++k) gbrow[k] += gv * arow[k];
        }
    }
  });
}

// Elementwise sum; b may also be a single row broadcast over a's rows.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::same_graph(a, b);
  const std::size_t r = a.rows(), c = a.cols();
  const bool broadcast = b.rows() == 1 && r != 1 && b.cols() == c;
  if (!broadcast) detail::require_same_shape("add", a, b);
  std::vector<Real> out(a.values().begin(), a.values().end());
  const Real* B = b.values().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += B[broadcast ? j : i * c + j];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(r, c, std::move(out), {a, b}, [ia, ib, r, c, broadcast](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    if (Real* ga = g.grad_buf(ia))
      for (std::size_t i = 0; i < r * c; ++i) ga[i] += go[i];
    if (Real* gb = g.grad_buf(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[broadcast ? j : i * c + j] += go[i * c + j];
  });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = A[i] - B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(a.rows(), a.cols(), std::move(out), {a, b}, [ia, ib, n](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    if (Real* ga = g.grad_buf(ia))
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
    if (Real* gb = g.grad_buf(ib))
      for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
  });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(a.rows(), a.cols(), std::move(out), {a, b}, [ia, ib, n](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    const Real* A = g.data(ia);
    const Real* B = g.data(ib);
    if (Real* ga = g.grad_buf(ia))
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * B[i];
    if (Real* gb = g.grad_buf(ib))
      for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * A[i];
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  return detail::unary(a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

// Multiplies row i of a by w[i]; w is (rows x 1) or a 1x1 scalar.
template <typename Real>
Tensor<Real> scale_rows(const Tensor<Real>& a, const Tensor<Real>& w) {
  detail::same_graph(a, w);
  const std::size_t r = a.rows(), c = a.cols();
  const bool scalar = w.rows() == 1 && w.cols() == 1;
  if (!scalar && (w.rows() != r || w.cols() != 1))
    throw DimensionError("scale_rows: weights " + shape_str(w.rows(), w.cols()) + " do not match " +
                         shape_str(r, c));
  std::vector<Real> out(r * c);
  const Real* A = a.values().data();
  const Real* W = w.values().data();
  for (std::size_t i = 0; i < r; ++i) {
    const Real wi = W[scalar ? 0 : i];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[i * c + j] * wi;
  }
  const std::size_t ia = a.id, iw = w.id;
  return a.graph->op(r, c, std::move(out), {a, w}, [ia, iw, r, c, scalar](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    const Real* A = g.data(ia);
    const Real* W = g.data(iw);
    if (Real* ga = g.grad_buf(ia))
      for (std::size_t i = 0; i < r; ++i) {
        const Real wi = W[scalar ? 0 : i];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[i * c + j] * wi;
      }
    if (Real* gw = g.grad_buf(iw))
      for (std::size_t i = 0; i < r; ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += go[i * c + j] * A[i * c + j];
        gw[scalar ? 0 : i] += acc;
      }
  });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return detail::unary(a, [](Real x) { return x > 0 ? x : Real(0); },
                       [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

template <typename Real>
Real sigmoid_scalar(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Tensor<Real> silu(const Tensor<Real>& a) {
  const bool broken = debug::break_silu_backward();
  return detail::unary(
      a, [](Real x) { return x * sigmoid_scalar(x); },
      [broken](Real x, Real) {
        const Real s = sigmoid_scalar(x);
        if (broken) return s;
        return s * (Real(1) + x * (Real(1) - s));
      });
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary(a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  return detail::unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& a) {
  return detail::unary(a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  const std::size_t ia = a.id, n = a.size();
  return a.graph->op(1, 1, {acc}, {a}, [ia, n](Graph<Real>& g, std::size_t self) {
    const Real go = g.grad_of(self)[0];
    Real* ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i] += go;
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / static_cast<Real>(a.size()));
}

// Mean over the row axis: [r x c] -> [1 x c].
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  if (r == 0) throw DimensionError("mean_rows of an empty tensor");
  std::vector<Real> out(c, Real(0));
  const Real* A = a.values().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += A[i * c + j];
  const Real inv = Real(1) / static_cast<Real>(r);
  for (auto& v : out) v *= inv;
  const std::size_t ia = a.id;
  return a.graph->op(1, c, std::move(out), {a}, [ia, r, c, inv](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    Real* ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j] * inv;
  });
}

// Row-wise softmax restricted to entries with mask != 0. Masked entries are
// exactly zero. `mask` is row-major with the logits' shape; empty means none.
template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& logits, std::span<const std::uint8_t> mask = {}) {
  const std::size_t r = logits.rows(), c = logits.cols();
  const bool has_mask = !mask.empty();
  if (has_mask && mask.size() != r * c)
    throw DimensionError("masked_softmax: mask has " + std::to_string(mask.size()) + " entries for logits " +
                         shape_str(r, c));
  const Real* X = logits.values().data();
  std::vector<Real> out(r * c, Real(0));
  for (std::size_t i = 0; i < r; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j)
      if (!has_mask || mask[i * c + j]) {
        mx = std::max(mx, X[i * c + j]);
        any = true;
      }
    if (!any) throw InfeasibleError("masked_softmax: row " + std::to_string(i) + " has no unmasked entry");
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (!has_mask || mask[i * c + j]) {
        out[i * c + j] = std::exp(X[i * c + j] - mx);
        z += out[i * c + j];
      }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  const std::size_t ia = logits.id;
  return logits.graph->op(r, c, std::move(out), {logits}, [ia, r, c](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    const Real* y = g.data(self);
    Real* ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < r; ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * go[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (go[i * c + j] - dot);
    }
  });
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& logits) {
  return masked_softmax(logits, {});
}

// Row-wise log-softmax over unmasked entries; masked entries hold -inf and
// receive no gradient.
template <typename Real>
Tensor<Real> masked_log_softmax(const Tensor<Real>& logits, std::span<const std::uint8_t> mask = {}) {
  const std::size_t r = logits.rows(), c = logits.cols();
  const bool has_mask = !mask.empty();
  if (has_mask && mask.size() != r * c) throw DimensionError("masked_log_softmax: mask shape mismatch");
  const Real* X = logits.values().data();
  std::vector<Real> out(r * c, -std::numeric_limits<Real>::infinity());
  for (std::size_t i = 0; i < r; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j)
      if (!has_mask || mask[i * c + j]) {
        mx = std::max(mx, X[i * c + j]);
        any = true;
      }
    if (!any) throw InfeasibleError("masked_log_softmax: row " + std::to_string(i) + " has no unmasked entry");
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (!has_mask || mask[i * c + j]) z += std::exp(X[i * c + j] - mx);
    const Real lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j)
      if (!has_mask || mask[i * c + j]) out[i * c + j] = X[i * c + j] - lse;
  }
  const std::size_t ia = logits.id;
  std::vector<std::uint8_t> keep;
  if (has_mask) keep.assign(mask.begin(), mask.end());
  return logits.graph->op(r, c, std::move(out), {logits},
                          [ia, r, c, keep = std::move(keep)](Graph<Real>& g, std::size_t self) {
                            const Real* go = g.grad_of(self);
                            const Real* y = g.data(self);
                            Real* ga = g.grad_buf(ia);
                            const bool hm = !keep.empty();
                            for (std::size_t i = 0; i < r; ++i) {
                              Real gs = 0;
                              for (std::size_t j = 0; j < c; ++j)
                                if (!hm || keep[i * c + j]) gs += go[i * c + j];
                              for (std::size_t j = 0; j < c; ++j)
                                if (!hm || keep[i * c + j])
                                  ga[i * c + j] += go[i * c + j] - std::exp(y[i * c + j]) * gs;
                            }
                          });
}

// out[t] = a[rows[t], cols[t]], shaped [len x 1].
template <typename Real>
Tensor<Real> pick(const Tensor<Real>& a, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  if (rows.size() != cols.size()) throw DimensionError("pick: index lists differ in length");
  const std::size_t c = a.cols(), n = rows.size();
  std::vector<Real> out(n);
  const Real* A = a.values().data();
  for (std::size_t t = 0; t < n; ++t) {
    if (rows[t] >= a.rows() || cols[t] >= c) throw DimensionError("pick: index out of range");
    out[t] = A[rows[t] * c + cols[t]];
  }
  const std::size_t ia = a.id;
  return a.graph->op(n, 1, std::move(out), {a},
                     [ia, c, rows = std::move(rows), cols = std::move(cols)](Graph<Real>& g, std::size_t self) {
                       const Real* go = g.grad_of(self);
                       Real* ga = g.grad_buf(ia);
                       for (std::size_t t = 0; t < rows.size(); ++t) ga[rows[t] * c + cols[t]] += go[t];
                     });
}

// Selects rows (repetition allowed).
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, std::vector<std::size_t> index) {
  const std::size_t c = a.cols(), n = index.size();
  std::vector<Real> out(n * c);
  const Real* A = a.values().data();
  for (std::size_t t = 0; t < n; ++t) {
    if (index[t] >= a.rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy(A + index[t] * c, A + (index[t] + 1) * c, out.begin() + t * c);
  }
  const std::size_t ia = a.id;
  return a.graph->op(n, c, std::move(out), {a}, [ia, c, index = std::move(index)](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    Real* ga = g.grad_buf(ia);
    for (std::size_t t = 0; t < index.size(); ++t)
      for (std::size_t j = 0; j < c; ++j) ga[index[t] * c + j] += go[t * c + j];
  });
}

// Places src rows into a zero [rows x cols] tensor at `index` (adding on repeats).
template <typename Real>
Tensor<Real> scatter_rows(const Tensor<Real>& src, std::vector<std::size_t> index, std::size_t rows) {
  const std::size_t c = src.cols();
  if (index.size() != src.rows()) throw DimensionError("scatter_rows: index count differs from source rows");
  std::vector<Real> out(rows * c, Real(0));
  const Real* S = src.values().data();
  for (std::size_t t = 0; t < index.size(); ++t) {
    if (index[t] >= rows) throw DimensionError("scatter_rows: row index out of range");
    for (std::size_t j = 0; j < c; ++j) out[index[t] * c + j] += S[t * c + j];
  }
  const std::size_t is = src.id;
  return src.graph->op(rows, c, std::move(out), {src}, [is, c, index = std::move(index)](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    Real* gs = g.grad_buf(is);
    for (std::size_t t = 0; t < index.size(); ++t)
      for (std::size_t j = 0; j < c; ++j) gs[t * c + j] += go[index[t] * c + j];
  });
}

template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin > end || end > c) throw DimensionError("slice_cols: range out of bounds for " + shape_str(r, c));
  const std::size_t w = end - begin;
  std::vector<Real> out(r * w);
  const Real* A = a.values().data();
  for (std::size_t i = 0; i < r; ++i) std::copy(A + i * c + begin, A + i * c + end, out.begin() + i * w);
  const std::size_t ia = a.id;
  return a.graph->op(r, w, std::move(out), {a}, [ia, r, c, w, begin](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    Real* ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += go[i * w + j];
  });
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Graph<Real>& g = *parts.front().graph;
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  bool needs = false;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    detail::same_graph(parts.front(), p);
    ids.push_back(p.id);
    widths.push_back(p.cols());
    c += p.cols();
    needs = needs || p.requires_grad();
  }
  std::vector<Real> out(r * c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Real* P = p.values().data();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i) std::copy(P + i * w, P + (i + 1) * w, out.begin() + i * c + off);
    off += w;
  }
  return g.op_if(r, c, std::move(out), needs,
                 [ids = std::move(ids), widths = std::move(widths), r, c](Graph<Real>& gr, std::size_t self) {
                   const Real* go = gr.grad_of(self);
                   std::size_t off = 0;
                   for (std::size_t p = 0; p < ids.size(); ++p) {
                     const std::size_t w = widths[p];
                     if (Real* gp = gr.grad_buf(ids[p]))
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * c + off + j];
                     off += w;
                   }
                 });
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Graph<Real>& g = *parts.front().graph;
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  bool needs = false;
  std::vector<std::size_t> ids, counts;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    detail::same_graph(parts.front(), p);
    ids.push_back(p.id);
    counts.push_back(p.size());
    r += p.rows();
    needs = needs || p.requires_grad();
  }
  std::vector<Real> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return g.op_if(r, c, std::move(out), needs, [ids = std::move(ids), counts = std::move(counts)](Graph<Real>& gr, std::size_t self) {
    const Real* go = gr.grad_of(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (Real* gp = gr.grad_buf(ids[p]))
        for (std::size_t i = 0; i < counts[p]; ++i) gp[i] += go[off + i];
      off += counts[p];
    }
  });
}

// [1 x c] -> [n x c]
template <typename Real>
Tensor<Real> repeat_rows(const Tensor<Real>& a, std::size_t n) {
  if (a.rows() != 1) throw DimensionError("repeat_rows expects a single row, got " + shape_str(a.rows(), a.cols()));
  const std::size_t c = a.cols();
  std::vector<Real> out(n * c);
  const Real* A = a.values().data();
  for (std::size_t i = 0; i < n; ++i) std::copy(A, A + c, out.begin() + i * c);
  const std::size_t ia = a.id;
  return a.graph->op(n, c, std::move(out), {a}, [ia, n, c](Graph<Real>& g, std::size_t self) {
    const Real* go = g.grad_of(self);
    Real* ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[j] += go[i * c + j];
  });
}

// Per-feature normalization across the row (node) axis with affine
// parameters gamma, beta of shape [1 x c]. Biased variance.
template <typename Real>
Tensor<Real> instance_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                           Real eps = Real(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw DimensionError("instance_norm: affine parameters must be [1x" + std::to_string(c) + "]");
  const Real* X = x.values().data();
  const Real* G = gamma.values().data();
  const Real* B = beta.values().data();
  std::vector<Real> xhat(r * c), inv_std(c), out(r * c);
  for (std::size_t j = 0; j < c; ++j) {
    Real mu = 0;
    for (std::size_t i = 0; i < r; ++i) mu += X[i * c + j];
    mu /= static_cast<Real>(r);
    Real var = 0;
    for (std::size_t i = 0; i < r; ++i) {
      const Real d = X[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<Real>(r);
    inv_std[j] = Real(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < r; ++i) {
      xhat[i * c + j] = (X[i * c + j] - mu) * inv_std[j];
      out[i * c + j] = G[j] * xhat[i * c + j] + B[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->op(r, c, std::move(out), {x, gamma, beta},
                     [ix, ig, ib, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<Real>& g,
                                                                                           std::size_t self) {
                       const Real* go = g.grad_of(self);
                       const Real* G = g.data(ig);
                       Real* gg = g.grad_buf(ig);
                       Real* gb = g.grad_buf(ib);
                       Real* gx = g.grad_buf(ix);
                       const Real nr = static_cast<Real>(r);
                       for (std::size_t j = 0; j < c; ++j) {
                         Real sum_dy = 0, sum_dy_xhat = 0;
                         for (std::size_t i = 0; i < r; ++i) {
                           sum_dy += go[i * c + j];
                           sum_dy_xhat += go[i * c + j] * xhat[i * c + j];
                         }
                         if (gg) gg[j] += sum_dy_xhat;
                         if (gb) gb[j] += sum_dy;
                         if (gx) {
                           const Real k = G[j] * inv_std[j] / nr;
                           for (std::size_t i = 0; i < r; ++i)
                             gx[i * c + j] +=
                                 k * (nr * go[i * c + j] - sum_dy - xhat[i * c + j] * sum_dy_xhat);
                         }
                       }
                     });
}

// Renormalizes the kept gate probabilities: for each unit u and slot s,
// out[u,s] = probs[u, sel[u][s]] / sum_s' probs[u, sel[u][s']].
template <typename Real>
Tensor<Real> renormalize_selected(const Tensor<Real>& probs, const std::vector<std::vector<int>>& selected) {
  const std::size_t u = probs.rows(), m = probs.cols();
  if (selected.size() != u) throw DimensionError("renormalize_selected: one selection per unit required");
  const std::size_t k = u ? selected.front().size() : 0;
  std::vector<std::size_t> flat(u * k);
  for (std::size_t i = 0; i < u; ++i) {
    if (selected[i].size() != k) throw DimensionError("renormalize_selected: ragged selections");
    for (std::size_t s = 0; s < k; ++s) {
      if (selected[i][s] < 0 || static_cast<std::size_t>(selected[i][s]) >= m)
        throw DimensionError("renormalize_selected: expert index out of range");
      flat[i * k + s] = static_cast<std::size_t>(selected[i][s]);
    }
  }
  const Real* P = probs.values().data();
  std::vector<Real> out(u * k), sums(u);
  for (std::size_t i = 0; i < u; ++i) {
    Real z = 0;
    for (std::size_t s = 0; s < k; ++s) z += P[i * m + flat[i * k + s]];
    sums[i] = z;
    for (std::size_t s = 0; s < k; ++s) out[i * k + s] = P[i * m + flat[i * k + s]] / z;
  }
  const std::size_t ip = probs.id;
  return probs.graph->op(u, k, std::move(out), {probs},
                         [ip, u, m, k, flat = std::move(flat), sums = std::move(sums)](Graph<Real>& g, std::size_t self) {
                           const Real* go = g.grad_of(self);
                           const Real* P = g.data(ip);
                           Real* gp = g.grad_buf(ip);
                           for (std::size_t i = 0; i < u; ++i) {
                             const Real z = sums[i];
                             Real gdotp = 0;
                             for (std::size_t s = 0; s < k; ++s) gdotp += go[i * k + s] * P[i * m + flat[i * k + s]];
                             for (std::size_t s = 0; s < k; ++s)
                               gp[i * m + flat[i * k + s]] += go[i * k + s] / z - gdotp / (z * z);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
template <typename Real>
Real grad_check(const std::function<Tensor<Real>(Graph<Real>&, const Tensor<Real>&)>& f, const Matrix<Real>& point,
                Real h) {
  Matrix<Real> analytic;
  {
    Graph<Real> g;
    auto x = g.leaf(point, true);
    auto y = f(g, x);
    if (y.size() != 1) throw ContractError("grad_check: function must be scalar-valued");
    g.backward(y);
    analytic = x.grad();
  }
  auto eval = [&](const Matrix<Real>& p) {
    Graph<Real> g(false);
    auto x = g.constant(p);
    return f(g, x).item();
  };
  Real worst = 0;
  Matrix<Real> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Real orig = probe.data[i];
    probe.data[i] = orig + h;
    const Real up = eval(probe);
    probe.data[i] = orig - h;
    const Real down = eval(probe);
    probe.data[i] = orig;
    const Real fd = (up - down) / (Real(2) * h);
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic.data[i]))
      throw NumericalError("grad_check: non-finite value", i);
    worst = std::max(worst, std::abs(analytic.data[i] - fd) / std::max(Real(1), std::abs(fd)));
  }
  return worst;
}

}  // namespace r2e
