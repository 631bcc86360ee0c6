#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Ops are recorded only while a Tape is active on the calling thread
// (see TapeScope) and at least one input requires a gradient. Without an
// active tape every op is a plain forward computation, which is what the
// inference paths rely on.

namespace dynprop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same size as values
  bool requires_grad = false;
  bool recorded = false;  // produced by a taped op (not a leaf)
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_size(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return rank() >= 2 ? node_->shape[1] : 1; }

  std::span<const double> values() const { return node_->values; }
  // Parameter updates and checkpoint loading only.
  std::span<double> mutable_values() { return node_->values; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }
  double operator[](std::size_t i) const { return node_->values[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::vector<double> grad_or_zeros() const {
    return has_grad() ? node_->grad : std::vector<double>(size(), 0.0);
  }
  void zero_grad() { node_->grad.clear(); }

  // Grad buffer for accumulation; empty span when this tensor takes no gradient.
  std::span<double> grad_sink() const {
    if (!node_->requires_grad) return {};
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
    return node_->grad;
  }

  Tensor detach() const { return Tensor(shape(), node_->values, false); }
  Tensor clone_leaf(bool requires_grad) const { return Tensor(shape(), node_->values, requires_grad); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Backward rule: receives the output gradient and output values.
using BackwardRule = std::function<void(std::span<const double> grad_out,
                                        std::span<const double> out_values)>;

class Tape {
 public:
  struct Entry {
    std::shared_ptr<TensorNode> output;
    BackwardRule rule;
  };

  void record(const Tensor& output, BackwardRule rule) {
    entries_.push_back({output.node(), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Replays the recorded rules in reverse order. Leaf gradients accumulate
  // across calls; intermediate gradients are reset first.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward needs a scalar loss, got " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.node()->recorded)
      throw std::logic_error("backward: loss was not produced by taped operations");
    for (auto& e : entries_) std::fill(e.output->grad.begin(), e.output->grad.end(), 0.0);
    loss.grad_sink()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      auto& out = *it->output;
      if (out.grad.empty()) continue;
      it->rule(out.grad, out.values);
    }
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Entry> entries_;
};

// Makes `tape` the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording, e.g. for teacher targets computed inside a training step.
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGradScope() { Tape::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Builds an op result and records `rule` when any input participates in
// differentiation. Custom ops in other modules use this as well.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs, BackwardRule rule) {
  Tape* tape = Tape::active();
  bool needs = false;
  if (tape)
    for (auto* t : inputs) needs = needs || t->requires_grad();
  Tensor out(std::move(shape), std::move(values), needs);
  if (needs) {
    out.node()->recorded = true;
    tape->record(out, std::move(rule));
  }
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values,
                          const std::vector<Tensor>& inputs, BackwardRule rule) {
  Tape* tape = Tape::active();
  bool needs = false;
  if (tape)
    for (auto& t : inputs) needs = needs || t.requires_grad();
  Tensor out(std::move(shape), std::move(values), needs);
  if (needs) {
    out.node()->recorded = true;
    tape->record(out, std::move(rule));
  }
  return out;
}

// Scalar multiply-adds performed by matrix products on this thread.
inline std::uint64_t& multiply_add_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// c[m x n] += a[m x k] * b[k x n]. Interior 4x8 tiles accumulate in
// registers (GCC/Clang vector extension); edges use plain loops.
inline void gemm_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
  using v4 = double __attribute__((vector_size(32)));
  auto load = [](const double* p) {
    v4 v;
    std::memcpy(&v, p, sizeof v);
    return v;
  };
  auto store_add = [&](double* p, v4 x) {
    const v4 v = load(p) + x;
    std::memcpy(p, &v, sizeof v);
  };
  const std::size_t m_main = m - m % 4, n_main = n - n % 8;
  for (std::size_t i0 = 0; i0 < m_main; i0 += 4) {
    const double* a0 = a + i0 * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    for (std::size_t j0 = 0; j0 < n_main; j0 += 8) {
      v4 c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < k; ++p) {
        const v4 b0 = load(b + p * n + j0), b1 = load(b + p * n + j0 + 4);
        c00 += a0[p] * b0;
        c01 += a0[p] * b1;
        c10 += a1[p] * b0;
        c11 += a1[p] * b1;
        c20 += a2[p] * b0;
        c21 += a2[p] * b1;
        c30 += a3[p] * b0;
        c31 += a3[p] * b1;
      }
      double* c0 = c + i0 * n + j0;
      store_add(c0, c00);
      store_add(c0 + 4, c01);
      store_add(c0 + n, c10);
      store_add(c0 + n + 4, c11);
      store_add(c0 + 2 * n, c20);
      store_add(c0 + 2 * n + 4, c21);
      store_add(c0 + 3 * n, c30);
      store_add(c0 + 3 * n + 4, c31);
    }
    if (n_main < n)
      for (std::size_t i = i0; i < i0 + 4; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          for (std::size_t j = n_main; j < n; ++j) c[i * n + j] += av * b[p * n + j];
        }
  }
  for (std::size_t i = m_main; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

// Forward products; counted in multiply_add_counter().
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  multiply_add_counter() += m * k * n;
  gemm_kernel(a, b, c, m, k, n);
}

// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  const auto bt = transposed(b, k, n);
  gemm_kernel(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto at = transposed(a, m, k);
  gemm_kernel(at.data(), g, c, k, m, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(v), {&a, &b},
                     [a, b](std::span<const double> g, std::span<const double>) {
                       for (auto sink : {a.grad_sink(), b.grad_sink()})
                         for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += g[i];
                     });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(v), {&a, &b},
                     [a, b](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                       auto gb = b.grad_sink();
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                     });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(v), {&a, &b},
                     [a, b](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
                       auto gb = b.grad_sink();
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
                     });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  return make_result(a.shape(), std::move(v), {&a},
                     [a, s](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
                     });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > 0.0 ? a[i] : 0.0;
  return make_result(a.shape(), std::move(v), {&a},
                     [a](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i)
                         if (a[i] > 0.0) ga[i] += g[i];
                     });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid(a[i]);
  return make_result(a.shape(), std::move(v), {&a},
                     [a](std::span<const double> g, std::span<const double> y) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                     });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a[i]);
  return make_result(a.shape(), std::move(v), {&a},
                     [a](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i)
                         ga[i] += a[i] > 0.0 ? g[i] : (a[i] < 0.0 ? -g[i] : 0.0);
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), v.data(), m, k, n);
  return make_result({m, n}, std::move(v), {&a, &b},
                     [a, b, m, k, n](std::span<const double> g, std::span<const double>) {
                       if (auto ga = a.grad_sink(); !ga.empty())
                         detail::gemm_nt(g.data(), b.values().data(), ga.data(), m, n, k);
                       if (auto gb = b.grad_sink(); !gb.empty())
                         detail::gemm_tn(a.values().data(), g.data(), gb.data(), m, k, n);
                     });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a[i * c + j];
  return make_result({c, r}, std::move(v), {&a},
                     [a, r, c](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                     });
}

// x[m x k] * w[k x n] + bias[n], with the bias added to every row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (bias.size() != n)
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.values().data(), n, v.data() + i * n);
  detail::gemm_nn(x.values().data(), w.values().data(), v.data(), m, k, n);
  return make_result({m, n}, std::move(v), {&x, &w, &bias},
                     [x, w, bias, m, k, n](std::span<const double> g, std::span<const double>) {
                       if (auto gx = x.grad_sink(); !gx.empty())
                         detail::gemm_nt(g.data(), w.values().data(), gx.data(), m, n, k);
                       if (auto gw = w.grad_sink(); !gw.empty())
                         detail::gemm_tn(x.values().data(), g.data(), gw.data(), m, k, n);
                       if (auto gb = bias.grad_sink(); !gb.empty())
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                     });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> v(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(v), {&a},
                     [a](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                     });
}

// Repeats a row vector (shape [d] or [1 x d]) `times` times.
inline Tensor tile_rows(const Tensor& row, std::size_t times) {
  const std::size_t d = row.size();
  if (row.rank() == 2 && row.rows() != 1)
    throw ShapeError("tile_rows: expected a single row, got " + shape_str(row.shape()));
  std::vector<double> v(times * d);
  for (std::size_t i = 0; i < times; ++i) std::copy_n(row.values().data(), d, v.data() + i * d);
  return make_result({times, d}, std::move(v), {&row},
                     [row, times, d](std::span<const double> g, std::span<const double>) {
                       auto gr = row.grad_sink();
                       for (std::size_t i = 0; i < times; ++i)
                         for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
                     });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_matrix(a, "slice_rows");
  if (begin >= end || end > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  const std::size_t c = a.cols();
  std::vector<double> v(a.values().begin() + begin * c, a.values().begin() + end * c);
  return make_result({end - begin, c}, std::move(v), {&a},
                     [a, begin, c](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
                     });
}

inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_matrix(a, "gather_rows");
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const std::size_t c = a.cols();
  std::vector<double> v(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string(index[i]) + " outside " +
                       shape_str(a.shape()));
    std::copy_n(a.values().data() + index[i] * c, c, v.data() + i * c);
  }
  const std::size_t n = index.size();
  return make_result({n, c}, std::move(v), {&a},
                     [a, index = std::move(index), c](std::span<const double> g,
                                                      std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < index.size(); ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[index[i] * c + j] += g[i * c + j];
                     });
}

// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (auto& p : parts) detail::require_matrix(p, "concat");
  const std::size_t r0 = parts[0].rows(), c0 = parts[0].cols();
  std::size_t rows = 0, cols = 0;
  for (auto& p : parts) {
    if (axis == 0 && p.cols() != c0)
      throw ShapeError("concat(axis=0): " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    if (axis == 1 && p.rows() != r0)
      throw ShapeError("concat(axis=1): " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.rows();
    cols += p.cols();
  }
  if (axis == 0) cols = c0;
  else rows = r0;
  std::vector<double> v(rows * cols);
  std::size_t offset = 0;
  for (auto& p : parts) {
    const std::size_t pr = p.rows(), pc = p.cols();
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t dst = axis == 0 ? (offset + i) * cols + j : i * cols + offset + j;
        v[dst] = p[i * pc + j];
      }
    offset += axis == 0 ? pr : pc;
  }
  return make_result({rows, cols}, std::move(v), parts,
                     [parts, axis, cols](std::span<const double> g, std::span<const double>) {
                       std::size_t off = 0;
                       for (auto& p : parts) {
                         const std::size_t pr = p.rows(), pc = p.cols();
                         if (auto gp = p.grad_sink(); !gp.empty())
                           for (std::size_t i = 0; i < pr; ++i)
                             for (std::size_t j = 0; j < pc; ++j) {
                               const std::size_t src =
                                   axis == 0 ? (off + i) * cols + j : i * cols + off + j;
                               gp[i * pc + j] += g[src];
                             }
                         off += axis == 0 ? pr : pc;
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization

inline Tensor softmax(const Tensor& a, std::size_t axis = 1) {
  detail::require_matrix(a, "softmax");
  if (axis > 1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  // Iterate over "lines" along the softmax axis.
  const std::size_t lines = axis == 1 ? r : c, len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  auto base = [=](std::size_t line) { return axis == 1 ? line * c : line; };
  std::vector<double> v(a.size());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t b0 = base(l);
    double mx = a[b0];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, a[b0 + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += v[b0 + i * stride] = std::exp(a[b0 + i * stride] - mx);
    for (std::size_t i = 0; i < len; ++i) v[b0 + i * stride] /= z;
  }
  return make_result(a.shape(), std::move(v), {&a},
                     [a, lines, len, stride, base](std::span<const double> g, std::span<const double> y) {
                       auto ga = a.grad_sink();
                       for (std::size_t l = 0; l < lines; ++l) {
                         const std::size_t b0 = base(l);
                         double dot = 0.0;
                         for (std::size_t i = 0; i < len; ++i) dot += g[b0 + i * stride] * y[b0 + i * stride];
                         for (std::size_t i = 0; i < len; ++i) {
                           const std::size_t k = b0 + i * stride;
                           ga[k] += y[k] * (g[k] - dot);
                         }
                       }
                     });
}

// Normalizes each row over the last axis, then applies gain and bias ([d] each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs gain " + shape_str(gain.shape()));
  std::vector<double> v(x.size()), xhat(x.size()), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.values().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mean) * inv_std[i];
      v[i * c + j] = xhat[i * c + j] * gain[j] + bias[j];
    }
  }
  return make_result(
      x.shape(), std::move(v), {&x, &gain, &bias},
      [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const double> g, std::span<const double>) {
        auto gg = gain.grad_sink();
        auto gb = bias.grad_sink();
        auto gx = x.grad_sink();
        for (std::size_t i = 0; i < r; ++i) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            if (!gg.empty()) gg[j] += g[k] * xhat[k];
            if (!gb.empty()) gb[j] += g[k];
            const double dxhat = g[k] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[k];
          }
          if (gx.empty()) continue;
          const double n = static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            const double dxhat = g[k] * gain[j];
            gx[k] += inv_std[i] / n * (n * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_result({1}, {s}, {&a}, [a](std::span<const double> g, std::span<const double>) {
    auto ga = a.grad_sink();
    for (auto& x : ga) x += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Mean over `axis` of a matrix; result is [1 x c] (axis 0) or [r x 1] (axis 1).
inline Tensor reduce_mean(const Tensor& a, std::size_t axis) {
  detail::require_matrix(a, "reduce_mean");
  const std::size_t r = a.rows(), c = a.cols();
  if (axis > 1) throw ShapeError("reduce_mean: axis must be 0 or 1");
  std::vector<double> v(axis == 0 ? c : r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[axis == 0 ? j : i] += a[i * c + j];
  const double inv = 1.0 / static_cast<double>(axis == 0 ? r : c);
  for (auto& x : v) x *= inv;
  Shape s = axis == 0 ? Shape{1, c} : Shape{r, 1};
  return make_result(std::move(s), std::move(v), {&a},
                     [a, r, c, axis, inv](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 0 ? j : i] * inv;
                     });
}

// Max over `axis`; the gradient goes to the first maximal element.
inline Tensor reduce_max(const Tensor& a, std::size_t axis) {
  detail::require_matrix(a, "reduce_max");
  const std::size_t r = a.rows(), c = a.cols();
  if (axis > 1) throw ShapeError("reduce_max: axis must be 0 or 1");
  const std::size_t outer = axis == 0 ? c : r, inner = axis == 0 ? r : c;
  std::vector<double> v(outer);
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = axis == 0 ? o : o * c;
    for (std::size_t i = 1; i < inner; ++i) {
      const std::size_t k = axis == 0 ? i * c + o : o * c + i;
      if (a[k] > a[best]) best = k;
    }
    arg[o] = best;
    v[o] = a[best];
  }
  Shape s = axis == 0 ? Shape{1, c} : Shape{r, 1};
  return make_result(std::move(s), std::move(v), {&a},
                     [a, arg = std::move(arg)](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t o = 0; o < arg.size(); ++o) ga[arg[o]] += g[o];
                     });
}

// Mean squared error with mean reduction over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return make_result({1}, {s / n}, {&a, &b},
                     [a, b, n](std::span<const double> g, std::span<const double>) {
                       auto ga = a.grad_sink();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 2.0 * (a[i] - b[i]) / n;
                       auto gb = b.grad_sink();
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[0] * 2.0 * (a[i] - b[i]) / n;
                     });
}

// ---------------------------------------------------------------------------
// Differentiation helpers

inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-6) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Tensor leaf = x.clone_leaf(true);
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(leaf);
    if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar");
    if (y.node()->recorded) tape.backward(y);
    analytic = leaf.grad_or_zeros();
  }
  NoGradScope plain;
  Tensor probe = x.clone_leaf(false);
  auto vals = probe.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double fp = f(probe).item();
    vals[i] = orig - h;
    const double fm = f(probe).item();
    vals[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace dynprop
