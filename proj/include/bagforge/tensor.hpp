#pragma once

// Dense row-major 2-D tensors with tape-based reverse-mode differentiation.
//
// Every differentiable operation takes the Tape it records onto. A tape is
// single-use: after backward() it is consumed and refuses further recording
// or a second backward pass until reset().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bagforge/error.hpp"

namespace bagforge {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  constexpr std::size_t size() const { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

namespace detail {

template <std::floating_point T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something writes a gradient
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // producing tape, 0 for leaves

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(std::size_t rows, std::size_t cols,
                           bool requires_grad = false) {
    return BasicTensor(Shape{rows, cols}, std::vector<T>(rows * cols, T(0)),
                       requires_grad);
  }

  static BasicTensor from(std::size_t rows, std::size_t cols,
                          std::vector<T> values, bool requires_grad = false) {
    if (values.size() != rows * cols) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + Shape{rows, cols}.str());
    }
    return BasicTensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  /// Trainable leaf.
  static BasicTensor parameter(std::size_t rows, std::size_t cols,
                               std::vector<T> values) {
    return from(rows, cols, std::move(values), true);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rows() const { return impl_->shape.rows; }
  std::size_t cols() const { return impl_->shape.cols; }
  std::size_t size() const { return impl_->shape.size(); }
  bool requires_grad() const { return impl_->requires_grad; }
  std::uint64_t tape_id() const { return impl_->tape_id; }

  std::span<const T> data() const { return impl_->value; }
  /// Direct write access, for initialisers and optimisers acting on leaves.
  std::span<T> mutable_data() const { return impl_->value; }

  T at(std::size_t r, std::size_t c) const {
    return impl_->value[r * impl_->shape.cols + c];
  }
  T item() const {
    if (size() != 1) throw ShapeError("item() on " + shape().str());
    return impl_->value[0];
  }

  /// Gradient buffer; all zeros if nothing has flowed into this tensor.
  std::span<const T> grad() const { return {impl_->grad_buffer(), size()}; }
  std::span<T> mutable_grad() const { return {impl_->grad_buffer(), size()}; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() const {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  /// Independent copy of values (and the requires_grad flag), detached from
  /// any tape.
  BasicTensor clone() const {
    return BasicTensor(impl_->shape, impl_->value, impl_->requires_grad);
  }

  bool same(const BasicTensor& other) const { return impl_ == other.impl_; }

  detail::TensorData<T>* impl() const { return impl_.get(); }

 private:
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
      : impl_(std::make_shared<detail::TensorData<T>>()) {
    impl_->shape = shape;
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::TensorData<T>> impl_;
};

using Tensor = BasicTensor<float>;

/// Element-type conversion; the result is a fresh leaf.
template <std::floating_point To, std::floating_point From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  return BasicTensor<To>::from(t.rows(), t.cols(), std::move(values),
                               t.requires_grad());
}

/// Ordered record of differentiable operations executed during one forward
/// pass. Backward replays the record once, in reverse.
class Tape {
 public:
  Tape() : id_(detail::next_tape_id()) {}

  /// A tape that records nothing; outputs never require grad.
  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  bool recording() const { return recording_; }

  void reset() {
    nodes_.clear();
    consumed_ = false;
    id_ = detail::next_tape_id();
  }

  /// Wraps freshly computed values as the output of a named operation. When
  /// any input requires grad the output joins the tape with `rule`, which
  /// receives the output's gradient and accumulates into the inputs.
  template <std::floating_point T, class Rule>
  BasicTensor<T> record(const char* op, Shape shape, std::vector<T> values,
                        std::initializer_list<const BasicTensor<T>*> inputs,
                        Rule&& rule) {
    for (const T v : values) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(op) + ": non-finite value in output " +
                           shape.str());
      }
    }
    bool track = false;
    for (const auto* in : inputs) {
      if (!in->requires_grad()) continue;
      if (in->tape_id() != 0 && in->tape_id() != id_) {
        throw GraphError(std::string(op) +
                         ": input was produced by a different tape");
      }
      track = true;
    }
    auto out = BasicTensor<T>::from(shape.rows, shape.cols, std::move(values));
    if (!track || !recording_) return out;
    if (consumed_) {
      throw GraphError(std::string(op) + ": tape already consumed by backward");
    }
    out.impl()->requires_grad = true;
    out.impl()->tape_id = id_;
    nodes_.push_back([out = out, rule = std::forward<Rule>(rule)]() {
      if (!out.has_grad()) return;
      rule(out.grad().data());
    });
    return out;
  }

  /// Propagates d(loss)/d(.) into every tensor that requires grad. Leaf
  /// gradients accumulate; call zero_grad between steps.
  template <std::floating_point T>
  void backward(const BasicTensor<T>& loss) {
    if (consumed_) throw GraphError("backward: tape already consumed");
    if (loss.shape() != Shape{1, 1}) {
      throw ShapeError("backward: loss must be 1x1, got " + loss.shape().str());
    }
    if (!loss.requires_grad() || loss.tape_id() != id_) {
      throw GraphError("backward: loss was not produced on this tape");
    }
    loss.mutable_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
    consumed_ = true;
  }

 private:
  std::uint64_t id_;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void require_same_shape(const char* op, const BasicTensor<T>& a,
                        const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

// out[m x n] += a[m x k] * b[k x n], sequential row-major accumulation.
template <class T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    const T* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = arow[t];
      const T* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transposed(std::span<const T> src, std::size_t rows,
                          std::size_t cols) {
  std::vector<T> out(src.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace detail

template <class T>
BasicTensor<T> matmul(Tape& tape, const BasicTensor<T>& a,
                      const BasicTensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + a.shape().str() +
                     " and " + b.shape().str());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return tape.record<T>("matmul", {m, n}, std::move(out), {&a, &b},
                        [a, b, m, k, n](const T* g) {
                          if (a.requires_grad()) {
                            // dA = dC * B^T
                            const auto bt = detail::transposed(b.data(), k, n);
                            detail::gemm_nn(g, bt.data(),
                                            a.mutable_grad().data(), m, n, k);
                          }
                          if (b.requires_grad()) {
                            // dB = A^T * dC
                            T* gb = b.mutable_grad().data();
                            const T* av = a.data().data();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t t = 0; t < k; ++t) {
                                const T s = av[i * k + t];
                                const T* grow = g + i * n;
                                T* brow = gb + t * n;
                                for (std::size_t j = 0; j < n; ++j)
                                  brow[j] += s * grow[j];
                              }
                            }
                          }
                        });
}

template <class T>
BasicTensor<T> transpose(Tape& tape, const BasicTensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  return tape.record<T>("transpose", {c, r}, detail::transposed(x.data(), r, c),
                        {&x}, [x, r, c](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              gx[i * c + j] += g[j * r + i];
                        });
}

template <class T>
BasicTensor<T> add(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return tape.record<T>("add", a.shape(), std::move(out), {&a, &b},
                        [a, b](const T* g) {
                          for (const auto* t : {&a, &b}) {
                            if (!t->requires_grad()) continue;
                            T* gt = t->mutable_grad().data();
                            for (std::size_t i = 0; i < t->size(); ++i) gt[i] += g[i];
                          }
                        });
}

/// x[m x n] + bias[1 x n] broadcast over rows; the only broadcast supported.
template <class T>
BasicTensor<T> add_row(Tape& tape, const BasicTensor<T>& x,
                       const BasicTensor<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_row: bias " + bias.shape().str() +
                     " does not broadcast over " + x.shape().str());
  }
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return tape.record<T>("add_row", x.shape(), std::move(out), {&x, &bias},
                        [x, bias, m, n](const T* g) {
                          if (x.requires_grad()) {
                            T* gx = x.mutable_grad().data();
                            for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
                          }
                          if (bias.requires_grad()) {
                            T* gb = bias.mutable_grad().data();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                          }
                        });
}

/// Element-wise product.
template <class T>
BasicTensor<T> mul(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return tape.record<T>("mul", a.shape(), std::move(out), {&a, &b},
                        [a, b](const T* g) {
                          if (a.requires_grad()) {
                            T* ga = a.mutable_grad().data();
                            for (std::size_t i = 0; i < a.size(); ++i)
                              ga[i] += g[i] * b.data()[i];
                          }
                          if (b.requires_grad()) {
                            T* gb = b.mutable_grad().data();
                            for (std::size_t i = 0; i < b.size(); ++i)
                              gb[i] += g[i] * a.data()[i];
                          }
                        });
}

template <class T>
BasicTensor<T> scale(Tape& tape, const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return tape.record<T>("scale", x.shape(), std::move(out), {&x},
                        [x, factor](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < x.size(); ++i) gx[i] += factor * g[i];
                        });
}

template <class T>
BasicTensor<T> tanh(Tape& tape, const BasicTensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
  auto y = out;
  return tape.record<T>("tanh", x.shape(), std::move(out), {&x},
                        [x, y = std::move(y)](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < y.size(); ++i)
                            gx[i] += g[i] * (T(1) - y[i] * y[i]);
                        });
}

/// Row-wise softmax with max subtraction.
template <class T>
BasicTensor<T> softmax(Tape& tape, const BasicTensor<T>& x) {
  if (x.size() == 0) throw ShapeError("softmax: empty input " + x.shape().str());
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T* orow = out.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  auto s = out;
  return tape.record<T>("softmax", x.shape(), std::move(out), {&x},
                        [x, s = std::move(s), m, n](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < m; ++i) {
                            const T* srow = s.data() + i * n;
                            const T* grow = g + i * n;
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
                            for (std::size_t j = 0; j < n; ++j)
                              gx[i * n + j] += srow[j] * (grow[j] - dot);
                          }
                        });
}

/// log(max(x, floor)); entries at or below the floor pass no gradient.
template <class T>
BasicTensor<T> log_clamped(Tape& tape, const BasicTensor<T>& x, T floor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(std::max(x.data()[i], floor));
  return tape.record<T>("log", x.shape(), std::move(out), {&x},
                        [x, floor](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < x.size(); ++i) {
                            const T v = x.data()[i];
                            if (v > floor) gx[i] += g[i] / v;
                          }
                        });
}

/// Row-wise layer normalisation with population variance; gamma and beta
/// are 1 x cols.
template <class T>
BasicTensor<T> layer_norm(Tape& tape, const BasicTensor<T>& x,
                          const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("layer_norm: empty rows " + x.shape().str());
  if (gamma.shape() != Shape{1, n} || beta.shape() != Shape{1, n}) {
    throw ShapeError("layer_norm: gamma " + gamma.shape().str() + " / beta " +
                     beta.shape().str() + " do not match " + x.shape().str());
  }
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(m);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gamma.data()[j] * xhat[i * n + j] + beta.data()[j];
    }
  }
  return tape.record<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
       n](const T* g) {
        if (gamma.requires_grad()) {
          T* gg = gamma.mutable_grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (beta.requires_grad()) {
          T* gb = beta.mutable_grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (x.requires_grad()) {
          T* gx = x.mutable_grad().data();
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gamma.data()[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gamma.data()[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

/// Column-wise mean over rows: [m x n] -> [1 x n].
template <class T>
BasicTensor<T> mean_rows(Tape& tape, const BasicTensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (m == 0) throw DomainError("mean_rows: no rows");
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  const T inv = T(1) / static_cast<T>(m);
  for (auto& v : out) v *= inv;
  return tape.record<T>("mean_rows", {1, n}, std::move(out), {&x},
                        [x, m, n, inv](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
                        });
}

/// Column-wise max over rows. Ties resolve to the lowest row index, which
/// alone receives the gradient.
template <class T>
BasicTensor<T> max_rows(Tape& tape, const BasicTensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (m == 0) throw DomainError("max_rows: no rows");
  std::vector<T> out(x.data().begin(), x.data().begin() + n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t i = 1; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const T v = x.data()[i * n + j];
      if (v > out[j]) {
        out[j] = v;
        arg[j] = i;
      }
    }
  }
  return tape.record<T>("max_rows", {1, n}, std::move(out), {&x},
                        [x, arg = std::move(arg), n](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t j = 0; j < n; ++j) gx[arg[j] * n + j] += g[j];
                        });
}

/// Sum of all entries as a 1 x 1 tensor.
template <class T>
BasicTensor<T> sum(Tape& tape, const BasicTensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  return tape.record<T>("sum", {1, 1}, std::vector<T>{total}, {&x},
                        [x](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
                        });
}

/// Single entry as a 1 x 1 tensor.
template <class T>
BasicTensor<T> select(Tape& tape, const BasicTensor<T>& x, std::size_t row,
                      std::size_t col) {
  if (row >= x.rows() || col >= x.cols()) {
    throw ShapeError("select: (" + std::to_string(row) + "," +
                     std::to_string(col) + ") outside " + x.shape().str());
  }
  const std::size_t idx = row * x.cols() + col;
  return tape.record<T>("select", {1, 1}, std::vector<T>{x.data()[idx]}, {&x},
                        [x, idx](const T* g) { x.mutable_grad()[idx] += g[0]; });
}

/// Rows of x in the given order; indices may repeat.
template <class T>
BasicTensor<T> gather_rows(Tape& tape, const BasicTensor<T>& x,
                           std::vector<std::size_t> indices) {
  const std::size_t n = x.cols();
  std::vector<T> out;
  out.reserve(indices.size() * n);
  for (const auto r : indices) {
    if (r >= x.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " outside " +
                       x.shape().str());
    }
    const auto row = x.data().subspan(r * n, n);
    out.insert(out.end(), row.begin(), row.end());
  }
  const Shape shape{indices.size(), n};
  return tape.record<T>("gather_rows", shape, std::move(out), {&x},
                        [x, indices = std::move(indices), n](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < indices.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              gx[indices[i] * n + j] += g[i * n + j];
                        });
}

template <class T>
BasicTensor<T> slice_rows(Tape& tape, const BasicTensor<T>& x, std::size_t begin,
                          std::size_t end) {
  if (begin > end || end > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + x.shape().str());
  }
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather_rows(tape, x, std::move(idx));
}

/// Stacks a on top of b.
template <class T>
BasicTensor<T> concat_rows(Tape& tape, const BasicTensor<T>& a,
                           const BasicTensor<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: column mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.size();
  return tape.record<T>("concat_rows", {a.rows() + b.rows(), a.cols()},
                        std::move(out), {&a, &b}, [a, b, na](const T* g) {
                          if (a.requires_grad()) {
                            T* ga = a.mutable_grad().data();
                            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                          }
                          if (b.requires_grad()) {
                            T* gb = b.mutable_grad().data();
                            for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[na + i];
                          }
                        });
}

/// Columns [begin, end).
template <class T>
BasicTensor<T> slice_cols(Tape& tape, const BasicTensor<T>& x, std::size_t begin,
                          std::size_t end) {
  if (begin > end || end > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + x.shape().str());
  }
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<T> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + begin, w, out.data() + i * w);
  return tape.record<T>("slice_cols", {m, w}, std::move(out), {&x},
                        [x, m, n, w, begin](const T* g) {
                          T* gx = x.mutable_grad().data();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < w; ++j)
                              gx[i * n + begin + j] += g[i * w + j];
                        });
}

/// Side-by-side concatenation [a | b].
template <class T>
BasicTensor<T> concat_cols(Tape& tape, const BasicTensor<T>& a,
                           const BasicTensor<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  const std::size_t m = a.rows(), wa = a.cols(), wb = b.cols(), w = wa + wb;
  std::vector<T> out(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * wa, wa, out.data() + i * w);
    std::copy_n(b.data().data() + i * wb, wb, out.data() + i * w + wa);
  }
  return tape.record<T>("concat_cols", {m, w}, std::move(out), {&a, &b},
                        [a, b, m, wa, wb, w](const T* g) {
                          if (a.requires_grad()) {
                            T* ga = a.mutable_grad().data();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < wa; ++j)
                                ga[i * wa + j] += g[i * w + j];
                          }
                          if (b.requires_grad()) {
                            T* gb = b.mutable_grad().data();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < wb; ++j)
                                gb[i * wb + j] += g[i * w + wa + j];
                          }
                        });
}

template <class T>
BasicTensor<T> concat_cols(Tape& tape, const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  BasicTensor<T> acc = parts.front();
  for (std::size_t p = 1; p < parts.size(); ++p) acc = concat_cols(tape, acc, parts[p]);
  return acc;
}

/// Per-channel 2-D convolution with zero padding, preserving grid size.
/// `x` holds side*side tokens (row-major grid positions) by C channels;
/// `kernel` is C x (ksize*ksize), `bias` is 1 x C.
template <class T>
BasicTensor<T> depthwise_conv2d(Tape& tape, const BasicTensor<T>& x,
                                std::size_t side, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias, std::size_t ksize) {
  const std::size_t channels = x.cols();
  if (x.rows() != side * side) {
    throw ShapeError("depthwise_conv2d: " + x.shape().str() + " is not a " +
                     std::to_string(side) + "x" + std::to_string(side) + " grid");
  }
  if (ksize % 2 == 0) throw ShapeError("depthwise_conv2d: kernel size must be odd");
  if (kernel.shape() != Shape{channels, ksize * ksize} ||
      bias.shape() != Shape{1, channels}) {
    throw ShapeError("depthwise_conv2d: kernel " + kernel.shape().str() +
                     " / bias " + bias.shape().str() + " do not match " +
                     std::to_string(channels) + " channels");
  }
  const auto half = static_cast<std::ptrdiff_t>(ksize / 2);
  const auto s = static_cast<std::ptrdiff_t>(side);
  // Visits every (output position, input position, kernel tap) triple.
  auto for_each_tap = [=](auto&& fn) {
    for (std::ptrdiff_t r = 0; r < s; ++r)
      for (std::ptrdiff_t c = 0; c < s; ++c)
        for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
          const std::ptrdiff_t rr = r + dr;
          if (rr < 0 || rr >= s) continue;
          for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
            const std::ptrdiff_t cc = c + dc;
            if (cc < 0 || cc >= s) continue;
            fn(static_cast<std::size_t>(r * s + c), static_cast<std::size_t>(rr * s + cc),
               static_cast<std::size_t>((dr + half) * static_cast<std::ptrdiff_t>(ksize) +
                                        (dc + half)));
          }
        }
  };
  std::vector<T> out(x.size());
  for (std::size_t p = 0; p < x.rows(); ++p)
    std::copy_n(bias.data().data(), channels, out.data() + p * channels);
  const T* kv = kernel.data().data();
  const T* xv = x.data().data();
  const std::size_t taps = ksize * ksize;
  for_each_tap([&](std::size_t p, std::size_t q, std::size_t tap) {
    T* orow = out.data() + p * channels;
    const T* xrow = xv + q * channels;
    for (std::size_t ch = 0; ch < channels; ++ch) orow[ch] += kv[ch * taps + tap] * xrow[ch];
  });
  return tape.record<T>(
      "depthwise_conv2d", x.shape(), std::move(out), {&x, &kernel, &bias},
      [x, kernel, bias, channels, taps, for_each_tap](const T* g) {
        if (bias.requires_grad()) {
          T* gb = bias.mutable_grad().data();
          for (std::size_t p = 0; p < x.rows(); ++p)
            for (std::size_t ch = 0; ch < channels; ++ch) gb[ch] += g[p * channels + ch];
        }
        T* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
        T* gk = kernel.requires_grad() ? kernel.mutable_grad().data() : nullptr;
        if (gx == nullptr && gk == nullptr) return;
        const T* kv = kernel.data().data();
        const T* xv = x.data().data();
        for_each_tap([&](std::size_t p, std::size_t q, std::size_t tap) {
          const T* grow = g + p * channels;
          if (gx != nullptr) {
            T* gxrow = gx + q * channels;
            for (std::size_t ch = 0; ch < channels; ++ch)
              gxrow[ch] += kv[ch * taps + tap] * grow[ch];
          }
          if (gk != nullptr) {
            const T* xrow = xv + q * channels;
            for (std::size_t ch = 0; ch < channels; ++ch)
              gk[ch * taps + tap] += xrow[ch] * grow[ch];
          }
        });
      });
}

}  // namespace bagforge
