#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "effir/tensor.hpp"

// Differentiable operations. Every op takes an optional tape; with a null
// tape it runs forward-only and the output does not require grad. Gradients
// accumulate (+=) so fan-out sums naturally.
//
// Tensors are passed by value: copies are shallow handles onto shared
// storage, and backward closures need mutable handles to write gradients.
namespace effir {

namespace detail {

// raw matmul kernels on flat buffers
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[a,b] += x[m,a]^T * y[m,b]
template <typename T>
void mm_tn(const T* x, const T* y, T* c, std::size_t m, std::size_t a, std::size_t b) {
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x + r * a;
    const T* yr = y + r * b;
    for (std::size_t i = 0; i < a; ++i) {
      const T xi = xr[i];
      if (xi == T(0)) continue;
      T* ci = c + i * b;
      for (std::size_t j = 0; j < b; ++j) ci[j] += xi * yr[j];
    }
  }
}

template <typename T>
bool want_grad(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---- matrix ops ----

template <typename T>
TensorT<T> matmul(TensorT<T> a, TensorT<T> b, TapePtr<T> tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ContractError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool g = detail::want_grad(tape, {&a, &b});
  TensorT<T> c(Shape{m, n}, g);
  detail::mm_nn(a.data(), b.data(), c.data(), m, k, n);
  if (g) {
    tape->record([a, b, c, m, k, n]() mutable {
      if (a.requires_grad()) detail::mm_nt(c.grad(), b.data(), a.grad(), m, n, k);
      if (b.requires_grad()) detail::mm_tn(a.data(), c.grad(), b.grad(), m, k, n);
    });
  }
  return c;
}

// a * b^T; the workhorse behind every linear projection
template <typename T>
TensorT<T> matmul_nt(TensorT<T> a, TensorT<T> b, TapePtr<T> tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ContractError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool g = detail::want_grad(tape, {&a, &b});
  TensorT<T> c(Shape{m, n}, g);
  detail::mm_nt(a.data(), b.data(), c.data(), m, k, n);
  if (g) {
    tape->record([a, b, c, m, k, n]() mutable {
      if (a.requires_grad()) detail::mm_nn(c.grad(), b.data(), a.grad(), m, n, k);
      if (b.requires_grad()) detail::mm_tn(c.grad(), a.data(), b.grad(), m, n, k);
    });
  }
  return c;
}

template <typename T>
TensorT<T> transpose(TensorT<T> x, TapePtr<T> tape) {
  if (x.rank() != 2) throw ContractError("transpose expects rank-2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{n, m}, g);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.at(j, i) = x.at(i, j);
  if (g) {
    tape->record([x, y, m, n]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) x.grad()[i * n + j] += y.grad()[j * m + i];
    });
  }
  return y;
}

// ---- elementwise arithmetic ----

template <typename T>
TensorT<T> add(TensorT<T> a, TensorT<T> b, TapePtr<T> tape) {
  if (a.shape() != b.shape())
    throw ContractError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool g = detail::want_grad(tape, {&a, &b});
  TensorT<T> y(a.shape(), g);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) y.at(i) = a.at(i) + b.at(i);
  if (g) {
    tape->record([a, b, y, n]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < n; ++i) a.grad()[i] += y.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < n; ++i) b.grad()[i] += y.grad()[i];
    });
  }
  return y;
}

template <typename T>
TensorT<T> mul(TensorT<T> a, TensorT<T> b, TapePtr<T> tape) {
  if (a.shape() != b.shape())
    throw ContractError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool g = detail::want_grad(tape, {&a, &b});
  TensorT<T> y(a.shape(), g);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) y.at(i) = a.at(i) * b.at(i);
  if (g) {
    tape->record([a, b, y, n]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < n; ++i) a.grad()[i] += y.grad()[i] * b.at(i);
      if (b.requires_grad())
        for (std::size_t i = 0; i < n; ++i) b.grad()[i] += y.grad()[i] * a.at(i);
    });
  }
  return y;
}

template <typename T>
TensorT<T> scale(TensorT<T> x, T c, TapePtr<T> tape) {
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y.at(i) = x.at(i) * c;
  if (g) {
    tape->record([x, y, c, n]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < n; ++i) x.grad()[i] += y.grad()[i] * c;
    });
  }
  return y;
}

template <typename T>
TensorT<T> add_scalar(TensorT<T> x, T c, TapePtr<T> tape) {
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y.at(i) = x.at(i) + c;
  if (g) {
    tape->record([x, y, n]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < n; ++i) x.grad()[i] += y.grad()[i];
    });
  }
  return y;
}

// y[i,j] = x[i,j] * v[j]; the only broadcast beyond scalars
template <typename T>
TensorT<T> mul_rowvec(TensorT<T> x, TensorT<T> v, TapePtr<T> tape) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw ContractError("mul_rowvec shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  const bool g = detail::want_grad(tape, {&x, &v});
  TensorT<T> y(x.shape(), g);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.at(i, j) = x.at(i, j) * v.at(j);
  if (g) {
    tape->record([x, v, y, m, n]() mutable {
      if (x.requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) x.grad()[i * n + j] += y.grad()[i * n + j] * v.at(j);
      if (v.requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) v.grad()[j] += y.grad()[i * n + j] * x.at(i, j);
    });
  }
  return y;
}

// ---- elementwise nonlinearities ----

namespace detail {

template <typename T, typename Fwd, typename Dfn>
TensorT<T> unary_op(TensorT<T> x, TapeT<T>* tape, Fwd fwd, Dfn dfn) {
  const bool g = want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y.at(i) = fwd(x.at(i));
  if (g) {
    tape->record([x, y, dfn, n]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < n; ++i) x.grad()[i] += y.grad()[i] * dfn(x.at(i), y.at(i));
    });
  }
  return y;
}

template <typename T>
T sigmoid_val(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
TensorT<T> relu(TensorT<T> x, TapePtr<T> tape) {
  return detail::unary_op(
      std::move(x), tape, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(TensorT<T> x, TapePtr<T> tape) {
  return detail::unary_op(
      std::move(x), tape, [](T v) { return detail::sigmoid_val(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> silu(TensorT<T> x, TapePtr<T> tape) {
  return detail::unary_op(
      std::move(x), tape, [](T v) { return v * detail::sigmoid_val(v); },
      [](T v, T) {
        const T s = detail::sigmoid_val(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
TensorT<T> gelu(TensorT<T> x, TapePtr<T> tape) {
  static constexpr double inv_sqrt2 = 0.7071067811865475244;
  static constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      std::move(x), tape,
      [](T v) { return static_cast<T>(0.5 * double(v) * (1.0 + std::erf(double(v) * inv_sqrt2))); },
      [](T v, T) {
        const double phi = 0.5 * (1.0 + std::erf(double(v) * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v));
        return static_cast<T>(phi + double(v) * pdf);
      });
}

template <typename T>
TensorT<T> abs(TensorT<T> x, TapePtr<T> tape) {
  return detail::unary_op(
      std::move(x), tape, [](T v) { return v < T(0) ? -v : v; },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// ---- softmax family ----

namespace detail {

struct AxisIter {
  std::size_t outer, axis, inner;
};

inline AxisIter axis_iter(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ContractError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisIter it{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) it.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) it.inner *= shape[i];
  return it;
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(TensorT<T> x, std::size_t axis, TapePtr<T> tape) {
  const auto it = detail::axis_iter(x.shape(), axis);
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t i = 0; i < it.inner; ++i) {
      const std::size_t base = o * it.axis * it.inner + i;
      T mx = x.at(base);
      for (std::size_t k = 1; k < it.axis; ++k) mx = std::max(mx, x.at(base + k * it.inner));
      T sum = T(0);
      for (std::size_t k = 0; k < it.axis; ++k) {
        const T e = std::exp(x.at(base + k * it.inner) - mx);
        y.at(base + k * it.inner) = e;
        sum += e;
      }
      for (std::size_t k = 0; k < it.axis; ++k) y.at(base + k * it.inner) /= sum;
    }
  if (g) {
    tape->record([x, y, it]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t o = 0; o < it.outer; ++o)
        for (std::size_t i = 0; i < it.inner; ++i) {
          const std::size_t base = o * it.axis * it.inner + i;
          T s = T(0);
          for (std::size_t k = 0; k < it.axis; ++k) {
            const std::size_t idx = base + k * it.inner;
            s += y.grad()[idx] * y.at(idx);
          }
          for (std::size_t k = 0; k < it.axis; ++k) {
            const std::size_t idx = base + k * it.inner;
            x.grad()[idx] += y.at(idx) * (y.grad()[idx] - s);
          }
        }
    });
  }
  return y;
}

template <typename T>
TensorT<T> log_softmax(TensorT<T> x, std::size_t axis, TapePtr<T> tape) {
  const auto it = detail::axis_iter(x.shape(), axis);
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t i = 0; i < it.inner; ++i) {
      const std::size_t base = o * it.axis * it.inner + i;
      T mx = x.at(base);
      for (std::size_t k = 1; k < it.axis; ++k) mx = std::max(mx, x.at(base + k * it.inner));
      T sum = T(0);
      for (std::size_t k = 0; k < it.axis; ++k) sum += std::exp(x.at(base + k * it.inner) - mx);
      const T lse = mx + std::log(sum);
      for (std::size_t k = 0; k < it.axis; ++k)
        y.at(base + k * it.inner) = x.at(base + k * it.inner) - lse;
    }
  if (g) {
    tape->record([x, y, it]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t o = 0; o < it.outer; ++o)
        for (std::size_t i = 0; i < it.inner; ++i) {
          const std::size_t base = o * it.axis * it.inner + i;
          T s = T(0);
          for (std::size_t k = 0; k < it.axis; ++k) s += y.grad()[base + k * it.inner];
          for (std::size_t k = 0; k < it.axis; ++k) {
            const std::size_t idx = base + k * it.inner;
            x.grad()[idx] += y.grad()[idx] - std::exp(y.at(idx)) * s;
          }
        }
    });
  }
  return y;
}

// ---- normalization ----

// y[r,i] = gamma[i] * x[r,i] / sqrt(mean_i(x[r,i]^2) + eps), rows = last dim
template <typename T>
TensorT<T> rms_norm(TensorT<T> x, TensorT<T> gamma, T eps, TapePtr<T> tape) {
  if (x.rank() < 1 || x.rank() > 2)
    throw ContractError("rms_norm expects rank 1 or 2, got " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d)
    throw ContractError("rms_norm gamma " + shape_str(gamma.shape()) + " does not match last dim of " +
                        shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  const bool g = detail::want_grad(tape, {&x, &gamma});
  TensorT<T> y(x.shape(), g);
  std::vector<T> rinv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ms = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T v = x.at(r * d + i);
      ms += v * v;
    }
    ms = ms / static_cast<T>(d) + eps;
    rinv[r] = T(1) / std::sqrt(ms);
    for (std::size_t i = 0; i < d; ++i) y.at(r * d + i) = gamma.at(i) * x.at(r * d + i) * rinv[r];
  }
  if (g) {
    tape->record([x, gamma, y, rinv, rows, d]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T ri = rinv[r];
        if (x.requires_grad()) {
          T dp = T(0);
          for (std::size_t i = 0; i < d; ++i)
            dp += y.grad()[r * d + i] * gamma.at(i) * x.at(r * d + i);
          const T coef = dp * ri * ri * ri / static_cast<T>(d);
          for (std::size_t i = 0; i < d; ++i)
            x.grad()[r * d + i] += y.grad()[r * d + i] * gamma.at(i) * ri - coef * x.at(r * d + i);
        }
        if (gamma.requires_grad())
          for (std::size_t i = 0; i < d; ++i)
            gamma.grad()[i] += y.grad()[r * d + i] * x.at(r * d + i) * ri;
      }
    });
  }
  return y;
}

// y = x / ||x||_2 for a rank-1 vector
template <typename T>
TensorT<T> l2_normalize(TensorT<T> x, TapePtr<T> tape) {
  if (x.rank() != 1) throw ContractError("l2_normalize expects rank-1, got " + shape_str(x.shape()));
  const std::size_t n = x.numel();
  T sq = T(0);
  for (std::size_t i = 0; i < n; ++i) sq += x.at(i) * x.at(i);
  const T norm = std::sqrt(sq);
  if (!(norm > T(0))) throw NumericError("l2_normalize of a zero vector");
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(x.shape(), g);
  for (std::size_t i = 0; i < n; ++i) y.at(i) = x.at(i) / norm;
  if (g) {
    tape->record([x, y, norm, n]() mutable {
      if (!x.requires_grad()) return;
      T dp = T(0);
      for (std::size_t i = 0; i < n; ++i) dp += y.grad()[i] * y.at(i);
      for (std::size_t i = 0; i < n; ++i) x.grad()[i] += (y.grad()[i] - y.at(i) * dp) / norm;
    });
  }
  return y;
}

// ---- gather / slice / assembly ----

template <typename T>
TensorT<T> gather_rows(TensorT<T> table, std::vector<std::size_t> ids, TapePtr<T> tape) {
  if (table.rank() != 2) throw ContractError("gather_rows expects a rank-2 table");
  const std::size_t d = table.dim(1);
  for (std::size_t id : ids)
    if (id >= table.dim(0))
      throw ContractError("row id " + std::to_string(id) + " out of range for table " + shape_str(table.shape()));
  const bool g = detail::want_grad(tape, {&table});
  TensorT<T> y(Shape{ids.size(), d}, g);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + ids[i] * d, d, y.data() + i * d);
  if (g) {
    tape->record([table, ids, y, d]() mutable {
      if (!table.requires_grad()) return;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) table.grad()[ids[i] * d + j] += y.grad()[i * d + j];
    });
  }
  return y;
}

template <typename T>
TensorT<T> take_row(TensorT<T> x, std::size_t row, TapePtr<T> tape) {
  if (x.rank() != 2 || row >= x.dim(0))
    throw ContractError("take_row " + std::to_string(row) + " out of range for " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{d}, g);
  std::copy_n(x.data() + row * d, d, y.data());
  if (g) {
    tape->record([x, y, row, d]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t j = 0; j < d; ++j) x.grad()[row * d + j] += y.grad()[j];
    });
  }
  return y;
}

template <typename T>
TensorT<T> mean_rows(TensorT<T> x, TapePtr<T> tape) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ContractError("mean_rows expects a non-empty rank-2 tensor");
  const std::size_t m = x.dim(0), d = x.dim(1);
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{d}, g);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) y.at(j) += x.at(i, j);
  for (std::size_t j = 0; j < d; ++j) y.at(j) /= static_cast<T>(m);
  if (g) {
    tape->record([x, y, m, d]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) x.grad()[i * d + j] += y.grad()[j] / static_cast<T>(m);
    });
  }
  return y;
}

template <typename T>
TensorT<T> slice_cols(TensorT<T> x, std::size_t c0, std::size_t c1, TapePtr<T> tape) {
  if (x.rank() != 2 || c0 >= c1 || c1 > x.dim(1))
    throw ContractError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") invalid for " +
                        shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{m, w}, g);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data() + i * n + c0, w, y.data() + i * w);
  if (g) {
    tape->record([x, y, c0, m, n, w]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) x.grad()[i * n + c0 + j] += y.grad()[i * w + j];
    });
  }
  return y;
}

template <typename T>
TensorT<T> concat_cols(std::vector<TensorT<T>> parts, TapePtr<T> tape) {
  if (parts.empty()) throw ContractError("concat_cols of zero parts");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  bool g = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m)
      throw ContractError("concat_cols row mismatch: " + shape_str(p.shape()));
    total += p.dim(1);
    g = g || (tape && p.requires_grad());
  }
  TensorT<T> y(Shape{m, total}, g);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data() + i * w, w, y.data() + i * total + off);
    off += w;
  }
  if (g) {
    tape->record([parts, y, m, total]() mutable {
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) p.grad()[i * w + j] += y.grad()[i * total + off + j];
        off += w;
      }
    });
  }
  return y;
}

// rank-1 parts of equal length stacked into a matrix, one per row
template <typename T>
TensorT<T> stack_rows(std::vector<TensorT<T>> parts, TapePtr<T> tape) {
  if (parts.empty()) throw ContractError("stack_rows of zero parts");
  const std::size_t d = parts[0].numel();
  bool g = false;
  for (const auto& p : parts) {
    if (p.rank() != 1 || p.numel() != d)
      throw ContractError("stack_rows expects equal-length vectors, got " + shape_str(p.shape()));
    g = g || (tape && p.requires_grad());
  }
  TensorT<T> y(Shape{parts.size(), d}, g);
  for (std::size_t i = 0; i < parts.size(); ++i) std::copy_n(parts[i].data(), d, y.data() + i * d);
  if (g) {
    tape->record([parts, y, d]() mutable {
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (parts[i].requires_grad())
          for (std::size_t j = 0; j < d; ++j) parts[i].grad()[j] += y.grad()[i * d + j];
    });
  }
  return y;
}

// ---- reductions ----

template <typename T>
TensorT<T> sum_all(TensorT<T> x, TapePtr<T> tape) {
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{1}, g);
  T s = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
  y.at(0) = s;
  if (g) {
    tape->record([x, y]() mutable {
      if (!x.requires_grad()) return;
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += y.grad()[0];
    });
  }
  return y;
}

template <typename T>
TensorT<T> mean_all(TensorT<T> x, TapePtr<T> tape) {
  if (x.numel() == 0) throw ContractError("mean_all of an empty tensor");
  const T inv = T(1) / static_cast<T>(x.numel());
  return scale(sum_all(std::move(x), tape), inv, tape);
}

template <typename T>
TensorT<T> dot(TensorT<T> a, TensorT<T> b, TapePtr<T> tape) {
  if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel())
    throw ContractError("dot shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool g = detail::want_grad(tape, {&a, &b});
  TensorT<T> y(Shape{1}, g);
  T s = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i) * b.at(i);
  y.at(0) = s;
  if (g) {
    tape->record([a, b, y]() mutable {
      const T dy = y.grad()[0];
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += dy * b.at(i);
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += dy * a.at(i);
    });
  }
  return y;
}

template <typename T>
TensorT<T> stack_scalars(std::vector<TensorT<T>> parts, TapePtr<T> tape) {
  if (parts.empty()) throw ContractError("stack_scalars of zero parts");
  bool g = false;
  for (const auto& p : parts) {
    if (!p.is_scalar()) throw ContractError("stack_scalars expects scalars, got " + shape_str(p.shape()));
    g = g || (tape && p.requires_grad());
  }
  TensorT<T> y(Shape{parts.size()}, g);
  for (std::size_t i = 0; i < parts.size(); ++i) y.at(i) = parts[i].at(0);
  if (g) {
    tape->record([parts, y]() mutable {
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (parts[i].requires_grad()) parts[i].grad()[0] += y.grad()[i];
    });
  }
  return y;
}

// scalar pick by flat index
template <typename T>
TensorT<T> take(TensorT<T> x, std::size_t index, TapePtr<T> tape) {
  if (index >= x.numel())
    throw ContractError("take index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  const bool g = detail::want_grad(tape, {&x});
  TensorT<T> y(Shape{1}, g);
  y.at(0) = x.at(index);
  if (g) {
    tape->record([x, y, index]() mutable {
      if (x.requires_grad()) x.grad()[index] += y.grad()[0];
    });
  }
  return y;
}

}  // namespace effir
