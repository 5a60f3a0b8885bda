#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "first/errors.hpp"
#include "first/gemm.hpp"
#include "first/rng.hpp"
#include "first/tensor.hpp"

namespace first {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
  return Tensor<T>::make(a.shape(), std::move(out), {a, b}, [a, b](const auto& self) {
    const T* g = self.grad.data();
    for (const auto* t : {&a, &b}) {
      if (T* d = grad_target(*t)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += g[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make(a.shape(), std::move(out), {a, b}, [a, b](const auto& self) {
    const T* g = self.grad.data();
    if (T* d = grad_target(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += g[i];
    if (T* d = grad_target(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
  return Tensor<T>::make(a.shape(), std::move(out), {a, b}, [a, b](const auto& self) {
    const T* g = self.grad.data();
    const std::size_t n = self.grad.size();
    if (T* d = grad_target(a)) {
      const T* y = b.data().data();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y[i];
    }
    if (T* d = grad_target(b)) {
      const T* x = a.data().data();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* x = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * s;
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [a, s](const auto& self) {
    T* d = grad_target(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * s;
  });
}

// Multiplies slice b of x (leading axis) by factors[b]; differentiable in both.
template <typename T>
Tensor<T> scale_batch(const Tensor<T>& x, const Tensor<T>& factors) {
  if (x.rank() < 1 || factors.numel() != x.dim(0)) {
    throw DimensionError("scale_batch: factors " + to_string(factors.shape()) + " vs tensor " + to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t inner = x.numel() / batch;
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const T f = factors[b];
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = x[b * inner + i] * f;
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x, factors}, [x, factors, batch, inner](const auto& self) {
    const T* g = self.grad.data();
    if (T* d = grad_target(x)) {
      for (std::size_t b = 0; b < batch; ++b) {
        const T f = factors[b];
        for (std::size_t i = 0; i < inner; ++i) d[b * inner + i] += g[b * inner + i] * f;
      }
    }
    if (T* d = grad_target(factors)) {
      for (std::size_t b = 0; b < batch; ++b) {
        T acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += g[b * inner + i] * x[b * inner + i];
        d[b] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    // Split by sign so exp never overflows.
    if (v >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  auto y = out;
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [x, y = std::move(y)](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t i = 0; i < y.size(); ++i) d[i] += self.grad[i] * y[i] * (T(1) - y[i]);
  });
}

// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  std::vector<T> sig(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    sig[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    out[i] = v * sig[i];
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [x, sig = std::move(sig)](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t i = 0; i < sig.size(); ++i) {
      const T s = sig[i];
      d[i] += self.grad[i] * (s + x[i] * s * (T(1) - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

struct MatmulPlan {
  std::size_t batch = 1, M = 0, K = 0, N = 0;
  bool broadcast_b = false;
  Shape out_shape;
};

inline MatmulPlan plan_matmul(const Shape& a, const Shape& b, bool trans_b) {
  auto fail = [&]() -> MatmulPlan {
    throw DimensionError("matmul: shape mismatch " + to_string(a) + " x " + to_string(b) +
                         (trans_b ? " (b transposed)" : ""));
  };
  if (a.size() < 2 || b.size() < 2) return fail();
  MatmulPlan p;
  const std::size_t bk = trans_b ? b[b.size() - 1] : b[b.size() - 2];
  p.N = trans_b ? b[b.size() - 2] : b[b.size() - 1];
  p.K = a.back();
  if (p.K != bk) return fail();
  if (b.size() == 2) {
    // Weight matrix shared across every leading index of a.
    p.broadcast_b = true;
    p.M = numel_of(a) / p.K;
  } else {
    if (a.size() != b.size() || !std::equal(a.begin(), a.end() - 2, b.begin())) return fail();
    p.M = a[a.size() - 2];
    p.batch = numel_of(a) / (p.M * p.K);
  }
  p.out_shape = a;
  p.out_shape.back() = p.N;
  return p;
}

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  const MatmulPlan p = plan_matmul(a.shape(), b.shape(), trans_b);
  std::vector<T> out(numel_of(p.out_shape));
  const std::size_t a_stride = p.M * p.K, b_stride = p.broadcast_b ? 0 : p.K * p.N, c_stride = p.M * p.N;
  for (std::size_t s = 0; s < p.batch; ++s) {
    kernels::gemm<T>(false, trans_b, p.M, p.N, p.K, a.data().data() + s * a_stride, b.data().data() + s * b_stride,
                     out.data() + s * c_stride, false);
  }
  return Tensor<T>::make(p.out_shape, std::move(out), {a, b}, [a, b, p, trans_b](const auto& self) {
    const std::size_t a_stride = p.M * p.K, b_stride = p.broadcast_b ? 0 : p.K * p.N, c_stride = p.M * p.N;
    const T* g = self.grad.data();
    if (T* da = grad_target(a)) {
      // dA = dC * op(B)^T
      for (std::size_t s = 0; s < p.batch; ++s) {
        kernels::gemm<T>(false, !trans_b, p.M, p.K, p.N, g + s * c_stride, b.data().data() + s * b_stride,
                         da + s * a_stride, true);
      }
    }
    if (T* db = grad_target(b)) {
      for (std::size_t s = 0; s < p.batch; ++s) {
        const T* as = a.data().data() + s * a_stride;
        const T* gs = g + s * c_stride;
        if (!trans_b) {
          // dB[K,N] = A^T dC
          kernels::gemm<T>(true, false, p.K, p.N, p.M, as, gs, db + s * b_stride, true);
        } else {
          // dB[N,K] = dC^T A
          kernels::gemm<T>(true, false, p.N, p.K, p.M, gs, as, db + s * b_stride, true);
        }
      }
    }
  });
}

}  // namespace detail

// a[..., M, K] x b[K, N]  (b broadcast over a's leading dims), or
// a[S..., M, K] x b[S..., K, N] with identical leading dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, false);
}

// a x b^T on the last two axes; b is [N, K] or [S..., N, K].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, true);
}

// ---------------------------------------------------------------------------
// Normalizations and reductions

// Keep-mask over the last two axes of a softmax input, broadcast over the
// leading axes. keep[r * cols + c] != 0 means column c is visible to row r.
struct RowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  bool allowed(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }

  // Row r sees columns [0, offset + r].
  static RowMask causal(std::size_t rows, std::size_t cols, std::size_t offset) {
    RowMask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols && c <= offset + r; ++c) m.keep[r * cols + c] = 1;
    return m;
  }
};

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const std::optional<RowMask>& mask = std::nullopt) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows_total = x.numel() / cols;
  const std::size_t rows = x.rank() >= 2 ? x.dim(x.rank() - 2) : 1;
  if (mask && (mask->cols != cols || mask->rows != rows || mask->keep.size() != rows * cols)) {
    throw DimensionError("softmax_rows: mask [" + std::to_string(mask->rows) + "," + std::to_string(mask->cols) +
                         "] not broadcastable to " + to_string(x.shape()));
  }
  std::vector<T> out(x.numel(), T(0));
  const T* in = x.data().data();
  for (std::size_t row = 0; row < rows_total; ++row) {
    const std::size_t r = row % rows;
    const T* xi = in + row * cols;
    T* yi = out.data() + row * cols;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask && !mask->allowed(r, c)) continue;
      any = true;
      mx = std::max(mx, xi[c]);
    }
    if (!any) throw DegenerateInputError("softmax_rows: row " + std::to_string(row) + " is fully masked");
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask && !mask->allowed(r, c)) continue;
      yi[c] = std::exp(xi[c] - mx);
      sum += yi[c];
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < cols; ++c) yi[c] *= inv;
  }
  auto y = out;
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [x, y = std::move(y), cols](const auto& self) {
    T* d = grad_target(x);
    const T* g = self.grad.data();
    for (std::size_t row = 0; row < y.size() / cols; ++row) {
      const T* yi = y.data() + row * cols;
      const T* gi = g + row * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += gi[c] * yi[c];
      for (std::size_t c = 0; c < cols; ++c) d[row * cols + c] += yi[c] * (gi[c] - dot);
    }
  });
}

// Arithmetic mean along one axis; the axis is removed from the shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(axis);
  if (n == 0) throw DegenerateInputError("mean_axis: zero-length axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : out) v /= static_cast<T>(n);
  return Tensor<T>::make(std::move(out_shape), std::move(out), {x}, [x, outer, inner, n, inv](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) d[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
  });
}

// Mean over the last axis of x[B, n] restricted to mask[b * n + j] != 0.
template <typename T>
Tensor<T> masked_mean_last(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() != 2 || mask.size() != x.numel()) {
    throw DimensionError("masked_mean_last: expects [B,n] input with matching mask, got " + to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1);
  std::vector<T> out(batch, T(0));
  std::vector<T> inv(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[b * n + j]) {
        out[b] += x[b * n + j];
        ++count;
      }
    }
    if (count == 0) throw DegenerateInputError("masked_mean_last: sequence " + std::to_string(b) + " has no valid tokens");
    inv[b] = T(1) / static_cast<T>(count);
    out[b] /= static_cast<T>(count);
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return Tensor<T>::make(Shape{batch}, std::move(out), {x},
                         [x, m = std::move(m), inv = std::move(inv), n](const auto& self) {
                           T* d = grad_target(x);
                           for (std::size_t b = 0; b < inv.size(); ++b)
                             for (std::size_t j = 0; j < n; ++j)
                               if (m[b * n + j]) d[b * n + j] += self.grad[b] * inv[b];
                         });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::make(Shape{}, std::vector<T>{acc}, {x}, [x](const auto& self) {
    T* d = grad_target(x);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.numel(); ++i) d[i] += g;
  });
}

// Sum of squared entries (squared l2 norm).
template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v * v;
  return Tensor<T>::make(Shape{}, std::vector<T>{acc}, {x}, [x](const auto& self) {
    T* d = grad_target(x);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.numel(); ++i) d[i] += T(2) * g * x[i];
  });
}

// Mean next-token NLL. logits are [..., V]; targets and ignore have one entry
// per row. ignore[i] != 0 drops row i from the mean.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore = {}) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows || (!ignore.empty() && ignore.size() != rows)) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         to_string(logits.shape()));
  }
  std::vector<T> probs(logits.numel());
  std::vector<std::uint8_t> used(rows, 0);
  std::size_t count = 0;
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!ignore.empty() && ignore[r]) continue;
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw VocabularyError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    const T* z = logits.data().data() + r * vocab;
    T mx = *std::max_element(z, z + vocab);
    T sum = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(z[c] - mx);
      sum += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= sum;
    loss += -(z[t] - mx - std::log(sum));
    used[r] = 1;
    ++count;
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: every position is masked");
  const T inv = T(1) / static_cast<T>(count);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return Tensor<T>::make(
      Shape{}, std::vector<T>{loss * inv}, {logits},
      [logits, probs = std::move(probs), used = std::move(used), tg = std::move(tg), vocab, inv](const auto& self) {
        T* d = grad_target(logits);
        const T g = self.grad[0] * inv;
        for (std::size_t r = 0; r < used.size(); ++r) {
          if (!used[r]) continue;
          for (std::size_t c = 0; c < vocab; ++c) d[r * vocab + c] += g * probs[r * vocab + c];
          d[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
        }
      });
}

// x / sqrt(mean(x^2) + eps) * weight over the last axis.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5)) {
  const std::size_t dim = x.shape().back();
  if (weight.numel() != dim) {
    throw DimensionError("rmsnorm: weight " + to_string(weight.shape()) + " vs input " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / dim;
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.data().data() + r * dim;
    T ms = 0;
    for (std::size_t c = 0; c < dim; ++c) ms += xi[c] * xi[c];
    ms /= static_cast<T>(dim);
    inv_rms[r] = T(1) / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < dim; ++c) out[r * dim + c] = xi[c] * inv_rms[r] * weight[c];
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x, weight},
                         [x, weight, inv_rms = std::move(inv_rms), dim](const auto& self) {
                           const T* g = self.grad.data();
                           T* dx = grad_target(x);
                           T* dw = grad_target(weight);
                           for (std::size_t r = 0; r < inv_rms.size(); ++r) {
                             const T* xi = x.data().data() + r * dim;
                             const T* gi = g + r * dim;
                             const T ir = inv_rms[r];
                             if (dw) {
                               for (std::size_t c = 0; c < dim; ++c) dw[c] += gi[c] * xi[c] * ir;
                             }
                             if (dx) {
                               T dot = 0;  // sum(dxhat * xhat)
                               for (std::size_t c = 0; c < dim; ++c) dot += gi[c] * weight[c] * xi[c] * ir;
                               dot /= static_cast<T>(dim);
                               for (std::size_t c = 0; c < dim; ++c) {
                                 dx[r * dim + c] += ir * (gi[c] * weight[c] - xi[c] * ir * dot);
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Gather / layout

// table[V, D] gathered at ids; result shape is out_prefix + [D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape out_prefix) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + to_string(table.shape()));
  if (numel_of(out_prefix) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for shape " + to_string(out_prefix));
  }
  const std::size_t vocab = table.dim(0), dim = table.dim(1);
  std::vector<T> out(ids.size() * dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * dim, dim, out.data() + i * dim);
  }
  out_prefix.push_back(dim);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return Tensor<T>::make(std::move(out_prefix), std::move(out), {table},
                         [table, idx = std::move(idx), dim](const auto& self) {
                           T* d = grad_target(table);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             T* row = d + static_cast<std::size_t>(idx[i]) * dim;
                             for (std::size_t c = 0; c < dim; ++c) row[c] += self.grad[i * dim + c];
                           }
                         });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return Tensor<T>::make(std::move(shape), x.values(), {x}, [x](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

// Axis permutation for tensors of rank <= 4: out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank || rank > 4) {
    throw DimensionError("permute: permutation of size " + std::to_string(perm.size()) + " for " + to_string(x.shape()));
  }
  // Pad to rank 4 with leading unit axes.
  std::size_t in_dims[4] = {1, 1, 1, 1}, in_strides[4] = {0, 0, 0, 0};
  const std::size_t pad = 4 - rank;
  for (std::size_t i = 0; i < rank; ++i) in_dims[pad + i] = x.dim(i);
  {
    std::size_t s = 1;
    for (int i = 3; i >= 0; --i) {
      in_strides[i] = s;
      s *= in_dims[i];
    }
  }
  std::size_t p4[4] = {0, 1, 2, 3};
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank) throw DimensionError("permute: axis out of range");
    p4[pad + i] = pad + perm[i];
  }
  std::size_t od[4], os[4];
  for (std::size_t i = 0; i < 4; ++i) {
    od[i] = in_dims[p4[i]];
    os[i] = in_strides[p4[i]];
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  // src index for each output element, shared with backward.
  std::vector<std::size_t> src(x.numel());
  std::size_t k = 0;
  for (std::size_t a = 0; a < od[0]; ++a)
    for (std::size_t b = 0; b < od[1]; ++b)
      for (std::size_t c = 0; c < od[2]; ++c)
        for (std::size_t e = 0; e < od[3]; ++e) src[k++] = a * os[0] + b * os[1] + c * os[2] + e * os[3];
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
  return Tensor<T>::make(std::move(out_shape), std::move(out), {x}, [x, src = std::move(src)](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t i = 0; i < src.size(); ++i) d[src[i]] += self.grad[i];
  });
}

// Swap of the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2 for " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, std::move(perm));
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw DimensionError("concat: " + to_string(a.shape()) + " and " + to_string(b.shape()) + " on axis " +
                         std::to_string(axis));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat: " + to_string(a.shape()) + " and " + to_string(b.shape()) + " on axis " +
                           std::to_string(axis));
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t na = a.dim(axis) * inner, nb = b.dim(axis) * inner;
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  std::vector<T> out(a.numel() + b.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * na, na, out.data() + o * (na + nb));
    std::copy_n(b.data().data() + o * nb, nb, out.data() + o * (na + nb) + na);
  }
  return Tensor<T>::make(std::move(shape), std::move(out), {a, b}, [a, b, outer, na, nb](const auto& self) {
    const T* g = self.grad.data();
    if (T* d = grad_target(a))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < na; ++i) d[o * na + i] += g[o * (na + nb) + i];
    if (T* d = grad_target(b))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < nb; ++i) d[o * nb + i] += g[o * (na + nb) + na + i];
  });
}

// Contiguous range [start, start + length) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis) * inner, part = length * inner, off = start * inner;
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> out(outer * part);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * full + off, part, out.data() + o * part);
  return Tensor<T>::make(std::move(shape), std::move(out), {x}, [x, outer, full, part, off](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < part; ++i) d[o * full + off + i] += self.grad[o * part + i];
  });
}

// Rotary position embedding on x[..., n, head_dim]; row j gets position
// start + j. Adjacent pairs (2i, 2i+1) rotate by pos * theta^(-2i/head_dim).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t start, double theta = 10000.0) {
  if (x.rank() < 2 || x.shape().back() % 2 != 0) {
    throw DimensionError("rope: needs [..., n, even head_dim], got " + to_string(x.shape()));
  }
  const std::size_t hd = x.shape().back(), n = x.dim(x.rank() - 2);
  const std::size_t half = hd / 2;
  std::vector<T> cs(n * half), sn(n * half);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(start + j) * freq;
      cs[j * half + i] = static_cast<T>(std::cos(ang));
      sn[j * half + i] = static_cast<T>(std::sin(ang));
    }
  }
  std::vector<T> out(x.numel());
  const std::size_t rows = x.numel() / hd;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t j = r % n;
    const T* xi = x.data().data() + r * hd;
    T* yi = out.data() + r * hd;
    for (std::size_t i = 0; i < half; ++i) {
      const T c = cs[j * half + i], s = sn[j * half + i];
      yi[2 * i] = xi[2 * i] * c - xi[2 * i + 1] * s;
      yi[2 * i + 1] = xi[2 * i] * s + xi[2 * i + 1] * c;
    }
  }
  return Tensor<T>::make(x.shape(), std::move(out), {x},
                         [x, cs = std::move(cs), sn = std::move(sn), n, hd, half](const auto& self) {
                           T* d = grad_target(x);
                           for (std::size_t r = 0; r < x.numel() / hd; ++r) {
                             const std::size_t j = r % n;
                             const T* g = self.grad.data() + r * hd;
                             for (std::size_t i = 0; i < half; ++i) {
                               const T c = cs[j * half + i], s = sn[j * half + i];
                               d[r * hd + 2 * i] += g[2 * i] * c + g[2 * i + 1] * s;
                               d[r * hd + 2 * i + 1] += -g[2 * i] * s + g[2 * i + 1] * c;
                             }
                           }
                         });
}

// Inverted dropout: kept entries scaled by 1/(1-rate).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() < rate ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor[i];
  return Tensor<T>::make(x.shape(), std::move(out), {x}, [x, factor = std::move(factor)](const auto& self) {
    T* d = grad_target(x);
    for (std::size_t i = 0; i < factor.size(); ++i) d[i] += self.grad[i] * factor[i];
  });
}

}  // namespace first
