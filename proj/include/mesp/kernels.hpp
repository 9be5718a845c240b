#pragma once
// Numeric kernels: matmul, batched matmul, softmax, RMSNorm, SiLU and
// cross entropy, each with its backward. All loops are plain and fixed in
// order, so a given build produces bit-identical results for identical
// inputs. That determinism is load bearing: the gradient strategies are
// compared bit-for-bit against each other.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>

#include "mesp/tensor.hpp"

namespace mesp {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Fold every dimension but the last `keep` into a row count.
inline int64_t leading_rows(const Shape& s, size_t keep) {
  int64_t rows = 1;
  for (size_t i = 0; i + keep < s.size(); ++i) rows *= s[i];
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

// a + s * b in one pass; the fusion fixes the floating point evaluation
// order for LoRA's y = base + s * (h B).
template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T s) {
  detail::require(a.shape() == b.shape(), "add_scaled: shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + s * pb[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = s * pa[i];
  return out;
}

// Multiply each trailing-dimension row of `a` elementwise by vector `g`.
// Used for RMSNorm's frozen gain.
template <typename T>
Tensor<T> row_mul(const Tensor<T>& a, const Tensor<T>& g) {
  detail::require(g.rank() == 1 && a.rank() >= 1 && a.shape().back() == g.dim(0),
                  "row_mul: gain " + shape_str(g.shape()) + " does not match rows of " +
                      shape_str(a.shape()));
  Tensor<T> out(a.shape());
  int64_t d = g.dim(0);
  int64_t rows = detail::leading_rows(a.shape(), 1);
  const T* pa = a.data();
  const T* pg = g.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = pa[r * d + j] * pg[j];
  return out;
}

// ---------------------------------------------------------------------------
// matmul against shared weights: x [... , n, p] times w [p, q]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require(w.rank() == 2 && x.rank() >= 2 && x.shape().back() == w.dim(0),
                  "matmul: inner dimension mismatch " + shape_str(x.shape()) + " x " +
                      shape_str(w.shape()));
  int64_t p = w.dim(0), q = w.dim(1);
  int64_t rows = detail::leading_rows(x.shape(), 1);
  Shape out_shape = x.shape();
  out_shape.back() = q;
  Tensor<T> out(out_shape);
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  for (int64_t i = 0; i < rows; ++i) {
    T* orow = po + i * q;
    const T* xrow = px + i * p;
    for (int64_t k = 0; k < p; ++k) {
      T xv = xrow[k];
      const T* wrow = pw + k * q;
      for (int64_t j = 0; j < q; ++j) orow[j] += xv * wrow[j];
    }
  }
  return out;
}

// Returns (dx, dw) for y = x w given upstream g with y's shape.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_backward(const Tensor<T>& g, const Tensor<T>& x,
                                                const Tensor<T>& w) {
  detail::require(w.rank() == 2 && x.rank() >= 2 && x.shape().back() == w.dim(0),
                  "matmul_backward: inner dimension mismatch " + shape_str(x.shape()) + " x " +
                      shape_str(w.shape()));
  int64_t p = w.dim(0), q = w.dim(1);
  int64_t rows = detail::leading_rows(x.shape(), 1);
  detail::require(g.shape().back() == q && detail::leading_rows(g.shape(), 1) == rows,
                  "matmul_backward: upstream shape " + shape_str(g.shape()) +
                      " does not match output of " + shape_str(x.shape()) + " x " +
                      shape_str(w.shape()));
  Tensor<T> dx(x.shape());
  Tensor<T> dw(w.shape());
  const T* pg = g.data();
  const T* px = x.data();
  const T* pw = w.data();
  T* pdx = dx.data();
  T* pdw = dw.data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* grow = pg + i * q;
    const T* xrow = px + i * p;
    T* dxrow = pdx + i * p;
    for (int64_t k = 0; k < p; ++k) {
      const T* wrow = pw + k * q;
      T acc = 0;
      for (int64_t j = 0; j < q; ++j) acc += grow[j] * wrow[j];
      dxrow[k] = acc;
      T xv = xrow[k];
      T* dwrow = pdw + k * q;
      for (int64_t j = 0; j < q; ++j) dwrow[j] += xv * grow[j];
    }
  }
  return {std::move(dx), std::move(dw)};
}

// dx only; used where the weight is frozen and its gradient is never formed.
template <typename T>
Tensor<T> matmul_backward_input(const Tensor<T>& g, const Tensor<T>& w) {
  detail::require(w.rank() == 2 && g.rank() >= 2 && g.shape().back() == w.dim(1),
                  "matmul_backward_input: upstream " + shape_str(g.shape()) +
                      " does not match weight " + shape_str(w.shape()));
  int64_t p = w.dim(0), q = w.dim(1);
  int64_t rows = detail::leading_rows(g.shape(), 1);
  Shape out_shape = g.shape();
  out_shape.back() = p;
  Tensor<T> dx(out_shape);
  const T* pg = g.data();
  const T* pw = w.data();
  T* pdx = dx.data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* grow = pg + i * q;
    T* dxrow = pdx + i * p;
    for (int64_t k = 0; k < p; ++k) {
      const T* wrow = pw + k * q;
      T acc = 0;
      for (int64_t j = 0; j < q; ++j) acc += grow[j] * wrow[j];
      dxrow[k] = acc;
    }
  }
  return dx;
}

// dw only: dw = sum over rows of x^T g.
template <typename T>
Tensor<T> matmul_backward_weight(const Tensor<T>& g, const Tensor<T>& x, int64_t p, int64_t q) {
  int64_t rows = detail::leading_rows(x.shape(), 1);
  detail::require(x.shape().back() == p && g.shape().back() == q &&
                      detail::leading_rows(g.shape(), 1) == rows,
                  "matmul_backward_weight: shapes " + shape_str(x.shape()) + " and " +
                      shape_str(g.shape()) + " do not contract to [" + std::to_string(p) + "," +
                      std::to_string(q) + "]");
  Tensor<T> dw(Shape{p, q});
  const T* px = x.data();
  const T* pg = g.data();
  T* pdw = dw.data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* xrow = px + i * p;
    const T* grow = pg + i * q;
    for (int64_t k = 0; k < p; ++k) {
      T xv = xrow[k];
      T* dwrow = pdw + k * q;
      for (int64_t j = 0; j < q; ++j) dwrow[j] += xv * grow[j];
    }
  }
  return dw;
}

// ---------------------------------------------------------------------------
// batched matmul: both operands carry the same leading batch dims
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> bmm_generic(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb, T alpha,
                      const char* who) {
  require(a.rank() >= 2 && b.rank() >= 2 && a.rank() == b.rank(),
          std::string(who) + ": rank mismatch " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  size_t nb = a.rank() - 2;
  for (size_t i = 0; i < nb; ++i)
    require(a.shape()[i] == b.shape()[i], std::string(who) + ": batch mismatch " +
                                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t a0 = a.shape()[nb], a1 = a.shape()[nb + 1];
  int64_t b0 = b.shape()[nb], b1 = b.shape()[nb + 1];
  int64_t m = ta ? a1 : a0;
  int64_t p = ta ? a0 : a1;
  int64_t pb = tb ? b1 : b0;
  int64_t q = tb ? b0 : b1;
  require(p == pb, std::string(who) + ": inner dimension mismatch " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
  int64_t batches = leading_rows(a.shape(), 2);
  Shape out_shape(a.shape().begin(), a.shape().begin() + nb);
  out_shape.push_back(m);
  out_shape.push_back(q);
  Tensor<T> out(out_shape);
  const T* pa = a.data();
  const T* pbd = b.data();
  T* po = out.data();
  int64_t as = a0 * a1, bs = b0 * b1, os = m * q;
  for (int64_t s = 0; s < batches; ++s) {
    const T* A = pa + s * as;
    const T* B = pbd + s * bs;
    T* O = po + s * os;
    if (!ta && !tb) {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t k = 0; k < p; ++k) {
          T av = A[i * p + k] * alpha;
          const T* brow = B + k * q;
          T* orow = O + i * q;
          for (int64_t j = 0; j < q; ++j) orow[j] += av * brow[j];
        }
    } else if (!ta && tb) {
      // O[i][j] = sum_k A[i][k] B[j][k]
      for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * p;
        T* orow = O + i * q;
        for (int64_t j = 0; j < q; ++j) {
          const T* brow = B + j * p;
          T acc = 0;
          for (int64_t k = 0; k < p; ++k) acc += arow[k] * brow[k];
          orow[j] = acc * alpha;
        }
      }
    } else if (ta && !tb) {
      // O[i][j] = sum_k A[k][i] B[k][j]
      for (int64_t k = 0; k < p; ++k) {
        const T* arow = A + k * m;
        const T* brow = B + k * q;
        for (int64_t i = 0; i < m; ++i) {
          T av = arow[i] * alpha;
          T* orow = O + i * q;
          for (int64_t j = 0; j < q; ++j) orow[j] += av * brow[j];
        }
      }
    } else {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < q; ++j) {
          T acc = 0;
          for (int64_t k = 0; k < p; ++k) acc += A[k * m + i] * B[j * p + k];
          O[i * q + j] = acc * alpha;
        }
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, T alpha = T(1)) {
  return detail::bmm_generic(a, b, false, false, alpha, "bmm");
}

// a [..,m,p] x b [..,q,p]^T -> [..,m,q]
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b, T alpha = T(1)) {
  return detail::bmm_generic(a, b, false, true, alpha, "bmm_nt");
}

// a [..,p,m]^T x b [..,p,q] -> [..,m,q]
template <typename T>
Tensor<T> bmm_tn(const Tensor<T>& a, const Tensor<T>& b, T alpha = T(1)) {
  return detail::bmm_generic(a, b, true, false, alpha, "bmm_tn");
}

// ---------------------------------------------------------------------------
// head split / merge: [b, n, H*hd] <-> [b, H, n, hd]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads) {
  detail::require(x.rank() == 3 && x.dim(2) % heads == 0,
                  "split_heads: cannot split " + shape_str(x.shape()) + " into " +
                      std::to_string(heads) + " heads");
  int64_t b = x.dim(0), n = x.dim(1), hd = x.dim(2) / heads;
  Tensor<T> out(Shape{b, heads, n, hd});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < n; ++t)
      for (int64_t h = 0; h < heads; ++h) {
        const T* src = x.data() + ((bi * n + t) * heads + h) * hd;
        T* dst = out.data() + (((bi * heads + h) * n + t)) * hd;
        for (int64_t j = 0; j < hd; ++j) dst[j] = src[j];
      }
  return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "merge_heads: expected [b,H,n,hd], got " + shape_str(x.shape()));
  int64_t b = x.dim(0), heads = x.dim(1), n = x.dim(2), hd = x.dim(3);
  Tensor<T> out(Shape{b, n, heads * hd});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < n; ++t) {
        const T* src = x.data() + ((bi * heads + h) * n + t) * hd;
        T* dst = out.data() + ((bi * n + t) * heads + h) * hd;
        for (int64_t j = 0; j < hd; ++j) dst[j] = src[j];
      }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the last dimension
// ---------------------------------------------------------------------------

// Rows may contain -inf entries (additive masking). A row that is entirely
// -inf has no valid support; it comes back as all zeros and is counted in
// *invalid_rows rather than producing NaN.
template <typename T>
Tensor<T> softmax_row(const Tensor<T>& s, int64_t* invalid_rows = nullptr) {
  detail::require(s.rank() >= 1, "softmax_row: rank-0 input");
  int64_t d = s.shape().back();
  int64_t rows = detail::leading_rows(s.shape(), 1);
  Tensor<T> out(s.shape());
  const T* ps = s.data();
  T* po = out.data();
  int64_t bad = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = ps + r * d;
    T* orow = po + r * d;
    T m = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < d; ++j) m = row[j] > m ? row[j] : m;
    if (!(m > -std::numeric_limits<T>::infinity())) {
      ++bad;  // fully masked row: defined as zeros, flagged invalid
      continue;
    }
    T sum = 0;
    for (int64_t j = 0; j < d; ++j) {
      T e = std::exp(row[j] - m);
      orow[j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (invalid_rows) *invalid_rows = bad;
  return out;
}

// dscores = alpha * (dalpha - sum(dalpha * alpha)) per row. Masked positions
// have alpha == 0 and therefore contribute exactly zero.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& dalpha, const Tensor<T>& alpha) {
  detail::require(dalpha.shape() == alpha.shape(),
                  "softmax_backward: shape mismatch " + shape_str(dalpha.shape()) + " vs " +
                      shape_str(alpha.shape()));
  int64_t d = alpha.shape().back();
  int64_t rows = detail::leading_rows(alpha.shape(), 1);
  Tensor<T> out(alpha.shape());
  const T* pd = dalpha.data();
  const T* pa = alpha.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* drow = pd + r * d;
    const T* arow = pa + r * d;
    T* orow = po + r * d;
    T dot = 0;
    for (int64_t j = 0; j < d; ++j) dot += drow[j] * arow[j];
    for (int64_t j = 0; j < d; ++j) orow[j] = arow[j] * (drow[j] - dot);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RMSNorm over the last dimension (gain applied, gain is frozen)
// ---------------------------------------------------------------------------

template <typename T>
struct RmsNormResult {
  Tensor<T> xhat;  // x / rms, needed by the backward pass
  Tensor<T> out;   // xhat * gamma, what the next layer consumes
  Tensor<T> rms;   // per-row rms, trailing dim 1
};

template <typename T>
RmsNormResult<T> rmsnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  detail::require(gamma.rank() == 1 && x.rank() >= 1 && x.shape().back() == gamma.dim(0),
                  "rmsnorm_forward: gain " + shape_str(gamma.shape()) + " does not match " +
                      shape_str(x.shape()));
  int64_t d = gamma.dim(0);
  int64_t rows = detail::leading_rows(x.shape(), 1);
  Shape rms_shape = x.shape();
  rms_shape.back() = 1;
  RmsNormResult<T> res{Tensor<T>(x.shape()), Tensor<T>(x.shape()), Tensor<T>(rms_shape)};
  const T* px = x.data();
  const T* pg = gamma.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T ms = 0;
    for (int64_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms /= static_cast<T>(d);
    T rms = std::sqrt(ms + eps);
    res.rms[r] = rms;
    T inv = T(1) / rms;
    T* xh = res.xhat.data() + r * d;
    T* ot = res.out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      xh[j] = row[j] * inv;
      ot[j] = xh[j] * pg[j];
    }
  }
  return res;
}

// dx for out = (x / rms) * gamma with frozen gamma: the gain is folded into
// the upstream gradient first, then
//   dx = (1/rms) * (dxhat - xhat * mean(dxhat * xhat)).
template <typename T>
Tensor<T> rmsnorm_backward(const Tensor<T>& dout, const Tensor<T>& xhat, const Tensor<T>& gamma,
                           const Tensor<T>& rms) {
  detail::require(dout.shape() == xhat.shape(),
                  "rmsnorm_backward: shape mismatch " + shape_str(dout.shape()) + " vs " +
                      shape_str(xhat.shape()));
  int64_t d = gamma.dim(0);
  int64_t rows = detail::leading_rows(xhat.shape(), 1);
  detail::require(rms.numel() == rows, "rmsnorm_backward: rms " + shape_str(rms.shape()) +
                                           " does not match rows of " + shape_str(xhat.shape()));
  Tensor<T> dx(xhat.shape());
  const T* pd = dout.data();
  const T* ph = xhat.data();
  const T* pg = gamma.data();
  const T* pr = rms.data();
  T* po = dx.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* drow = pd + r * d;
    const T* hrow = ph + r * d;
    T* orow = po + r * d;
    T m = 0;
    for (int64_t j = 0; j < d; ++j) m += drow[j] * pg[j] * hrow[j];
    m /= static_cast<T>(d);
    T inv = T(1) / pr[r];
    for (int64_t j = 0; j < d; ++j) orow[j] = (drow[j] * pg[j] - hrow[j] * m) * inv;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T s = T(1) / (T(1) + std::exp(-px[i]));
    po[i] = px[i] * s;
  }
  return out;
}

// SiLU'(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& g, const Tensor<T>& x) {
  detail::require(g.shape() == x.shape(), "silu_backward: shape mismatch " +
                                              shape_str(g.shape()) + " vs " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const T* pg = g.data();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T s = T(1) / (T(1) + std::exp(-px[i]));
    po[i] = pg[i] * s * (T(1) + px[i] * (T(1) - s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// token cross entropy, mean over non-ignored positions
// ---------------------------------------------------------------------------

inline constexpr int32_t kIgnoreIndex = -1;

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  Tensor<T> dlogits;
  bool empty_batch = false;  // every position ignored
};

namespace detail {

template <typename T>
double ce_position(const T* row, int64_t vocab, int32_t target, double* lse_out) {
  T m = row[0];
  for (int64_t j = 1; j < vocab; ++j) m = row[j] > m ? row[j] : m;
  double sum = 0.0;
  for (int64_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j] - m));
  double lse = static_cast<double>(m) + std::log(sum);
  if (lse_out) *lse_out = lse;
  return lse - static_cast<double>(row[target]);
}

}  // namespace detail

// logits [..., V], targets with one id per logits row. Ignored positions
// (target == kIgnoreIndex) contribute neither loss nor gradient; the mean
// is over the remaining positions. Out-of-range ids are an error.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, const Tensor<int32_t>& targets) {
  int64_t vocab = logits.shape().back();
  int64_t rows = detail::leading_rows(logits.shape(), 1);
  detail::require(targets.numel() == rows,
                  "cross_entropy: targets " + shape_str(targets.shape()) + " do not match logits " +
                      shape_str(logits.shape()));
  int64_t counted = 0;
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[r];
    if (t == kIgnoreIndex) continue;
    detail::require(t >= 0 && t < vocab, "cross_entropy: target id " + std::to_string(t) +
                                             " outside vocabulary of " + std::to_string(vocab));
    ++counted;
  }
  CrossEntropyResult<T> res;
  res.dlogits = Tensor<T>(logits.shape());
  if (counted == 0) {
    res.empty_batch = true;
    return res;
  }
  const T* pl = logits.data();
  T* pd = res.dlogits.data();
  double total = 0.0;
  double inv_count = 1.0 / static_cast<double>(counted);
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[r];
    if (t == kIgnoreIndex) continue;
    const T* row = pl + r * vocab;
    double lse = 0.0;
    total += detail::ce_position(row, vocab, t, &lse);
    T* drow = pd + r * vocab;
    for (int64_t j = 0; j < vocab; ++j) {
      double p = std::exp(static_cast<double>(row[j]) - lse);
      drow[j] = static_cast<T>(p * inv_count);
    }
    drow[t] -= static_cast<T>(inv_count);
  }
  res.loss = total * inv_count;
  return res;
}

// Loss only, no gradient buffer. The zeroth order path uses this so its
// memory profile stays at inference level.
template <typename T>
double cross_entropy_loss(const Tensor<T>& logits, const Tensor<int32_t>& targets,
                          bool* empty_batch = nullptr) {
  int64_t vocab = logits.shape().back();
  int64_t rows = detail::leading_rows(logits.shape(), 1);
  detail::require(targets.numel() == rows,
                  "cross_entropy_loss: targets " + shape_str(targets.shape()) +
                      " do not match logits " + shape_str(logits.shape()));
  double total = 0.0;
  int64_t counted = 0;
  const T* pl = logits.data();
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[r];
    if (t == kIgnoreIndex) continue;
    detail::require(t >= 0 && t < vocab, "cross_entropy_loss: target id " + std::to_string(t) +
                                             " outside vocabulary of " + std::to_string(vocab));
    total += detail::ce_position(pl + r * vocab, vocab, t, nullptr);
    ++counted;
  }
  if (empty_batch) *empty_batch = (counted == 0);
  if (counted == 0) return 0.0;
  return total / static_cast<double>(counted);
}

}  // namespace mesp
