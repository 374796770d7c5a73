#pragma once

#include <cmath>

#include "fisr/tensor.hpp"

// Differentiable primitive ops over [N,C,H,W] tensors. Forward code fills the
// output buffer; backward lambdas work on raw buffers only (they must never
// record new tape nodes). No implicit broadcasting except bias-over-channel
// inside conv2d / linear.

namespace fisr {

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, T lo, T hi) {
  T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    p[i] = static_cast<T>(rng.uniform(double(lo), double(hi)));
}

template <typename T>
inline void check_same_shape(const char* op, const Tensor<T>& a,
                             const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

namespace detail {

#if defined(__GNUC__) || defined(__clang__)
#define FISR_GEMM_VECTOR_EXT 1
// 32-byte vector type. The compiler splits it across however many hardware
// registers the target provides, so the same kernel serves SSE and AVX2
// builds. Wider types would trip -Wpsabi on targets without AVX-512.
template <typename T>
struct LaneVec;
template <>
struct LaneVec<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct LaneVec<double> {
  typedef double type __attribute__((vector_size(32)));
};
#endif

// C[M,N] += A[M,K] * B[K,N], row-major. Each output element accumulates
// over K sequentially, so results do not depend on the tile sizes. With
// accumulate = false the product overwrites C instead.
template <typename T, bool accumulate = true>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#ifdef FISR_GEMM_VECTOR_EXT
  // Named vector accumulators stay in registers across the K loop; an
  // indexed acc[MR][NR] array gets spilled to the stack instead.
  using V = typename LaneVec<T>::type;
  constexpr int64_t VL = int64_t(sizeof(V) / sizeof(T));
  auto loadv = [](const T* p) {
    V v;
    __builtin_memcpy(&v, p, sizeof(V));
    return v;
  };
  auto add_store = [](T* p, V v) {
    if constexpr (accumulate) {
      V t;
      __builtin_memcpy(&t, p, sizeof(V));
      v += t;
    }
    __builtin_memcpy(p, &v, sizeof(V));
  };
  int64_t j = 0;
  for (; j + 2 * VL <= n; j += 2 * VL) {
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
      V c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      const T* a0 = a + i * k;
      const T* bp = b + j;
      for (int64_t kk = 0; kk < k; ++kk, bp += n) {
        const V b0 = loadv(bp), b1 = loadv(bp + VL);
        const V a0v = a0[kk] + V{}, a1v = a0[k + kk] + V{};
        const V a2v = a0[2 * k + kk] + V{}, a3v = a0[3 * k + kk] + V{};
        c00 += a0v * b0; c01 += a0v * b1;
        c10 += a1v * b0; c11 += a1v * b1;
        c20 += a2v * b0; c21 += a2v * b1;
        c30 += a3v * b0; c31 += a3v * b1;
      }
      T* cr = c + i * n + j;
      add_store(cr, c00); add_store(cr + VL, c01);
      add_store(cr + n, c10); add_store(cr + n + VL, c11);
      add_store(cr + 2 * n, c20); add_store(cr + 2 * n + VL, c21);
      add_store(cr + 3 * n, c30); add_store(cr + 3 * n + VL, c31);
    }
    for (; i < m; ++i) {
      V c0{}, c1{};
      const T* a0 = a + i * k;
      const T* bp = b + j;
      for (int64_t kk = 0; kk < k; ++kk, bp += n) {
        const V av = a0[kk] + V{};
        c0 += av * loadv(bp);
        c1 += av * loadv(bp + VL);
      }
      T* cr = c + i * n + j;
      add_store(cr, c0);
      add_store(cr + VL, c1);
    }
  }
  for (; j + VL <= n; j += VL) {
    for (int64_t i = 0; i < m; ++i) {
      V c0{};
      const T* a0 = a + i * k;
      const T* bp = b + j;
      for (int64_t kk = 0; kk < k; ++kk, bp += n) c0 += (a0[kk] + V{}) * loadv(bp);
      add_store(c + i * n + j, c0);
    }
  }
  for (; j < n; ++j) {
    for (int64_t i = 0; i < m; ++i) {
      T acc = 0;
      const T* a0 = a + i * k;
      for (int64_t kk = 0; kk < k; ++kk) acc += a0[kk] * b[kk * n + j];
      if constexpr (accumulate)
        c[i * n + j] += acc;
      else
        c[i * n + j] = acc;
    }
  }
#else
  if constexpr (!accumulate) std::fill(c, c + m * n, T(0));
  constexpr int64_t NR = 16;
  int64_t j = 0;
  for (; j + NR <= n; j += NR) {
    for (int64_t i = 0; i < m; ++i) {
      T acc[NR] = {};
      for (int64_t kk = 0; kk < k; ++kk) {
        const T av = a[i * k + kk];
        const T* br = b + kk * n + j;
        for (int64_t jj = 0; jj < NR; ++jj) acc[jj] += av * br[jj];
      }
      T* cr = c + i * n + j;
      for (int64_t jj = 0; jj < NR; ++jj) cr[jj] += acc[jj];
    }
  }
  if (j < n) {
    for (int64_t i = 0; i < m; ++i) {
      T* cr = c + i * n;
      const T* ar = a + i * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const T av = ar[kk];
        if (av == T(0)) continue;
        const T* br = b + kk * n;
        for (int64_t jj = j; jj < n; ++jj) cr[jj] += av * br[jj];
      }
    }
  }
#endif
}

// C[M,N] += A[M,L] * B[N,L]^T: every output element is a dot product of two
// contiguous rows, so neither operand needs transposing. Lane partial sums
// are reduced in a fixed order; results are reproducible run to run.
template <typename T>
void gemm_dot_acc(const T* a, const T* b, T* c, int64_t m, int64_t n,
                  int64_t l) {
#ifdef FISR_GEMM_VECTOR_EXT
  using V = typename LaneVec<T>::type;
  constexpr int64_t VL = int64_t(sizeof(V) / sizeof(T));
  auto loadv = [](const T* p) {
    V v;
    __builtin_memcpy(&v, p, sizeof(V));
    return v;
  };
  auto hsum = [](V v) {
    T s = 0;
    for (int64_t e = 0; e < VL; ++e) s += v[e];
    return s;
  };
  const int64_t lv = l - l % VL;
  int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * l;
    for (int64_t jj = 0; jj + 2 <= n; jj += 2) {
      const T* b0 = b + jj * l;
      const T* b1 = b0 + l;
      V s00{}, s01{}, s10{}, s11{}, s20{}, s21{}, s30{}, s31{};
      for (int64_t e = 0; e < lv; e += VL) {
        const V vb0 = loadv(b0 + e), vb1 = loadv(b1 + e);
        const V va0 = loadv(a0 + e), va1 = loadv(a0 + l + e);
        const V va2 = loadv(a0 + 2 * l + e), va3 = loadv(a0 + 3 * l + e);
        s00 += va0 * vb0; s01 += va0 * vb1;
        s10 += va1 * vb0; s11 += va1 * vb1;
        s20 += va2 * vb0; s21 += va2 * vb1;
        s30 += va3 * vb0; s31 += va3 * vb1;
      }
      T r[4][2] = {{hsum(s00), hsum(s01)},
                   {hsum(s10), hsum(s11)},
                   {hsum(s20), hsum(s21)},
                   {hsum(s30), hsum(s31)}};
      for (int64_t e = lv; e < l; ++e)
        for (int64_t ii = 0; ii < 4; ++ii) {
          r[ii][0] += a0[ii * l + e] * b0[e];
          r[ii][1] += a0[ii * l + e] * b1[e];
        }
      for (int64_t ii = 0; ii < 4; ++ii) {
        c[(i + ii) * n + jj] += r[ii][0];
        c[(i + ii) * n + jj + 1] += r[ii][1];
      }
    }
    if (n % 2) {
      const T* b0 = b + (n - 1) * l;
      for (int64_t ii = 0; ii < 4; ++ii) {
        const T* ar = a0 + ii * l;
        V s{};
        for (int64_t e = 0; e < lv; e += VL) s += loadv(ar + e) * loadv(b0 + e);
        T r = hsum(s);
        for (int64_t e = lv; e < l; ++e) r += ar[e] * b0[e];
        c[(i + ii) * n + n - 1] += r;
      }
    }
  }
  for (; i < m; ++i) {
    const T* ar = a + i * l;
    for (int64_t jj = 0; jj < n; ++jj) {
      const T* br = b + jj * l;
      V s{};
      for (int64_t e = 0; e < lv; e += VL) s += loadv(ar + e) * loadv(br + e);
      T r = hsum(s);
      for (int64_t e = lv; e < l; ++e) r += ar[e] * br[e];
      c[i * n + jj] += r;
    }
  }
#else
  for (int64_t i = 0; i < m; ++i)
    for (int64_t jj = 0; jj < n; ++jj) {
      const T* ar = a + i * l;
      const T* br = b + jj * l;
      T acc = 0;
      for (int64_t e = 0; e < l; ++e) acc += ar[e] * br[e];
      c[i * n + jj] += acc;
    }
#endif
}

template <typename T>
void transpose_mat(const T* src, T* dst, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  auto out = make_op_output<T>(
      a.shape(), {a, b}, [a, b](const TensorData<T>& o) {
        if (a.requires_grad()) a.impl()->accumulate_grad(o.grad.data(), o.numel());
        if (b.requires_grad()) b.impl()->accumulate_grad(o.grad.data(), o.numel());
      });
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  auto out = make_op_output<T>(
      a.shape(), {a, b}, [a, b](const TensorData<T>& o) {
        if (a.requires_grad()) a.impl()->accumulate_grad(o.grad.data(), o.numel());
        if (b.requires_grad()) {
          auto& g = b.impl()->grad;
          if (g.empty()) g.assign(o.grad.size(), T(0));
          for (int64_t i = 0; i < o.numel(); ++i) g[i] -= o.grad[i];
        }
      });
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  auto out = make_op_output<T>(
      a.shape(), {a, b}, [a, b](const TensorData<T>& o) {
        if (a.requires_grad()) {
          auto& g = a.impl()->grad;
          if (g.empty()) g.assign(o.grad.size(), T(0));
          const T* pb = b.data();
          for (int64_t i = 0; i < o.numel(); ++i) g[i] += o.grad[i] * pb[i];
        }
        if (b.requires_grad()) {
          auto& g = b.impl()->grad;
          if (g.empty()) g.assign(o.grad.size(), T(0));
          const T* pa = a.data();
          for (int64_t i = 0; i < o.numel(); ++i) g[i] += o.grad[i] * pa[i];
        }
      });
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto out = make_op_output<T>(
      a.shape(), {a}, [a, s](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(o.grad.size(), T(0));
        for (int64_t i = 0; i < o.numel(); ++i) g[i] += s * o.grad[i];
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = s * pa[i];
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

// x[N,C,H,W] + b[C] broadcast over batch and plane.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " + " +
                     shape_str(b.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto out = make_op_output<T>(
      x.shape(), {x, b}, [x, b, n, c, plane](const TensorData<T>& o) {
        if (x.requires_grad()) x.impl()->accumulate_grad(o.grad.data(), o.numel());
        if (b.requires_grad()) {
          auto& g = b.impl()->grad;
          if (g.empty()) g.assign(c, T(0));
          for (int64_t bi = 0; bi < n; ++bi)
            for (int64_t ch = 0; ch < c; ++ch) {
              const T* p = o.grad.data() + (bi * c + ch) * plane;
              T acc = 0;
              for (int64_t i = 0; i < plane; ++i) acc += p[i];
              g[ch] += acc;
            }
        }
      });
  const T* px = x.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t bi = 0; bi < n; ++bi)
    for (int64_t ch = 0; ch < c; ++ch) {
      T bv = pb[ch];
      const T* src = px + (bi * c + ch) * plane;
      T* dst = po + (bi * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bv;
    }
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  auto out = make_op_output<T>(
      a.shape(), {a}, [a](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(o.grad.size(), T(0));
        const T* pa = a.data();
        for (int64_t i = 0; i < o.numel(); ++i) {
          T s = pa[i] > T(0) ? T(1) : (pa[i] < T(0) ? T(-1) : T(0));
          g[i] += o.grad[i] * s;
        }
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::fabs(pa[i]);
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  auto out = make_op_output<T>(
      a.shape(), {a}, [a, slope](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(o.grad.size(), T(0));
        const T* pa = a.data();
        for (int64_t i = 0; i < o.numel(); ++i)
          g[i] += o.grad[i] * (pa[i] > T(0) ? T(1) : slope);
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    po[i] = pa[i] > T(0) ? pa[i] : slope * pa[i];
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return leaky_relu(a, T(0));
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  auto out = make_op_output<T>(
      a.shape(), {a}, [a](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(o.grad.size(), T(0));
        const T* pa = a.data();
        for (int64_t i = 0; i < o.numel(); ++i) {
          double x = pa[i];
          double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          g[i] += o.grad[i] * static_cast<T>(cdf + x * pdf);
        }
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = pa[i];
    po[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)));
  }
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  auto out = make_op_output<T>(
      a.shape(), {a}, [a](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(o.grad.size(), T(0));
        for (int64_t i = 0; i < o.numel(); ++i)
          g[i] += o.grad[i] * (T(1) - o.data[i] * o.data[i]);
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::tanh(pa[i]);
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = make_op_output<T>(
      Shape{1}, {a}, [a](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(a.numel(), T(0));
        T go = o.grad[0];
        for (int64_t i = 0; i < a.numel(); ++i) g[i] += go;
      });
  T acc = 0;
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc;
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  auto out = make_op_output<T>(
      Shape{1}, {a}, [a, inv](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(a.numel(), T(0));
        T go = o.grad[0] * inv;
        for (int64_t i = 0; i < a.numel(); ++i) g[i] += go;
      });
  T acc = 0;
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc * inv;
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  auto out = make_op_output<T>(
      std::move(shape), {a}, [a](const TensorData<T>& o) {
        if (a.requires_grad()) a.impl()->accumulate_grad(o.grad.data(), o.numel());
      });
  std::copy(a.data(), a.data() + a.numel(), out.data());
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// dst[i_out] = src at the permuted multi-index; used forward and (with the
// inverse permutation) backward.
template <typename T, typename Accum>
void permute_copy(const T* src, const Shape& src_shape,
                  const std::vector<int>& axes, Accum&& store) {
  const size_t r = src_shape.size();
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = src_shape[axes[i]];
  auto src_strides = row_major_strides(src_shape);
  std::vector<int64_t> step(r);
  for (size_t i = 0; i < r; ++i) step[i] = src_strides[axes[i]];
  std::vector<int64_t> counter(r, 0);
  int64_t total = shape_numel(src_shape);
  int64_t src_off = 0;
  for (int64_t i = 0; i < total; ++i) {
    store(i, src[src_off]);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      src_off += step[d];
      if (++counter[d] < out_shape[d]) break;
      src_off -= step[d] * out_shape[d];
      counter[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> axes) {
  if (axes.size() != a.rank()) throw ShapeError("permute: axes rank mismatch");
  Shape out_shape(a.rank());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[axes[i]];
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
  auto out = make_op_output<T>(
      out_shape, {a}, [a, inv, out_shape](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(a.numel(), T(0));
        detail::permute_copy<T>(o.grad.data(), out_shape, inv,
                                [&g](int64_t i, T v) { g[i] += v; });
      });
  T* po = out.data();
  detail::permute_copy<T>(a.data(), a.shape(), axes,
                          [po](int64_t i, T v) { po[i] = v; });
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 4) throw ShapeError("concat: expects [N,C,H,W]");
  int64_t n = s0[0], h = s0[2], w = s0[3], ctotal = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != n || s[2] != h || s[3] != w)
      throw ShapeError("concat: incompatible " + shape_str(s));
    ctotal += s[1];
  }
  const int64_t plane = h * w;
  auto out = make_op_output<T>(
      Shape{n, ctotal, h, w}, parts,
      [parts, n, ctotal, plane](const TensorData<T>& o) {
        int64_t c_off = 0;
        for (const auto& p : parts) {
          int64_t pc = p.shape()[1];
          if (p.requires_grad()) {
            auto& g = p.impl()->grad;
            if (g.empty()) g.assign(p.numel(), T(0));
            for (int64_t b = 0; b < n; ++b) {
              const T* src = o.grad.data() + (b * ctotal + c_off) * plane;
              T* dst = g.data() + b * pc * plane;
              for (int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
            }
          }
          c_off += pc;
        }
      });
  int64_t c_off = 0;
  for (const auto& p : parts) {
    int64_t pc = p.shape()[1];
    for (int64_t b = 0; b < n; ++b)
      std::copy(p.data() + b * pc * plane, p.data() + (b + 1) * pc * plane,
                out.data() + (b * ctotal + c_off) * plane);
    c_off += pc;
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int64_t c0, int64_t c1) {
  const Shape& s = a.shape();
  if (s.size() != 4) throw ShapeError("slice: expects [N,C,H,W]");
  if (c0 < 0 || c1 > s[1] || c0 >= c1)
    throw ShapeError("slice: bad channel range");
  int64_t n = s[0], c = s[1], h = s[2], w = s[3], sc = c1 - c0;
  const int64_t plane = h * w;
  auto out = make_op_output<T>(
      Shape{n, sc, h, w}, {a},
      [a, n, c, c0, sc, plane](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(a.numel(), T(0));
        for (int64_t b = 0; b < n; ++b) {
          const T* src = o.grad.data() + b * sc * plane;
          T* dst = g.data() + (b * c + c0) * plane;
          for (int64_t i = 0; i < sc * plane; ++i) dst[i] += src[i];
        }
      });
  for (int64_t b = 0; b < n; ++b)
    std::copy(a.data() + (b * c + c0) * plane,
              a.data() + (b * c + c1) * plane, out.data() + b * sc * plane);
  return out;
}

// ---------------------------------------------------------------------------
// matmul family

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_op_output<T>(
      Shape{m, n}, {a, b}, [a, b, m, k, n](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        if (a.requires_grad()) {
          auto& g = a.impl()->grad;
          if (g.empty()) g.assign(a.numel(), T(0));
          // da = dy * b^T
          detail::gemm_dot_acc(dy, b.data(), g.data(), m, k, n);
        }
        if (b.requires_grad()) {
          auto& g = b.impl()->grad;
          if (g.empty()) g.assign(b.numel(), T(0));
          const T* pa = a.data();
          // db = a^T * dy, accumulated one rank-1 slab at a time
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              T av = pa[i * k + kk];
              const T* dyr = dy + i * n;
              T* gr = g.data() + kk * n;
              for (int64_t j = 0; j < n; ++j) gr[j] += av * dyr[j];
            }
        }
      });
  detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  return out;
}

// x[M,K] * w[K,N] + b[N] row-broadcast; pass an undefined bias to skip it.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    throw ShapeError("linear: " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != n))
    throw ShapeError("linear: bias length mismatch");
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  auto out = make_op_output<T>(
      Shape{m, n}, inputs,
      [x, w, b, has_bias, m, k, n](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        if (x.requires_grad()) {
          auto& g = x.impl()->grad;
          if (g.empty()) g.assign(x.numel(), T(0));
          // dx = dy * w^T
          detail::gemm_dot_acc(dy, w.data(), g.data(), m, k, n);
        }
        if (w.requires_grad()) {
          auto& g = w.impl()->grad;
          if (g.empty()) g.assign(w.numel(), T(0));
          const T* px = x.data();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              T xv = px[i * k + kk];
              const T* dyr = dy + i * n;
              T* gr = g.data() + kk * n;
              for (int64_t j = 0; j < n; ++j) gr[j] += xv * dyr[j];
            }
        }
        if (has_bias && b.requires_grad()) {
          auto& g = b.impl()->grad;
          if (g.empty()) g.assign(b.numel(), T(0));
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
        }
      });
  T* po = out.data();
  if (has_bias)
    for (int64_t i = 0; i < m; ++i)
      std::copy(b.data(), b.data() + n, po + i * n);
  detail::gemm_acc(x.data(), w.data(), po, m, k, n);
  return out;
}

// Batched matmul: a[B,M,K] * b[B,K,N], or a[B,M,K] * b[B,N,K]^T when trans_b.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if ((trans_b ? b.dim(2) : b.dim(1)) != k)
    throw ShapeError("bmm: inner dim mismatch");
  auto out = make_op_output<T>(
      Shape{batch, m, n}, {a, b},
      [a, b, trans_b, batch, m, k, n](const TensorData<T>& o) {
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        if (ga && a.impl()->grad.empty()) a.impl()->grad.assign(a.numel(), T(0));
        if (gb && b.impl()->grad.empty()) b.impl()->grad.assign(b.numel(), T(0));
        for (int64_t bi = 0; bi < batch; ++bi) {
          const T* dy = o.grad.data() + bi * m * n;
          const T* pa = a.data() + bi * m * k;
          const T* pb = b.data() + bi * (trans_b ? n * k : k * n);
          if (ga) {
            T* g = a.impl()->grad.data() + bi * m * k;
            if (trans_b) {
              // y = a * b^T  =>  da = dy * b
              detail::gemm_acc(dy, pb, g, m, n, k);
            } else {
              // da = dy * b^T
              detail::gemm_dot_acc(dy, pb, g, m, k, n);
            }
          }
          if (gb) {
            T* g = b.impl()->grad.data() + bi * (trans_b ? n * k : k * n);
            if (trans_b) {
              // db[j,kk] = sum_i dy[i,j] * a[i,kk]
              for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                  T dv = dy[i * n + j];
                  const T* ar = pa + i * k;
                  T* gr = g + j * k;
                  for (int64_t kk = 0; kk < k; ++kk) gr[kk] += dv * ar[kk];
                }
            } else {
              // db = a^T * dy
              for (int64_t i = 0; i < m; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                  T av = pa[i * k + kk];
                  const T* dyr = dy + i * n;
                  T* gr = g + kk * n;
                  for (int64_t j = 0; j < n; ++j) gr[j] += av * dyr[j];
                }
            }
          }
        }
      });
  T* po = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* pa = a.data() + bi * m * k;
    const T* pb = b.data() + bi * (trans_b ? n * k : k * n);
    T* oy = po + bi * m * n;
    if (trans_b)
      detail::gemm_dot_acc(pa, pb, oy, m, n, k);
    else
      detail::gemm_acc(pa, pb, oy, m, k, n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the last dimension

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() == 0) throw ShapeError("softmax: rank-0 input");
  const int64_t cols = a.shape().back();
  const int64_t rows = a.numel() / cols;
  auto out = make_op_output<T>(
      a.shape(), {a}, [a, rows, cols](const TensorData<T>& o) {
        if (!a.requires_grad()) return;
        auto& g = a.impl()->grad;
        if (g.empty()) g.assign(a.numel(), T(0));
        for (int64_t r = 0; r < rows; ++r) {
          const T* y = o.data.data() + r * cols;
          const T* dy = o.grad.data() + r * cols;
          T dot = 0;
          for (int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
          T* gr = g.data() + r * cols;
          for (int64_t j = 0; j < cols; ++j) gr[j] += (dy[j] - dot) * y[j];
        }
      });
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = pa + r * cols;
    T* yr = po + r * cols;
    T mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

// x[N,Ci,H,W] * w[Co,Ci,Kh,Kw] (+ bias[Co]), zero padding. Odd kernels with
// pad = K/2 and stride 1 preserve the spatial size.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad_h, int pad_w) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: expects [N,C,H,W] x [Co,Ci,Kh,Kw]");
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) +
                     " vs kernel " + std::to_string(w.dim(1)));
  if (stride < 1) throw ShapeError("conv2d: bad stride");
  const int64_t ho = (h + 2 * pad_h - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad_w - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: empty output");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != co))
    throw ShapeError("conv2d: bias length mismatch");

  const int64_t mdim = ci * kh * kw, plane = ho * wo;
  // Patch matrix for one batch item: col[ci*kh*kw][ho*wo], zero outside the
  // padded input. conv2d is then a plain matrix product per item.
  auto im2col = [=](const T* xb, T* col) {
    int64_t mm = 0;
    for (int64_t icn = 0; icn < ci; ++icn)
      for (int64_t r = 0; r < kh; ++r)
        for (int64_t s = 0; s < kw; ++s, ++mm) {
          T* crow = col + mm * plane;
          const T* xc = xb + icn * h * wd;
          for (int64_t oh = 0; oh < ho; ++oh) {
            const int64_t ih = oh * stride - pad_h + r;
            T* dst = crow + oh * wo;
            if (ih < 0 || ih >= h) {
              std::fill(dst, dst + wo, T(0));
              continue;
            }
            const T* xr = xc + ih * wd;
            if (stride == 1) {
              const int64_t lo = std::max<int64_t>(0, pad_w - s);
              const int64_t hi = std::min(wo, wd + pad_w - s);
              for (int64_t ow = 0; ow < lo; ++ow) dst[ow] = T(0);
              const T* xp = xr - pad_w + s;
              for (int64_t ow = lo; ow < hi; ++ow) dst[ow] = xp[ow];
              for (int64_t ow = hi; ow < wo; ++ow) dst[ow] = T(0);
            } else {
              for (int64_t ow = 0; ow < wo; ++ow) {
                const int64_t iw = ow * stride - pad_w + s;
                dst[ow] = (iw < 0 || iw >= wd) ? T(0) : xr[iw];
              }
            }
          }
        }
  };

  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  auto out = make_op_output<T>(
      Shape{n, co, ho, wo}, inputs,
      [x, w, bias, has_bias, im2col, stride, pad_h, pad_w, n, ci, h, wd, co,
       kh, kw, ho, wo, mdim, plane](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        if (has_bias && bias.requires_grad()) {
          auto& g = bias.impl()->grad;
          if (g.empty()) g.assign(co, T(0));
          for (int64_t b = 0; b < n; ++b)
            for (int64_t oc = 0; oc < co; ++oc) {
              const T* p = dy + (b * co + oc) * plane;
              T acc = 0;
              for (int64_t i = 0; i < plane; ++i) acc += p[i];
              g[oc] += acc;
            }
        }
        const bool gw = w.requires_grad(), gx = x.requires_grad();
        if (!gw && !gx) return;
        std::vector<T> col(gw ? mdim * plane : 0);
        std::vector<T> w_t(gx ? mdim * co : 0);
        std::vector<T> dcol(gx ? mdim * plane : 0);
        if (gw && w.impl()->grad.empty())
          w.impl()->grad.assign(w.numel(), T(0));
        if (gx && x.impl()->grad.empty())
          x.impl()->grad.assign(x.numel(), T(0));
        if (gx) detail::transpose_mat(w.data(), w_t.data(), co, mdim);
        for (int64_t b = 0; b < n; ++b) {
          const T* dyb = dy + b * co * plane;
          if (gw) {
            im2col(x.data() + b * ci * h * wd, col.data());
            detail::gemm_dot_acc(dyb, col.data(), w.impl()->grad.data(), co,
                                 mdim, plane);
          }
          if (gx) {
            detail::gemm_acc<T, false>(w_t.data(), dyb, dcol.data(), mdim, co,
                                       plane);
            // col2im: scatter the patch-matrix gradient back with the same
            // index walk the gather used.
            T* gxb = x.impl()->grad.data() + b * ci * h * wd;
            int64_t mm = 0;
            for (int64_t icn = 0; icn < ci; ++icn)
              for (int64_t r = 0; r < kh; ++r)
                for (int64_t s = 0; s < kw; ++s, ++mm) {
                  const T* crow = dcol.data() + mm * plane;
                  T* gc = gxb + icn * h * wd;
                  for (int64_t oh = 0; oh < ho; ++oh) {
                    const int64_t ih = oh * stride - pad_h + r;
                    if (ih < 0 || ih >= h) continue;
                    const T* src = crow + oh * wo;
                    T* gr = gc + ih * wd;
                    if (stride == 1) {
                      const int64_t lo = std::max<int64_t>(0, pad_w - s);
                      const int64_t hi = std::min(wo, wd + pad_w - s);
                      T* gp = gr - pad_w + s;
                      for (int64_t ow = lo; ow < hi; ++ow) gp[ow] += src[ow];
                    } else {
                      for (int64_t ow = 0; ow < wo; ++ow) {
                        const int64_t iw = ow * stride - pad_w + s;
                        if (iw >= 0 && iw < wd) gr[iw] += src[ow];
                      }
                    }
                  }
                }
          }
        }
      });

  T* po = out.data();
  if (has_bias)
    for (int64_t b = 0; b < n; ++b)
      for (int64_t oc = 0; oc < co; ++oc)
        std::fill(po + (b * co + oc) * plane, po + (b * co + oc + 1) * plane,
                  bias.data()[oc]);
  std::vector<T> col(mdim * plane);
  for (int64_t b = 0; b < n; ++b) {
    im2col(x.data() + b * ci * h * wd, col.data());
    detail::gemm_acc(w.data(), col.data(), po + b * co * plane, co, mdim,
                     plane);
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad) {
  return conv2d(x, w, bias, stride, pad, pad);
}

// ---------------------------------------------------------------------------
// layernorm over the channel dimension, per spatial location

template <typename T>
Tensor<T> layernorm_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& beta, T eps) {
  if (x.rank() != 4) throw ShapeError("layernorm: expects [N,C,H,W]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layernorm: gamma/beta length " +
                     std::to_string(gamma.numel()) + "," +
                     std::to_string(beta.numel()) + " vs C=" +
                     std::to_string(c));
  if (!(eps > T(0))) throw ShapeError("layernorm: eps must be positive");
  const int64_t plane = h * w;
  auto out = make_op_output<T>(
      x.shape(), {x, gamma, beta},
      [x, gamma, beta, eps, n, c, plane](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        const bool gx = x.requires_grad();
        const bool gg = gamma.requires_grad();
        const bool gb = beta.requires_grad();
        if (gx && x.impl()->grad.empty()) x.impl()->grad.assign(x.numel(), T(0));
        if (gg && gamma.impl()->grad.empty()) gamma.impl()->grad.assign(c, T(0));
        if (gb && beta.impl()->grad.empty()) beta.impl()->grad.assign(c, T(0));
        const T* px = x.data();
        const T* pg = gamma.data();
        const T inv_c = T(1) / static_cast<T>(c);
        for (int64_t b = 0; b < n; ++b)
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t base = b * c * plane + p;
            T mu = 0, var = 0;
            for (int64_t ch = 0; ch < c; ++ch) mu += px[base + ch * plane];
            mu *= inv_c;
            for (int64_t ch = 0; ch < c; ++ch) {
              T d = px[base + ch * plane] - mu;
              var += d * d;
            }
            var *= inv_c;
            T inv_std = T(1) / std::sqrt(var + eps);
            T m1 = 0, m2 = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
              T xhat = (px[base + ch * plane] - mu) * inv_std;
              T gy = dy[base + ch * plane];
              T gch = gy * pg[ch];
              m1 += gch;
              m2 += gch * xhat;
              if (gg) gamma.impl()->grad[ch] += gy * xhat;
              if (gb) beta.impl()->grad[ch] += gy;
            }
            m1 *= inv_c;
            m2 *= inv_c;
            if (gx) {
              T* gxp = x.impl()->grad.data();
              for (int64_t ch = 0; ch < c; ++ch) {
                T xhat = (px[base + ch * plane] - mu) * inv_std;
                T gch = dy[base + ch * plane] * pg[ch];
                gxp[base + ch * plane] += (gch - m1 - xhat * m2) * inv_std;
              }
            }
          }
      });
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  const T inv_c = T(1) / static_cast<T>(c);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const int64_t base = b * c * plane + p;
      T mu = 0, var = 0;
      for (int64_t ch = 0; ch < c; ++ch) mu += px[base + ch * plane];
      mu *= inv_c;
      for (int64_t ch = 0; ch < c; ++ch) {
        T d = px[base + ch * plane] - mu;
        var += d * d;
      }
      var *= inv_c;
      T inv_std = T(1) / std::sqrt(var + eps);
      for (int64_t ch = 0; ch < c; ++ch)
        po[base + ch * plane] =
            (px[base + ch * plane] - mu) * inv_std * pg[ch] + pb[ch];
    }
  return out;
}

// ---------------------------------------------------------------------------
// pixel shuffle

namespace detail {

// Offset of the input element feeding out[n,c,oh,ow] for shuffle factor r.
// Both directions of the bijection reuse this map.
template <typename T, typename Fn>
void pixel_shuffle_map(int64_t n, int64_t c_out, int64_t h, int64_t w, int r,
                       Fn&& fn) {
  const int64_t c_in = c_out * r * r;
  const int64_t ho = h * r, wo = w * r;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < c_out; ++oc)
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          int64_t ic = (oc * r + oh % r) * r + ow % r;
          int64_t src = ((b * c_in + ic) * h + oh / r) * w + ow / r;
          int64_t dst = ((b * c_out + oc) * ho + oh) * wo + ow;
          fn(dst, src);
        }
}

}  // namespace detail

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle: expects [N,C,H,W]");
  if (r < 1 || x.dim(1) % (int64_t(r) * r) != 0)
    throw ShapeError("pixel_shuffle: C=" + std::to_string(x.dim(1)) +
                     " not divisible by r^2");
  const int64_t n = x.dim(0), c_out = x.dim(1) / (r * r), h = x.dim(2),
                w = x.dim(3);
  auto out = make_op_output<T>(
      Shape{n, c_out, h * r, w * r}, {x},
      [x, n, c_out, h, w, r](const TensorData<T>& o) {
        if (!x.requires_grad()) return;
        auto& g = x.impl()->grad;
        if (g.empty()) g.assign(x.numel(), T(0));
        const T* dy = o.grad.data();
        detail::pixel_shuffle_map<T>(
            n, c_out, h, w, r,
            [&](int64_t dst, int64_t src) { g[src] += dy[dst]; });
      });
  const T* px = x.data();
  T* po = out.data();
  detail::pixel_shuffle_map<T>(
      n, c_out, h, w, r, [&](int64_t dst, int64_t src) { po[dst] = px[src]; });
  return out;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  if (x.rank() != 4) throw ShapeError("pixel_unshuffle: expects [N,C,H,W]");
  if (r < 1 || x.dim(2) % r != 0 || x.dim(3) % r != 0)
    throw ShapeError("pixel_unshuffle: H,W not divisible by r");
  const int64_t n = x.dim(0), c = x.dim(1), ho = x.dim(2) / r,
                wo = x.dim(3) / r;
  auto out = make_op_output<T>(
      Shape{n, c * r * r, ho, wo}, {x},
      [x, n, c, ho, wo, r](const TensorData<T>& o) {
        if (!x.requires_grad()) return;
        auto& g = x.impl()->grad;
        if (g.empty()) g.assign(x.numel(), T(0));
        const T* dy = o.grad.data();
        detail::pixel_shuffle_map<T>(
            n, c, ho, wo, r,
            [&](int64_t dst, int64_t src) { g[dst] += dy[src]; });
      });
  const T* px = x.data();
  T* po = out.data();
  detail::pixel_shuffle_map<T>(
      n, c, ho, wo, r, [&](int64_t dst, int64_t src) { po[src] = px[dst]; });
  return out;
}

// ---------------------------------------------------------------------------
// window partition / merge (with cyclic shift) and window attention

namespace detail {

// Maps flat [NW, T, C] element index -> source offset in [N,C,H,W] after a
// cyclic shift. The same map serves partition (gather) and merge (scatter).
template <typename Fn>
void window_index_map(int64_t n, int64_t c, int64_t h, int64_t w, int window,
                      int shift, Fn&& fn) {
  const int64_t nh = h / window, nw = w / window;
  const int64_t tokens = int64_t(window) * window;
  int64_t dst = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t wh = 0; wh < nh; ++wh)
      for (int64_t ww = 0; ww < nw; ++ww)
        for (int64_t t = 0; t < tokens; ++t) {
          int64_t sh = (wh * window + t / window + shift) % h;
          int64_t sw = (ww * window + t % window + shift) % w;
          for (int64_t ch = 0; ch < c; ++ch)
            fn(dst++, ((b * c + ch) * h + sh) * w + sw);
        }
}

}  // namespace detail

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window, int shift) {
  if (x.rank() != 4) throw ShapeError("window_partition: expects [N,C,H,W]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || h % window != 0 || w % window != 0)
    throw ShapeError("window_partition: H,W " + shape_str({h, w}) +
                     " not divisible by window " + std::to_string(window));
  const int64_t nwin = n * (h / window) * (w / window);
  const int64_t tokens = int64_t(window) * window;
  auto out = make_op_output<T>(
      Shape{nwin, tokens, c}, {x},
      [x, n, c, h, w, window, shift](const TensorData<T>& o) {
        if (!x.requires_grad()) return;
        auto& g = x.impl()->grad;
        if (g.empty()) g.assign(x.numel(), T(0));
        const T* dy = o.grad.data();
        detail::window_index_map(
            n, c, h, w, window, shift,
            [&](int64_t dst, int64_t src) { g[src] += dy[dst]; });
      });
  const T* px = x.data();
  T* po = out.data();
  detail::window_index_map(
      n, c, h, w, window, shift,
      [&](int64_t dst, int64_t src) { po[dst] = px[src]; });
  return out;
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& t, int64_t n, int64_t c, int64_t h,
                       int64_t w, int window, int shift) {
  const int64_t nwin = n * (h / window) * (w / window);
  const int64_t tokens = int64_t(window) * window;
  if (t.rank() != 3 || t.dim(0) != nwin || t.dim(1) != tokens || t.dim(2) != c)
    throw ShapeError("window_merge: bad input " + shape_str(t.shape()));
  auto out = make_op_output<T>(
      Shape{n, c, h, w}, {t},
      [t, n, c, h, w, window, shift](const TensorData<T>& o) {
        if (!t.requires_grad()) return;
        auto& g = t.impl()->grad;
        if (g.empty()) g.assign(t.numel(), T(0));
        const T* dy = o.grad.data();
        detail::window_index_map(
            n, c, h, w, window, shift,
            [&](int64_t dst, int64_t src) { g[dst] += dy[src]; });
      });
  const T* pt = t.data();
  T* po = out.data();
  detail::window_index_map(
      n, c, h, w, window, shift,
      [&](int64_t dst, int64_t src) { po[src] = pt[dst]; });
  return out;
}

template <typename T>
struct AttentionWeights {
  Tensor<T> wq, wk, wv, wo;  // [C,C]
  Tensor<T> bq, bk, bv, bo;  // [C]
};

// Additive logit mask for shifted windows: token pairs whose pre-shift
// sources lie in different contiguous regions must not attend. Follows the
// standard three-slice zone construction.
template <typename T>
Tensor<T> build_attention_mask(int64_t n, int64_t h, int64_t w, int window,
                               int shift, int heads) {
  const int64_t nh = h / window, nw = w / window;
  const int64_t tokens = int64_t(window) * window;
  auto zone = [&](int64_t v, int64_t extent) {
    if (v < extent - window) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  std::vector<int> labels(nh * nw * tokens);
  for (int64_t wh = 0; wh < nh; ++wh)
    for (int64_t ww = 0; ww < nw; ++ww)
      for (int64_t t = 0; t < tokens; ++t) {
        int64_t hh = wh * window + t / window;
        int64_t cw = ww * window + t % window;
        labels[(wh * nw + ww) * tokens + t] = zone(hh, h) * 3 + zone(cw, w);
      }
  Tensor<T> mask(Shape{n * nh * nw * heads, tokens, tokens});
  T* pm = mask.data();
  const T blocked = T(-1e9);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t win = 0; win < nh * nw; ++win) {
      const int* lw = labels.data() + win * tokens;
      for (int hd = 0; hd < heads; ++hd) {
        T* dst = pm + (((b * nh * nw) + win) * heads + hd) * tokens * tokens;
        for (int64_t i = 0; i < tokens; ++i)
          for (int64_t j = 0; j < tokens; ++j)
            dst[i * tokens + j] = lw[i] == lw[j] ? T(0) : blocked;
      }
    }
  return mask;
}

// Windowed multi-head self-attention: partition (with optional cyclic
// shift), per-window QKV attention, output projection, merge back.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& x, const AttentionWeights<T>& aw,
                           int window, int shift, int heads,
                           const Tensor<T>* cached_mask = nullptr) {
  if (x.rank() != 4) throw ShapeError("window_attention: expects [N,C,H,W]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % heads != 0)
    throw ShapeError("window_attention: C=" + std::to_string(c) +
                     " not divisible by heads=" + std::to_string(heads));
  const int64_t tokens = int64_t(window) * window;
  const int64_t dh = c / heads;

  Tensor<T> p = window_partition(x, window, shift);  // [NW,T,C]
  const int64_t nwin = p.dim(0);
  Tensor<T> flat = reshape(p, {nwin * tokens, c});

  auto to_heads = [&](Tensor<T> t) {
    t = reshape(t, {nwin, tokens, heads, dh});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {nwin * heads, tokens, dh});
  };
  Tensor<T> q = to_heads(linear(flat, aw.wq, aw.bq));
  Tensor<T> k = to_heads(linear(flat, aw.wk, aw.bk));
  Tensor<T> v = to_heads(linear(flat, aw.wv, aw.bv));

  q = scale(q, static_cast<T>(1.0 / std::sqrt(double(dh))));
  Tensor<T> scores = bmm(q, k, /*trans_b=*/true);  // [NW*heads,T,T]
  if (shift > 0) {
    if (cached_mask)
      scores = add(scores, *cached_mask);
    else {
      Tensor<T> mask = build_attention_mask<T>(n, h, w, window, shift, heads);
      scores = add(scores, mask);
    }
  }
  Tensor<T> attn = softmax_lastdim(scores);
  Tensor<T> o = bmm(attn, v);  // [NW*heads,T,dh]
  o = reshape(o, {nwin, heads, tokens, dh});
  o = permute(o, {0, 2, 1, 3});
  o = reshape(o, {nwin * tokens, c});
  Tensor<T> proj = linear(o, aw.wo, aw.bo);
  proj = reshape(proj, {nwin, tokens, c});
  return window_merge(proj, n, c, h, w, window, shift);
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  check_same_shape("l1_loss", pred, target);
  return mean(abs(sub(pred, target)));
}

}  // namespace fisr
