#pragma once

#include "fisr/ops.hpp"

// Deformable sampling and flow-constrained dynamic convolution. The sampled
// convolutions are single tape nodes with hand-written backward passes; the
// per-tap gather would otherwise explode into thousands of graph nodes.

namespace fisr {

enum class FlowPattern { Left, Right };
enum class BranchPattern { Left, Right, Adaptive };
enum class Axis { Horizontal, Vertical };

namespace detail {

// Corner indices and weights for bilinear interpolation at (px, py) with
// zero padding outside the image. g(a,b) = max(0, 1-|a-b|), separable.
template <typename T>
struct BilinearTaps {
  int64_t x0, y0;
  T fx, fy;
};

template <typename T>
inline BilinearTaps<T> bilinear_taps(T px, T py) {
  T fx0 = std::floor(px), fy0 = std::floor(py);
  return {static_cast<int64_t>(fx0), static_cast<int64_t>(fy0), px - fx0,
          py - fy0};
}

template <typename T>
inline T bilinear_read(const T* plane, int64_t h, int64_t w, int64_t y,
                       int64_t x) {
  if (y < 0 || y >= h || x < 0 || x >= w) return T(0);
  return plane[y * w + x];
}

template <typename T>
inline T bilinear_value(const T* plane, int64_t h, int64_t w,
                        const BilinearTaps<T>& t) {
  T v00 = bilinear_read(plane, h, w, t.y0, t.x0);
  T v01 = bilinear_read(plane, h, w, t.y0, t.x0 + 1);
  T v10 = bilinear_read(plane, h, w, t.y0 + 1, t.x0);
  T v11 = bilinear_read(plane, h, w, t.y0 + 1, t.x0 + 1);
  return (T(1) - t.fy) * ((T(1) - t.fx) * v00 + t.fx * v01) +
         t.fy * ((T(1) - t.fx) * v10 + t.fx * v11);
}

template <typename T>
inline void bilinear_scatter(T* gplane, int64_t h, int64_t w,
                             const BilinearTaps<T>& t, T g) {
  auto put = [&](int64_t y, int64_t x, T v) {
    if (y >= 0 && y < h && x >= 0 && x < w) gplane[y * w + x] += v;
  };
  put(t.y0, t.x0, g * (T(1) - t.fy) * (T(1) - t.fx));
  put(t.y0, t.x0 + 1, g * (T(1) - t.fy) * t.fx);
  put(t.y0 + 1, t.x0, g * t.fy * (T(1) - t.fx));
  put(t.y0 + 1, t.x0 + 1, g * t.fy * t.fx);
}

// d(value)/d(px) and d(value)/d(py); out-of-image corners read as zero.
template <typename T>
inline void bilinear_coord_grad(const T* plane, int64_t h, int64_t w,
                                const BilinearTaps<T>& t, T& dpx, T& dpy) {
  T v00 = bilinear_read(plane, h, w, t.y0, t.x0);
  T v01 = bilinear_read(plane, h, w, t.y0, t.x0 + 1);
  T v10 = bilinear_read(plane, h, w, t.y0 + 1, t.x0);
  T v11 = bilinear_read(plane, h, w, t.y0 + 1, t.x0 + 1);
  dpx = (T(1) - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
  dpy = (T(1) - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
}

}  // namespace detail

// Interpolates every channel of x at fractional location p = (px, py).
// Returns [N,C]; taps outside the image contribute zero.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& p) {
  if (x.rank() != 4) throw ShapeError("bilinear_sample: expects [N,C,H,W]");
  if (p.numel() != 2) throw ShapeError("bilinear_sample: p must be (px,py)");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto out = make_op_output<T>(
      Shape{n, c}, {x, p}, [x, p, n, c, h, w](const TensorData<T>& o) {
        auto taps = detail::bilinear_taps(p.data()[0], p.data()[1]);
        if (x.requires_grad()) {
          auto& g = x.impl()->grad;
          if (g.empty()) g.assign(x.numel(), T(0));
          for (int64_t b = 0; b < n; ++b)
            for (int64_t ch = 0; ch < c; ++ch)
              detail::bilinear_scatter(g.data() + (b * c + ch) * h * w, h, w,
                                       taps, o.grad[b * c + ch]);
        }
        if (p.requires_grad()) {
          auto& g = p.impl()->grad;
          if (g.empty()) g.assign(2, T(0));
          for (int64_t b = 0; b < n; ++b)
            for (int64_t ch = 0; ch < c; ++ch) {
              T dpx, dpy;
              detail::bilinear_coord_grad(x.data() + (b * c + ch) * h * w, h,
                                          w, taps, dpx, dpy);
              g[0] += o.grad[b * c + ch] * dpx;
              g[1] += o.grad[b * c + ch] * dpy;
            }
        }
      });
  auto taps = detail::bilinear_taps(p.data()[0], p.data()[1]);
  T* po = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      po[b * c + ch] =
          detail::bilinear_value(x.data() + (b * c + ch) * h * w, h, w, taps);
  return out;
}

// Deformable convolution v1: y(p0) = sum_n w(pn) * x(p0 + pn + dpn) with a
// KxK grid, stride 1, pad K/2. Offsets are [N, 2*K*K, H, W]; channel 2t
// holds dx and 2t+1 holds dy for tap t in row-major grid order.
template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& offsets) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != w.dim(3) ||
      w.dim(2) % 2 == 0)
    throw ShapeError("deformable_conv2d: expects odd square kernel");
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), k = w.dim(2), taps = k * k;
  if (w.dim(1) != ci)
    throw ShapeError("deformable_conv2d: channel mismatch");
  if (offsets.rank() != 4 || offsets.dim(0) != n ||
      offsets.dim(1) != 2 * taps || offsets.dim(2) != h ||
      offsets.dim(3) != wd)
    throw ShapeError("deformable_conv2d: offsets must be [N," +
                     std::to_string(2 * taps) + ",H,W], got " +
                     shape_str(offsets.shape()));
  const int64_t pad = k / 2, plane = h * wd;

  // Gathered values V[n][(ci,tap)][pix]; recomputed in backward.
  auto gather = [=](const T* px, const T* poff, std::vector<T>& v) {
    v.assign(n * ci * taps * plane, T(0));
    for (int64_t b = 0; b < n; ++b)
      for (int64_t t = 0; t < taps; ++t) {
        const T* offx = poff + ((b * 2 * taps) + 2 * t) * plane;
        const T* offy = poff + ((b * 2 * taps) + 2 * t + 1) * plane;
        const int64_t ky = t / k, kx = t % k;
        for (int64_t oh = 0; oh < h; ++oh)
          for (int64_t ow = 0; ow < wd; ++ow) {
            int64_t pix = oh * wd + ow;
            auto tp = detail::bilinear_taps<T>(
                static_cast<T>(ow - pad + kx) + offx[pix],
                static_cast<T>(oh - pad + ky) + offy[pix]);
            for (int64_t ic = 0; ic < ci; ++ic)
              v[((b * ci + ic) * taps + t) * plane + pix] =
                  detail::bilinear_value(px + (b * ci + ic) * plane, h, wd,
                                         tp);
          }
      }
  };

  auto out = make_op_output<T>(
      Shape{n, co, h, wd}, {x, w, offsets},
      [x, w, offsets, gather, n, ci, co, k, taps, pad, h, wd,
       plane](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        std::vector<T> v;
        gather(x.data(), offsets.data(), v);
        const int64_t m = ci * taps;
        if (w.requires_grad()) {
          auto& g = w.impl()->grad;
          if (g.empty()) g.assign(w.numel(), T(0));
          for (int64_t b = 0; b < n; ++b)
            for (int64_t oc = 0; oc < co; ++oc)
              for (int64_t mm = 0; mm < m; ++mm) {
                const T* dyr = dy + (b * co + oc) * plane;
                const T* vr = v.data() + (b * m + mm) * plane;
                T acc = 0;
                for (int64_t i = 0; i < plane; ++i) acc += dyr[i] * vr[i];
                // w index: [oc][ci][ky][kx] = [oc][mm/taps][tap]
                g[oc * m + mm] += acc;
              }
        }
        const bool gx = x.requires_grad(), go = offsets.requires_grad();
        if (!gx && !go) return;
        // dV = w^T * dy
        std::vector<T> dv(n * m * plane, T(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t oc = 0; oc < co; ++oc) {
            const T* dyr = dy + (b * co + oc) * plane;
            const T* wr = w.data() + oc * m;
            for (int64_t mm = 0; mm < m; ++mm) {
              T wv = wr[mm];
              if (wv == T(0)) continue;
              T* dvr = dv.data() + (b * m + mm) * plane;
              for (int64_t i = 0; i < plane; ++i) dvr[i] += wv * dyr[i];
            }
          }
        if (gx && x.impl()->grad.empty())
          x.impl()->grad.assign(x.numel(), T(0));
        if (go && offsets.impl()->grad.empty())
          offsets.impl()->grad.assign(offsets.numel(), T(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t t = 0; t < taps; ++t) {
            const T* offx = offsets.data() + ((b * 2 * taps) + 2 * t) * plane;
            const T* offy =
                offsets.data() + ((b * 2 * taps) + 2 * t + 1) * plane;
            const int64_t ky = t / k, kx = t % k;
            for (int64_t oh = 0; oh < h; ++oh)
              for (int64_t ow = 0; ow < wd; ++ow) {
                int64_t pix = oh * wd + ow;
                auto tp = detail::bilinear_taps<T>(
                    static_cast<T>(ow - pad + kx) + offx[pix],
                    static_cast<T>(oh - pad + ky) + offy[pix]);
                T gdx = 0, gdy = 0;
                for (int64_t ic = 0; ic < ci; ++ic) {
                  T gv = dv[((b * ci + ic) * taps + t) * plane + pix];
                  if (gv == T(0)) continue;
                  if (gx)
                    detail::bilinear_scatter(
                        x.impl()->grad.data() + (b * ci + ic) * plane, h, wd,
                        tp, gv);
                  if (go) {
                    T dpx, dpy;
                    detail::bilinear_coord_grad(
                        x.data() + (b * ci + ic) * plane, h, wd, tp, dpx,
                        dpy);
                    gdx += gv * dpx;
                    gdy += gv * dpy;
                  }
                }
                if (go) {
                  offsets.impl()->grad[((b * 2 * taps) + 2 * t) * plane +
                                       pix] += gdx;
                  offsets.impl()->grad[((b * 2 * taps) + 2 * t + 1) * plane +
                                       pix] += gdy;
                }
              }
          }
      });

  std::vector<T> v;
  gather(x.data(), offsets.data(), v);
  const int64_t m = ci * taps;
  T* po = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < co; ++oc) {
      T* orow = po + (b * co + oc) * plane;
      const T* wr = w.data() + oc * m;
      for (int64_t mm = 0; mm < m; ++mm) {
        T wv = wr[mm];
        if (wv == T(0)) continue;
        const T* vr = v.data() + (b * m + mm) * plane;
        for (int64_t i = 0; i < plane; ++i) orow[i] += wv * vr[i];
      }
    }
  return out;
}

// Surface-tension constraint along a K-step chain. Channel c = K/2 is the
// center step and passes through unchanged; outward steps are clamped
// against the previously constrained neighbor:
//   left : positive side max(|step|, |inner|), negative side min(...)
//   right: positive side min(...),             negative side max(...)
// sgn(0) = 0, so a zero raw step stays zero regardless of the chain.
template <typename T>
Tensor<T> apply_flow_constraint(const Tensor<T>& d, FlowPattern pattern) {
  if (d.rank() != 4) throw ShapeError("flow_constraint: expects [N,K,H,W]");
  const int64_t n = d.dim(0), k = d.dim(1), plane = d.dim(2) * d.dim(3);
  if (k % 2 == 0) throw ShapeError("flow_constraint: K must be odd");
  const int64_t c = k / 2;
  const bool pos_max = pattern == FlowPattern::Left;

  // One chain walk; fn(s, winner_is_raw, m_s) is invoked per outward step.
  // Shared by forward and backward so tie-breaking matches exactly.
  auto walk = [=](const T* dp, int64_t base,
                  const std::function<void(int64_t, bool, T)>& fn) {
    T m_prev = std::fabs(dp[base + c * plane]);
    for (int64_t s = c + 1; s < k; ++s) {
      T a = std::fabs(dp[base + s * plane]);
      bool raw_wins = pos_max ? (a >= m_prev) : (a <= m_prev);
      T m = raw_wins ? a : m_prev;
      fn(s, raw_wins, m);
      m_prev = m;
    }
    m_prev = std::fabs(dp[base + c * plane]);
    for (int64_t s = c - 1; s >= 0; --s) {
      T a = std::fabs(dp[base + s * plane]);
      bool raw_wins = pos_max ? (a <= m_prev) : (a >= m_prev);
      T m = raw_wins ? a : m_prev;
      fn(s, raw_wins, m);
      m_prev = m;
    }
  };
  auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };

  auto out = make_op_output<T>(
      d.shape(), {d}, [d, walk, sgn, n, k, c, plane](const TensorData<T>& o) {
        if (!d.requires_grad()) return;
        auto& g = d.impl()->grad;
        if (g.empty()) g.assign(d.numel(), T(0));
        const T* dp = d.data();
        const T* dy = o.grad.data();
        // Replay the chain to recover winners, then push gradients inward:
        // each step's magnitude grad lands on the raw step that won, and
        // sgn routes it back to the signed input.
        std::vector<char> raw_win(k);
        for (int64_t b = 0; b < n; ++b)
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t base = b * k * plane + p;
            walk(dp, base, [&](int64_t s, bool rw, T) {
              raw_win[s] = rw ? 1 : 0;
            });
            g[base + c * plane] += dy[base + c * plane];
            T gm_center = 0;
            for (int side = 0; side < 2; ++side) {
              T gm = 0;  // grad w.r.t. the running magnitude entering step s
              int64_t s_end = side == 0 ? k - 1 : 0;
              int64_t step = side == 0 ? -1 : 1;
              for (int64_t s = s_end; s != c; s += step) {
                T sg = sgn(dp[base + s * plane]);
                gm += dy[base + s * plane] * sg;
                if (raw_win[s]) {
                  g[base + s * plane] += gm * sg;
                  gm = 0;
                }
              }
              gm_center += gm;
            }
            g[base + c * plane] += gm_center * sgn(dp[base + c * plane]);
          }
      });
  const T* dp = d.data();
  T* po = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const int64_t base = b * k * plane + p;
      po[base + c * plane] = dp[base + c * plane];
      walk(dp, base, [&](int64_t s, bool, T m) {
        po[base + s * plane] = sgn(dp[base + s * plane]) * m;
      });
    }
  return out;
}

// Running prefix sum outward from the center step: the tap at distance t
// accumulates the t outward steps beyond the center, so the center tap is
// never displaced and its own channel contributes nothing here.
template <typename T>
Tensor<T> center_cumsum(const Tensor<T>& d) {
  if (d.rank() != 4) throw ShapeError("center_cumsum: expects [N,K,H,W]");
  const int64_t n = d.dim(0), k = d.dim(1), plane = d.dim(2) * d.dim(3);
  if (k % 2 == 0) throw ShapeError("center_cumsum: K must be odd");
  const int64_t c = k / 2;
  auto out = make_op_output<T>(
      d.shape(), {d}, [d, n, k, c, plane](const TensorData<T>& o) {
        if (!d.requires_grad()) return;
        auto& g = d.impl()->grad;
        if (g.empty()) g.assign(d.numel(), T(0));
        const T* dy = o.grad.data();
        // Suffix sums: step s>c feeds every tap at or beyond s.
        for (int64_t b = 0; b < n; ++b)
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t base = b * k * plane + p;
            T acc = 0;
            for (int64_t s = k - 1; s > c; --s) {
              acc += dy[base + s * plane];
              g[base + s * plane] += acc;
            }
            acc = 0;
            for (int64_t s = 0; s < c; ++s) {
              acc += dy[base + s * plane];
              g[base + s * plane] += acc;
            }
          }
      });
  const T* dp = d.data();
  T* po = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const int64_t base = b * k * plane + p;
      po[base + c * plane] = T(0);
      T acc = 0;
      for (int64_t s = c + 1; s < k; ++s) {
        acc += dp[base + s * plane];
        po[base + s * plane] = acc;
      }
      acc = 0;
      for (int64_t s = c - 1; s >= 0; --s) {
        acc += dp[base + s * plane];
        po[base + s * plane] = acc;
      }
    }
  return out;
}

// 1xK (horizontal) or Kx1 (vertical) convolution whose taps are displaced
// perpendicular to the kernel axis by disp[N,K,H,W], sampled bilinearly
// with zero padding. w is [Co,Ci,K].
template <typename T>
Tensor<T> axis_sampled_conv(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& disp, Axis axis) {
  if (x.rank() != 4 || w.rank() != 3)
    throw ShapeError("axis_sampled_conv: expects [N,C,H,W] x [Co,Ci,K]");
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci) throw ShapeError("axis_sampled_conv: channel mismatch");
  if (k % 2 == 0) throw ShapeError("axis_sampled_conv: K must be odd");
  if (disp.rank() != 4 || disp.dim(0) != n || disp.dim(1) != k ||
      disp.dim(2) != h || disp.dim(3) != wd)
    throw ShapeError("axis_sampled_conv: disp must be [N,K,H,W], got " +
                     shape_str(disp.shape()));
  const int64_t c = k / 2, plane = h * wd;
  const bool horiz = axis == Axis::Horizontal;

  // The tap coordinate along the kernel axis is an integer, so the bilinear
  // sample collapses to two reads interpolated along the perpendicular axis.
  auto gather = [=](const T* px, const T* pd, T* v) {
    for (int64_t b = 0; b < n; ++b)
      for (int64_t s = 0; s < k; ++s) {
        const T* dr = pd + (b * k + s) * plane;
        const T* xb = px + b * ci * plane;
        T* vs = v + (b * ci * k + s) * plane;
        const int64_t off = s - c;
        for (int64_t oh = 0; oh < h; ++oh)
          for (int64_t ow = 0; ow < wd; ++ow) {
            const int64_t pix = oh * wd + ow;
            T w0, w1;
            int64_t i0, i1;  // plane indices of the two taps, -1 when padded
            if (horiz) {
              const int64_t col = ow + off;
              const T py = static_cast<T>(oh) + dr[pix];
              const T fy0 = std::floor(py);
              const int64_t y0 = static_cast<int64_t>(fy0);
              const T f = py - fy0;
              w0 = T(1) - f;
              w1 = f;
              const bool in = col >= 0 && col < wd;
              i0 = in && y0 >= 0 && y0 < h ? y0 * wd + col : -1;
              i1 = in && y0 + 1 >= 0 && y0 + 1 < h ? (y0 + 1) * wd + col : -1;
            } else {
              const int64_t row = oh + off;
              const T pxc = static_cast<T>(ow) + dr[pix];
              const T fx0 = std::floor(pxc);
              const int64_t x0 = static_cast<int64_t>(fx0);
              const T f = pxc - fx0;
              w0 = T(1) - f;
              w1 = f;
              const bool in = row >= 0 && row < h;
              i0 = in && x0 >= 0 && x0 < wd ? row * wd + x0 : -1;
              i1 = in && x0 + 1 >= 0 && x0 + 1 < wd ? row * wd + x0 + 1 : -1;
            }
            for (int64_t ic = 0; ic < ci; ++ic) {
              const T* xp = xb + ic * plane;
              T val = 0;
              if (i0 >= 0) val += w0 * xp[i0];
              if (i1 >= 0) val += w1 * xp[i1];
              vs[ic * k * plane + pix] = val;
            }
          }
      }
  };

  auto out = make_op_output<T>(
      Shape{n, co, h, wd}, {x, w, disp},
      [x, w, disp, gather, horiz, n, ci, co, k, c, h, wd,
       plane](const TensorData<T>& o) {
        const T* dy = o.grad.data();
        const int64_t m = ci * k;
        auto v = std::make_unique_for_overwrite<T[]>(n * m * plane);
        gather(x.data(), disp.data(), v.get());
        if (w.requires_grad()) {
          auto& g = w.impl()->grad;
          if (g.empty()) g.assign(w.numel(), T(0));
          for (int64_t b = 0; b < n; ++b)
            detail::gemm_dot_acc(dy + b * co * plane, v.get() + b * m * plane,
                                 g.data(), co, m, plane);
        }
        const bool gx = x.requires_grad(), gd = disp.requires_grad();
        if (!gx && !gd) return;
        std::vector<T> w_t(m * co);
        detail::transpose_mat(w.data(), w_t.data(), co, m);
        auto dv = std::make_unique_for_overwrite<T[]>(n * m * plane);
        for (int64_t b = 0; b < n; ++b)
          detail::gemm_acc<T, false>(w_t.data(), dy + b * co * plane,
                                     dv.get() + b * m * plane, m, co, plane);
        if (gx && x.impl()->grad.empty())
          x.impl()->grad.assign(x.numel(), T(0));
        if (gd && disp.impl()->grad.empty())
          disp.impl()->grad.assign(disp.numel(), T(0));
        for (int64_t b = 0; b < n; ++b)
          for (int64_t s = 0; s < k; ++s) {
            const T* dr = disp.data() + (b * k + s) * plane;
            T* gdr = gd ? disp.impl()->grad.data() + (b * k + s) * plane
                        : nullptr;
            const T* xb = x.data() + b * ci * plane;
            T* gxb = gx ? x.impl()->grad.data() + b * ci * plane : nullptr;
            const T* dvs = dv.get() + (b * ci * k + s) * plane;
            const int64_t off = s - c;
            for (int64_t oh = 0; oh < h; ++oh)
              for (int64_t ow = 0; ow < wd; ++ow) {
                const int64_t pix = oh * wd + ow;
                T w0, w1;
                int64_t i0, i1;
                if (horiz) {
                  const int64_t col = ow + off;
                  const T py = static_cast<T>(oh) + dr[pix];
                  const T fy0 = std::floor(py);
                  const int64_t y0 = static_cast<int64_t>(fy0);
                  const T f = py - fy0;
                  w0 = T(1) - f;
                  w1 = f;
                  const bool in = col >= 0 && col < wd;
                  i0 = in && y0 >= 0 && y0 < h ? y0 * wd + col : -1;
                  i1 = in && y0 + 1 >= 0 && y0 + 1 < h ? (y0 + 1) * wd + col
                                                       : -1;
                } else {
                  const int64_t row = oh + off;
                  const T pxc = static_cast<T>(ow) + dr[pix];
                  const T fx0 = std::floor(pxc);
                  const int64_t x0 = static_cast<int64_t>(fx0);
                  const T f = pxc - fx0;
                  w0 = T(1) - f;
                  w1 = f;
                  const bool in = row >= 0 && row < h;
                  i0 = in && x0 >= 0 && x0 < wd ? row * wd + x0 : -1;
                  i1 = in && x0 + 1 >= 0 && x0 + 1 < wd ? row * wd + x0 + 1
                                                        : -1;
                }
                T gperp = 0;
                for (int64_t ic = 0; ic < ci; ++ic) {
                  const T gv = dvs[ic * k * plane + pix];
                  if (gv == T(0)) continue;
                  if (gx) {
                    T* gp = gxb + ic * plane;
                    if (i0 >= 0) gp[i0] += gv * w0;
                    if (i1 >= 0) gp[i1] += gv * w1;
                  }
                  if (gd) {
                    // d(sample)/d(perpendicular coord) = x[hi] - x[lo]
                    const T* xp = xb + ic * plane;
                    const T v0 = i0 >= 0 ? xp[i0] : T(0);
                    const T v1 = i1 >= 0 ? xp[i1] : T(0);
                    gperp += gv * (v1 - v0);
                  }
                }
                if (gd) gdr[pix] += gperp;
              }
          }
      });

  const int64_t m = ci * k;
  auto v = std::make_unique_for_overwrite<T[]>(n * m * plane);
  gather(x.data(), disp.data(), v.get());
  T* po = out.data();
  for (int64_t b = 0; b < n; ++b)
    detail::gemm_acc(w.data(), v.get() + b * m * plane, po + b * co * plane,
                     co, m, plane);
  return out;
}

// ---------------------------------------------------------------------------
// branch and fusion composites

template <typename T>
struct DfcBranchWeights {
  Tensor<T> pred_w;  // [2K,C,3,3] offset predictor
  Tensor<T> pred_b;  // [2K]
  Tensor<T> wh;      // [C,C,K] horizontal 1xK kernel
  Tensor<T> wv;      // [C,C,K] vertical Kx1 kernel

  std::vector<Tensor<T>> params() const { return {pred_w, pred_b, wh, wv}; }
};

template <typename T>
struct DfcWeights {
  DfcBranchWeights<T> left, right;
  Tensor<T> fuse;  // [C,2C,1,1], no bias

  std::vector<Tensor<T>> params() const {
    auto v = left.params();
    auto r = right.params();
    v.insert(v.end(), r.begin(), r.end());
    v.push_back(fuse);
    return v;
  }
};

template <typename T>
DfcBranchWeights<T> make_dfc_branch_weights(int64_t c, int k) {
  DfcBranchWeights<T> w;
  w.pred_w = Tensor<T>::zeros({2 * int64_t(k), c, 3, 3}, true);
  w.pred_b = Tensor<T>::zeros({2 * int64_t(k)}, true);
  w.wh = Tensor<T>::zeros({c, c, k}, true);
  w.wv = Tensor<T>::zeros({c, c, k}, true);
  return w;
}

// Axis kernels get fan-in uniform init; the offset predictor stays at zero
// so training starts from the straight, undisplaced stencil.
template <typename T>
void dfc_branch_init(DfcBranchWeights<T>& w, Rng& rng) {
  T bound = static_cast<T>(1.0 / std::sqrt(double(w.wh.dim(1) * w.wh.dim(2))));
  fill_uniform(w.wh, rng, -bound, bound);
  fill_uniform(w.wv, rng, -bound, bound);
}

template <typename T>
DfcWeights<T> make_dfc_weights(int64_t c, int k) {
  DfcWeights<T> w;
  w.left = make_dfc_branch_weights<T>(c, k);
  w.right = make_dfc_branch_weights<T>(c, k);
  w.fuse = Tensor<T>::zeros({c, 2 * c, 1, 1}, true);
  return w;
}

template <typename T>
void dfc_init(DfcWeights<T>& w, Rng& rng) {
  dfc_branch_init(w.left, rng);
  dfc_branch_init(w.right, rng);
  T bound = static_cast<T>(1.0 / std::sqrt(double(w.fuse.dim(1))));
  fill_uniform(w.fuse, rng, -bound, bound);
}

// Per-pixel hard choice between the two constraint patterns: the side of
// the chain with the larger summed raw magnitude wins, and the left pattern
// (which amplifies the positive side) is picked when that is the positive
// side. Ties go left. The mask is constant on the tape, so gradients flow
// through the chosen pattern only.
template <typename T>
Tensor<T> adaptive_constraint(const Tensor<T>& raw) {
  Tensor<T> l = apply_flow_constraint(raw, FlowPattern::Left);
  Tensor<T> r = apply_flow_constraint(raw, FlowPattern::Right);
  const int64_t n = raw.dim(0), k = raw.dim(1),
                plane = raw.dim(2) * raw.dim(3);
  const int64_t c = k / 2;
  Tensor<T> mask, inv;
  {
    NoGradGuard ng;
    mask = Tensor<T>::zeros(raw.shape());
    inv = Tensor<T>::zeros(raw.shape());
    const T* pr = raw.data();
    T* pm = mask.data();
    T* pi = inv.data();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t p = 0; p < plane; ++p) {
        const int64_t base = b * k * plane + p;
        T pos = 0, negm = 0;
        for (int64_t s = c + 1; s < k; ++s) pos += std::fabs(pr[base + s * plane]);
        for (int64_t s = 0; s < c; ++s) negm += std::fabs(pr[base + s * plane]);
        bool left = pos >= negm;
        for (int64_t s = 0; s < k; ++s) {
          pm[base + s * plane] = left ? T(1) : T(0);
          pi[base + s * plane] = left ? T(0) : T(1);
        }
      }
  }
  return add(mul(mask, l), mul(inv, r));
}

// One constrained branch: a 3x3 conv predicts tanh-bounded perpendicular
// offsets (first K channels for the 1xK kernel, next K for the Kx1 kernel),
// the flow constraint and outward prefix sum turn them into tap
// displacements, and the two axis responses are summed.
template <typename T>
Tensor<T> dfc_branch(const Tensor<T>& x, const DfcBranchWeights<T>& w,
                     BranchPattern pattern, T max_offset = T(2)) {
  const int64_t k = w.wh.dim(2);
  Tensor<T> raw = conv2d(x, w.pred_w, w.pred_b, 1, 1);
  raw = scale(tanh(raw), max_offset);
  Tensor<T> d_y = slice_channels(raw, 0, k);
  Tensor<T> d_x = slice_channels(raw, k, 2 * k);
  auto constrain = [&](const Tensor<T>& t) {
    switch (pattern) {
      case BranchPattern::Left:
        return apply_flow_constraint(t, FlowPattern::Left);
      case BranchPattern::Right:
        return apply_flow_constraint(t, FlowPattern::Right);
      default:
        return adaptive_constraint(t);
    }
  };
  Tensor<T> disp_y = center_cumsum(constrain(d_y));
  Tensor<T> disp_x = center_cumsum(constrain(d_x));
  Tensor<T> hout = axis_sampled_conv(x, w.wh, disp_y, Axis::Horizontal);
  Tensor<T> vout = axis_sampled_conv(x, w.wv, disp_x, Axis::Vertical);
  return add(hout, vout);
}

// Full dynamic flow convolution: left and right branches concatenated and
// fused back to C channels by a bias-free 1x1 conv.
template <typename T>
Tensor<T> dfc(const Tensor<T>& x, const DfcWeights<T>& w,
              T max_offset = T(2)) {
  Tensor<T> l = dfc_branch(x, w.left, BranchPattern::Left, max_offset);
  Tensor<T> r = dfc_branch(x, w.right, BranchPattern::Right, max_offset);
  Tensor<T> cat = concat_channels<T>({l, r});
  return conv2d(cat, w.fuse, Tensor<T>(), 1, 0);
}

// Plain deformable baseline: a 3x3 predictor feeds an unconstrained,
// unbounded offset field to a 3x3 deformable conv.
template <typename T>
struct NdcWeights {
  Tensor<T> pred_w;  // [18,C,3,3]
  Tensor<T> pred_b;  // [18]
  Tensor<T> w;       // [C,C,3,3]

  std::vector<Tensor<T>> params() const { return {pred_w, pred_b, w}; }
};

template <typename T>
NdcWeights<T> make_ndc_weights(int64_t c) {
  NdcWeights<T> w;
  w.pred_w = Tensor<T>::zeros({18, c, 3, 3}, true);
  w.pred_b = Tensor<T>::zeros({18}, true);
  w.w = Tensor<T>::zeros({c, c, 3, 3}, true);
  return w;
}

template <typename T>
void ndc_init(NdcWeights<T>& w, Rng& rng) {
  T bound = static_cast<T>(1.0 / std::sqrt(double(w.w.dim(1) * 9)));
  fill_uniform(w.w, rng, -bound, bound);
}

template <typename T>
Tensor<T> ndc(const Tensor<T>& x, const NdcWeights<T>& w) {
  Tensor<T> offsets = conv2d(x, w.pred_w, w.pred_b, 1, 1);
  return deformable_conv2d(x, w.w, offsets);
}

}  // namespace fisr
