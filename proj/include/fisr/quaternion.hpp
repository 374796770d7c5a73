#pragma once

#include "fisr/ops.hpp"

// Quaternion-valued convolution. A quaternion feature map is four real
// tensors (r, i, j, k parts) of one shape; the packed form stacks them
// channel-wise as [N,4F,H,W] with component-major blocks.

namespace fisr {

// Scalar quaternion, used by tests as an oracle for the tensor path.
template <typename T>
struct Quaternion {
  T r = 0, x = 0, y = 0, z = 0;

  Quaternion conjugate() const { return {r, -x, -y, -z}; }
  T norm() const { return std::sqrt(r * r + x * x + y * y + z * z); }
};

template <typename T>
Quaternion<T> hamilton(const Quaternion<T>& a, const Quaternion<T>& b) {
  return {a.r * b.r - a.x * b.x - a.y * b.y - a.z * b.z,
          a.r * b.x + a.x * b.r + a.y * b.z - a.z * b.y,
          a.r * b.y - a.x * b.z + a.y * b.r + a.z * b.x,
          a.r * b.z + a.x * b.y - a.y * b.x + a.z * b.r};
}

// Component-wise (split) activation on a scalar quaternion.
template <typename T, typename Fn>
Quaternion<T> split_activation(const Quaternion<T>& q, Fn&& fn) {
  return {fn(q.r), fn(q.x), fn(q.y), fn(q.z)};
}

template <typename T>
struct QuaternionFeature {
  Tensor<T> r, i, j, k;
};

// Split activation on a feature: fn is any tensor -> tensor map, applied to
// each part independently.
template <typename T, typename Fn>
QuaternionFeature<T> split_activation(const QuaternionFeature<T>& q,
                                      Fn&& fn) {
  return {fn(q.r), fn(q.i), fn(q.j), fn(q.k)};
}

template <typename T>
struct QuaternionConvWeights {
  Tensor<T> wr, wx, wy, wz;  // each [Fo,Fi,K,K]
  Tensor<T> br, bx, by, bz;  // each [Fo]; leave undefined for no bias

  int64_t out_features() const { return wr.dim(0); }
  int64_t in_features() const { return wr.dim(1); }
  int64_t kernel() const { return wr.dim(2); }

  std::vector<Tensor<T>> params() const {
    std::vector<Tensor<T>> v = {wr, wx, wy, wz};
    if (br.defined()) {
      v.push_back(br);
      v.push_back(bx);
      v.push_back(by);
      v.push_back(bz);
    }
    return v;
  }
};

template <typename T>
QuaternionConvWeights<T> make_qconv_weights(int64_t fo, int64_t fi, int k,
                                            bool bias) {
  QuaternionConvWeights<T> w;
  Shape ks{fo, fi, k, k};
  w.wr = Tensor<T>::zeros(ks, true);
  w.wx = Tensor<T>::zeros(ks, true);
  w.wy = Tensor<T>::zeros(ks, true);
  w.wz = Tensor<T>::zeros(ks, true);
  if (bias) {
    w.br = Tensor<T>::zeros({fo}, true);
    w.bx = Tensor<T>::zeros({fo}, true);
    w.by = Tensor<T>::zeros({fo}, true);
    w.bz = Tensor<T>::zeros({fo}, true);
  }
  return w;
}

// Each weight quaternion is a uniformly random unit 4-vector scaled by a
// magnitude drawn from U(0, M). M is chosen so the per-component variance
// (E[m^2]/4 = M^2/12) matches the fan-in uniform init of the expanded real
// form, whose fan-in is 4*Fi*K^2: variance 1/(3*4*Fi*K^2). Biases stay zero.
template <typename T>
void quaternion_init(QuaternionConvWeights<T>& w, Rng& rng) {
  const int64_t k = w.kernel();
  const double m_max = 1.0 / (double(k) * std::sqrt(double(w.in_features())));
  T* pr = w.wr.data();
  T* px = w.wx.data();
  T* py = w.wy.data();
  T* pz = w.wz.data();
  for (int64_t idx = 0; idx < w.wr.numel(); ++idx) {
    double u[4], norm = 0;
    do {
      norm = 0;
      for (double& c : u) {
        c = rng.normal();
        norm += c * c;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    double m = rng.uniform(0.0, m_max) / norm;
    pr[idx] = static_cast<T>(m * u[0]);
    px[idx] = static_cast<T>(m * u[1]);
    py[idx] = static_cast<T>(m * u[2]);
    pz[idx] = static_cast<T>(m * u[3]);
  }
}

namespace detail {

// conv2d without bias, shorthand for the Hamilton expansion below.
template <typename T>
Tensor<T> qpart_conv(const Tensor<T>& x, const Tensor<T>& w, int stride,
                     int pad) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

}  // namespace detail

// Quaternion convolution, expanded into 16 real convolutions by the
// Hamilton product (kernel on the left):
//   | yr |   |  r -x -y -z | | xr |
//   | yi |   |  x  r -z  y | | xi |
//   | yj | = |  y  z  r -x | | xj |
//   | yk |   |  z -y  x  r | | xk |
template <typename T>
QuaternionFeature<T> qconv2d(const QuaternionFeature<T>& q,
                             const QuaternionConvWeights<T>& w, int stride,
                             int pad) {
  using detail::qpart_conv;
  check_same_shape("qconv2d parts", q.r, q.i);
  check_same_shape("qconv2d parts", q.r, q.j);
  check_same_shape("qconv2d parts", q.r, q.k);
  QuaternionFeature<T> y;
  y.r = conv2d(q.r, w.wr, w.br, stride, pad);
  y.r = sub(y.r, qpart_conv(q.i, w.wx, stride, pad));
  y.r = sub(y.r, qpart_conv(q.j, w.wy, stride, pad));
  y.r = sub(y.r, qpart_conv(q.k, w.wz, stride, pad));

  y.i = conv2d(q.r, w.wx, w.bx, stride, pad);
  y.i = add(y.i, qpart_conv(q.i, w.wr, stride, pad));
  y.i = sub(y.i, qpart_conv(q.j, w.wz, stride, pad));
  y.i = add(y.i, qpart_conv(q.k, w.wy, stride, pad));

  y.j = conv2d(q.r, w.wy, w.by, stride, pad);
  y.j = add(y.j, qpart_conv(q.i, w.wz, stride, pad));
  y.j = add(y.j, qpart_conv(q.j, w.wr, stride, pad));
  y.j = sub(y.j, qpart_conv(q.k, w.wx, stride, pad));

  y.k = conv2d(q.r, w.wz, w.bz, stride, pad);
  y.k = sub(y.k, qpart_conv(q.i, w.wy, stride, pad));
  y.k = add(y.k, qpart_conv(q.j, w.wx, stride, pad));
  y.k = add(y.k, qpart_conv(q.k, w.wr, stride, pad));
  return y;
}

// Packed form: channels of x are the four component blocks [r|i|j|k].
template <typename T>
Tensor<T> qconv2d(const Tensor<T>& x, const QuaternionConvWeights<T>& w,
                  int pad) {
  if (x.rank() != 4 || x.dim(1) % 4 != 0)
    throw ShapeError("qconv2d: channels must split into 4 blocks, got " +
                     shape_str(x.shape()));
  const int64_t f = x.dim(1) / 4;
  if (f != w.in_features())
    throw ShapeError("qconv2d: input features " + std::to_string(f) +
                     " vs kernel " + std::to_string(w.in_features()));
  QuaternionFeature<T> q;
  q.r = slice_channels(x, 0, f);
  q.i = slice_channels(x, f, 2 * f);
  q.j = slice_channels(x, 2 * f, 3 * f);
  q.k = slice_channels(x, 3 * f, 4 * f);
  QuaternionFeature<T> y = qconv2d(q, w, 1, pad);
  return concat_channels<T>({y.r, y.i, y.j, y.k});
}

// Quaternion conv of an input whose real part is identically zero. The
// input carries only the three imaginary blocks ([N,3F,H,W]), so the real
// column of the Hamilton expansion drops and 12 convolutions remain (9 when
// the real output is discarded too).
template <typename T>
QuaternionFeature<T> qconv2d_zero_real(const Tensor<T>& x,
                                       const QuaternionConvWeights<T>& w,
                                       int pad, bool want_real) {
  if (x.rank() != 4 || x.dim(1) % 3 != 0)
    throw ShapeError("qconv2d_zero_real: channels must split into 3 blocks, "
                     "got " + shape_str(x.shape()));
  const int64_t f = x.dim(1) / 3;
  if (f != w.in_features())
    throw ShapeError("qconv2d_zero_real: input features " + std::to_string(f) +
                     " vs kernel " + std::to_string(w.in_features()));
  auto qp = [&](const Tensor<T>& part, const Tensor<T>& kern) {
    return detail::qpart_conv(part, kern, 1, pad);
  };
  Tensor<T> xi = slice_channels(x, 0, f);
  Tensor<T> xj = slice_channels(x, f, 2 * f);
  Tensor<T> xk = slice_channels(x, 2 * f, 3 * f);

  QuaternionFeature<T> out;
  if (want_real) {
    Tensor<T> yr = neg(qp(xi, w.wx));
    yr = sub(yr, qp(xj, w.wy));
    yr = sub(yr, qp(xk, w.wz));
    if (w.br.defined()) yr = add_channel_bias(yr, w.br);
    out.r = yr;
  }
  out.i = conv2d(xi, w.wr, w.bx, 1, pad);
  out.i = sub(out.i, qp(xj, w.wz));
  out.i = add(out.i, qp(xk, w.wy));

  out.j = conv2d(xj, w.wr, w.by, 1, pad);
  out.j = add(out.j, qp(xi, w.wz));
  out.j = sub(out.j, qp(xk, w.wx));

  out.k = conv2d(xk, w.wr, w.bz, 1, pad);
  out.k = sub(out.k, qp(xi, w.wy));
  out.k = add(out.k, qp(xj, w.wx));
  return out;
}

// Spatial modeling block: treat the 3F input channels as the imaginary part
// of a zero-real quaternion map, convolve (K=3, pad 1), and return the
// imaginary part of the result. Output channel count equals the input's.
template <typename T>
Tensor<T> qsm(const Tensor<T>& x, const QuaternionConvWeights<T>& w,
              int pad) {
  QuaternionFeature<T> b = qconv2d_zero_real(x, w, pad, /*want_real=*/false);
  return concat_channels<T>({b.i, b.j, b.k});
}

}  // namespace fisr
