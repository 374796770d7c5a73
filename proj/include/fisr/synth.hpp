#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <vector>

#include "fisr/tensor.hpp"

// Synthetic flow fields by spectral synthesis: white Gaussian noise shaped
// in Fourier space so the isotropic power spectrum follows k^exponent.

namespace fisr {

inline bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

// One raw (pre-rescale) scalar field. The r2c/c2r transform pair keeps the
// field exactly real; the DC mode is zeroed so the result has zero mean.
inline std::vector<double> gen_spectral_field(Rng& rng, int64_t h, int64_t w,
                                              double exponent) {
  if (!is_power_of_two(h) || !is_power_of_two(w))
    throw ConfigError("gen_spectral_field: sizes must be powers of two, got " +
                      std::to_string(h) + "x" + std::to_string(w));

  std::vector<double> noise(static_cast<size_t>(h * w));
  for (double& v : noise) v = rng.normal();

  const int64_t wc = w / 2 + 1;
  // std::complex<double> is layout-compatible with fftw_complex.
  std::vector<std::complex<double>> spec(static_cast<size_t>(h * wc));
  fftw_complex* spec_raw = reinterpret_cast<fftw_complex*>(spec.data());
  fftw_plan fwd = fftw_plan_dft_r2c_2d(static_cast<int>(h),
                                       static_cast<int>(w), noise.data(),
                                       spec_raw, FFTW_ESTIMATE);
  fftw_execute(fwd);
  fftw_destroy_plan(fwd);

  // Power ~ k^exponent means amplitude ~ k^(exponent/2); frequencies are in
  // cycles per field so the radial wavenumber uses signed indices.
  for (int64_t ky = 0; ky < h; ++ky) {
    const double fy = ky <= h / 2 ? double(ky) : double(ky - h);
    for (int64_t kx = 0; kx < wc; ++kx) {
      const double k = std::sqrt(fy * fy + double(kx) * double(kx));
      const double amp = k > 0 ? std::pow(k, exponent / 2.0) : 0.0;
      spec[ky * wc + kx] *= amp;
    }
  }

  std::vector<double> field(static_cast<size_t>(h * w));
  fftw_plan bwd = fftw_plan_dft_c2r_2d(static_cast<int>(h),
                                       static_cast<int>(w), spec_raw,
                                       field.data(), FFTW_ESTIMATE);
  fftw_execute(bwd);
  fftw_destroy_plan(bwd);

  const double scale = 1.0 / double(h * w);
  for (double& v : field) v *= scale;
  return field;
}

namespace detail {

// Affine map of a channel onto [0,1]; a flat channel maps to 0.5.
inline void rescale_unit(double* p, int64_t n) {
  double lo = p[0], hi = p[0];
  for (int64_t i = 1; i < n; ++i) {
    lo = std::min(lo, p[i]);
    hi = std::max(hi, p[i]);
  }
  if (hi - lo < 1e-300) {
    for (int64_t i = 0; i < n; ++i) p[i] = 0.5;
    return;
  }
  const double inv = 1.0 / (hi - lo);
  for (int64_t i = 0; i < n; ++i) p[i] = (p[i] - lo) * inv;
}

}  // namespace detail

// Three-channel field in [0,1]. multi_velocities draws three independent
// channels; otherwise one channel is replicated into all three.
template <typename T = double>
Tensor<T> gen_synthetic_field(uint64_t seed, int64_t h, int64_t w,
                              double exponent = -5.0 / 3.0,
                              bool multi_velocities = true) {
  Rng rng(seed);
  Tensor<T> out = Tensor<T>::zeros({3, h, w});
  const int64_t plane = h * w;
  const int channels = multi_velocities ? 3 : 1;
  for (int c = 0; c < channels; ++c) {
    std::vector<double> f = gen_spectral_field(rng, h, w, exponent);
    detail::rescale_unit(f.data(), plane);
    for (int64_t i = 0; i < plane; ++i)
      out.data()[c * plane + i] = static_cast<T>(f[i]);
  }
  if (!multi_velocities)
    for (int c = 1; c < 3; ++c)
      for (int64_t i = 0; i < plane; ++i)
        out.data()[c * plane + i] = out.data()[i];
  return out;
}

}  // namespace fisr
