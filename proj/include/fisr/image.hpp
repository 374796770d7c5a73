#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "fisr/tensor.hpp"

// PNG export for [3,H,W] tensors in [0,1] plus a reader used by round-trip
// tests, and a Keys bicubic resampler (a = -0.5) for baselines.

namespace fisr {

struct ImageError : Error {
  explicit ImageError(const std::string& m) : Error(m) {}
};

namespace detail {

struct FileCloser {
  FILE* f = nullptr;
  ~FileCloser() { if (f) std::fclose(f); }
};

}  // namespace detail

template <typename T>
void png_export(const Tensor<T>& t, const std::string& path) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw ImageError("png_export: need [3,H,W], got " + shape_str(t.shape()));
  const int64_t h = t.dim(1), w = t.dim(2), plane = h * w;
  const T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!(p[i] >= T(0) && p[i] <= T(1)))
      throw ImageError("png_export: value " + format_double(double(p[i])) +
                       " outside [0,1]");

  std::vector<uint8_t> rows(static_cast<size_t>(plane) * 3);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rows[(y * w + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(double(p[c * plane + y * w + x]) *
                                             255.0));

  detail::FileCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw ImageError("png_export: cannot open " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("png_export: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("png_export: libpng write failed for " + path);
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < h; ++y)
    png_write_row(png, rows.data() + y * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Decodes an 8-bit RGB PNG back to raw bytes, interleaved row-major.
inline std::vector<uint8_t> png_read_rgb8(const std::string& path,
                                          int64_t& h, int64_t& w) {
  detail::FileCloser fc{std::fopen(path.c_str(), "rb")};
  if (!fc.f) throw ImageError("png_read_rgb8: cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("png_read_rgb8: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("png_read_rgb8: decode failed for " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB ||
      png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("png_read_rgb8: expected 8-bit RGB in " + path);
  }
  std::vector<uint8_t> rows(static_cast<size_t>(h) * w * 3);
  for (int64_t y = 0; y < h; ++y)
    png_read_row(png, rows.data() + y * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rows;
}

namespace detail {

// Keys cubic kernel with a = -0.5.
inline double keys_cubic(double x) {
  x = std::abs(x);
  if (x < 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
  return 0.0;
}

}  // namespace detail

// Channel-wise bicubic resample with edge clamping; works on [C,H,W] or
// [N,C,H,W]. Source coordinates follow the half-pixel center convention.
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ImageError("bicubic_resize: need [C,H,W] or [N,C,H,W], got " +
                     shape_str(x.shape()));
  const int64_t in_h = x.dim(x.rank() - 2), in_w = x.dim(x.rank() - 1);
  const int64_t planes = x.numel() / (in_h * in_w);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = out_h;
  out_shape[x.rank() - 1] = out_w;
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  const double sy = double(in_h) / double(out_h);
  const double sx = double(in_w) / double(out_w);
  std::vector<int64_t> x0(out_w);
  std::vector<double> wx(out_w * 4);
  for (int64_t ox = 0; ox < out_w; ++ox) {
    const double src = (ox + 0.5) * sx - 0.5;
    const int64_t base = static_cast<int64_t>(std::floor(src)) - 1;
    x0[ox] = base;
    for (int t = 0; t < 4; ++t)
      wx[ox * 4 + t] = detail::keys_cubic(src - double(base + t));
  }
  auto clampi = [](int64_t v, int64_t n) {
    return v < 0 ? 0 : (v >= n ? n - 1 : v);
  };

  const T* src = x.data();
  T* dst = out.data();
  for (int64_t pl = 0; pl < planes; ++pl) {
    const T* sp = src + pl * in_h * in_w;
    T* dp = dst + pl * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const double srcy = (oy + 0.5) * sy - 0.5;
      const int64_t ybase = static_cast<int64_t>(std::floor(srcy)) - 1;
      double wy[4];
      for (int t = 0; t < 4; ++t)
        wy[t] = detail::keys_cubic(srcy - double(ybase + t));
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (int ty = 0; ty < 4; ++ty) {
          const int64_t yy = clampi(ybase + ty, in_h);
          double row = 0.0;
          for (int tx = 0; tx < 4; ++tx) {
            const int64_t xx = clampi(x0[ox] + tx, in_w);
            row += wx[ox * 4 + tx] * double(sp[yy * in_w + xx]);
          }
          acc += wy[ty] * row;
        }
        dp[oy * out_w + ox] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

}  // namespace fisr
