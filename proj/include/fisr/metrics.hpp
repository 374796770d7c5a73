#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fisr/tensor.hpp"

// Image-quality metrics on [0,1] data: PSNR (peak 1.0, capped at 99 dB for
// identical inputs), SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01,
// K2 0.03, channel-averaged), and RMSE/MAE scaled by 255.

namespace fisr {

inline constexpr double kPsnrCap = 99.0;

namespace detail {

template <typename T>
std::vector<double> clamped01(const Tensor<T>& t) {
  std::vector<double> v(static_cast<size_t>(t.numel()));
  const T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    v[i] = std::clamp(double(p[i]), 0.0, 1.0);
  return v;
}

template <typename T>
void check_metric_shapes(const char* op, const Tensor<T>& a,
                         const Tensor<T>& b) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() < 2) throw ShapeError(std::string(op) + ": need rank >= 2");
}

}  // namespace detail

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0,
            bool* capped = nullptr) {
  detail::check_metric_shapes("psnr", a, b);
  std::vector<double> va = detail::clamped01(a), vb = detail::clamped01(b);
  double mse = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    const double d = va[i] - vb[i];
    mse += d * d;
  }
  mse /= double(va.size());
  double db = mse > 0 ? 10.0 * std::log10(peak * peak / mse) : kPsnrCap + 1;
  const bool hit = db >= kPsnrCap;
  if (capped) *capped = hit;
  return hit ? kPsnrCap : db;
}

template <typename T>
std::pair<double, double> rmse_mae_255(const Tensor<T>& a,
                                       const Tensor<T>& b) {
  detail::check_metric_shapes("rmse_mae_255", a, b);
  std::vector<double> va = detail::clamped01(a), vb = detail::clamped01(b);
  double se = 0.0, ae = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    const double d = va[i] - vb[i];
    se += d * d;
    ae += std::abs(d);
  }
  const double n = double(va.size());
  return {std::sqrt(se / n) * 255.0, ae / n * 255.0};
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  detail::check_metric_shapes("ssim", a, b);
  const int64_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  constexpr int kWin = 11;
  if (h < kWin || w < kWin)
    throw ShapeError("ssim: spatial dims must be at least 11x11, got " +
                     shape_str(a.shape()));
  const int64_t planes = a.numel() / (h * w);

  double win[kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = double(i - kWin / 2);
    win[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    wsum += win[i];
  }
  for (double& v : win) v /= wsum;

  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  std::vector<double> va = detail::clamped01(a), vb = detail::clamped01(b);

  const int64_t oh = h - kWin + 1, ow = w - kWin + 1;
  // Separable window: blur rows first, then columns, for each moment map.
  auto blur = [&](const std::vector<double>& src, std::vector<double>& dst) {
    std::vector<double> tmp(static_cast<size_t>(h * ow));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int t = 0; t < kWin; ++t) acc += win[t] * src[y * w + x + t];
        tmp[y * ow + x] = acc;
      }
    dst.assign(static_cast<size_t>(oh * ow), 0.0);
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int t = 0; t < kWin; ++t) acc += win[t] * tmp[(y + t) * ow + x];
        dst[y * ow + x] = acc;
      }
  };

  double total = 0.0;
  std::vector<double> pa(h * w), pb(h * w), paa(h * w), pbb(h * w), pab(h * w);
  std::vector<double> ma, mb, maa, mbb, mab;
  for (int64_t pl = 0; pl < planes; ++pl) {
    const double* ca = va.data() + pl * h * w;
    const double* cb = vb.data() + pl * h * w;
    for (int64_t i = 0; i < h * w; ++i) {
      pa[i] = ca[i];
      pb[i] = cb[i];
      paa[i] = ca[i] * ca[i];
      pbb[i] = cb[i] * cb[i];
      pab[i] = ca[i] * cb[i];
    }
    blur(pa, ma);
    blur(pb, mb);
    blur(paa, maa);
    blur(pbb, mbb);
    blur(pab, mab);
    double acc = 0.0;
    for (int64_t i = 0; i < oh * ow; ++i) {
      const double mu_a = ma[i], mu_b = mb[i];
      const double var_a = maa[i] - mu_a * mu_a;
      const double var_b = mbb[i] - mu_b * mu_b;
      const double cov = mab[i] - mu_a * mu_b;
      acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    total += acc / double(oh * ow);
  }
  return total / double(planes);
}

struct MetricRow {
  std::string id;
  double psnr = 0, ssim = 0, rmse_255 = 0, mae_255 = 0;
  bool psnr_capped = false;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  MetricRow aggregate() const {
    MetricRow agg;
    agg.id = "mean";
    if (rows.empty()) return agg;
    for (const MetricRow& r : rows) {
      agg.psnr += r.psnr;
      agg.ssim += r.ssim;
      agg.rmse_255 += r.rmse_255;
      agg.mae_255 += r.mae_255;
      agg.psnr_capped = agg.psnr_capped || r.psnr_capped;
    }
    const double n = double(rows.size());
    agg.psnr /= n;
    agg.ssim /= n;
    agg.rmse_255 /= n;
    agg.mae_255 /= n;
    return agg;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "sample" << std::right
       << std::setw(10) << "psnr" << std::setw(10) << "ssim"
       << std::setw(10) << "rmse" << std::setw(10) << "mae" << '\n';
    auto line = [&os](const MetricRow& r) {
      os << std::left << std::setw(16) << r.id << std::right << std::fixed
         << std::setprecision(4) << std::setw(10) << r.psnr << std::setw(10)
         << r.ssim << std::setw(10) << r.rmse_255 << std::setw(10)
         << r.mae_255 << (r.psnr_capped ? "  (psnr capped)" : "") << '\n';
    };
    for (const MetricRow& r : rows) line(r);
    line(aggregate());
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "sample,psnr,ssim,rmse_255,mae_255,psnr_capped\n";
    auto line = [&os](const MetricRow& r) {
      os << r.id << ',' << format_double(r.psnr) << ',' << format_double(r.ssim)
         << ',' << format_double(r.rmse_255) << ',' << format_double(r.mae_255)
         << ',' << (r.psnr_capped ? 1 : 0) << '\n';
    };
    for (const MetricRow& r : rows) line(r);
    line(aggregate());
    return os.str();
  }
};

}  // namespace fisr
