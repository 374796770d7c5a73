#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fisr/ops.hpp"

// Central-difference gradient checking. Losses are rebuilt by calling the
// closure again, so the closure must capture the parameter tensors and
// re-run the graph from their current data.

namespace fisr {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int64_t checked = 0;
  bool ok = true;
};

struct GradCheckOptions {
  double tolerance = 1e-6;
  double step = 1e-4;
  // Cap on probed elements per tensor; larger tensors are subsampled.
  int64_t max_elems = 64;
  uint64_t subsample_seed = 0x9e3779b97f4a7c15ull;
};

// Relative error with an absolute floor of 1 so tiny gradients compare
// absolutely.
inline double grad_rel_err(double analytic, double numeric) {
  double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

inline GradCheckResult grad_check(
    const std::string& name, const std::function<Tensor<double>()>& loss_fn,
    const std::vector<Tensor<double>>& params,
    const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  res.tolerance = opt.tolerance;

  for (auto p : params) p.zero_grad();
  Tensor<double> loss = loss_fn();
  if (loss.numel() != 1)
    throw ShapeError("grad_check: loss must be scalar, got " +
                     shape_str(loss.shape()));
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  auto eval = [&]() {
    NoGradGuard ng;
    return loss_fn().item();
  };

  Rng rng(opt.subsample_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double> p = params[pi];
    int64_t n = p.numel();
    std::vector<int64_t> idx;
    if (n <= opt.max_elems) {
      idx.resize(n);
      for (int64_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      for (int64_t i = 0; i < opt.max_elems; ++i) idx.push_back(rng.index(n));
    }
    double* data = p.data();
    for (int64_t i : idx) {
      double saved = data[i];
      data[i] = saved + opt.step;
      double f1 = eval();
      data[i] = saved - opt.step;
      double f2 = eval();
      data[i] = saved;
      double numeric = (f1 - f2) / (2.0 * opt.step);
      double err = grad_rel_err(analytic[pi][i], numeric);
      if (err > res.max_rel_err) res.max_rel_err = err;
      ++res.checked;
    }
  }
  res.ok = res.max_rel_err <= opt.tolerance;
  return res;
}

// Random projection turns a tensor-valued op into a scalar loss with dense,
// nonuniform cotangents.
template <typename Fn>
std::function<Tensor<double>()> projected_loss(Fn fn,
                                               uint64_t seed = 0x5eedu) {
  auto weights = std::make_shared<Tensor<double>>();
  return [fn, weights, seed]() {
    Tensor<double> y = fn();
    if (!weights->defined()) {
      NoGradGuard ng;
      Rng r(seed);
      *weights = Tensor<double>::uniform(r, y.shape(), -1.0, 1.0);
    }
    return sum(mul(y, *weights));
  };
}

// Pushes values away from a kink at 0 so central differences stay on one
// side of it. Used before checking abs/relu and the tie-breaking ops.
inline void nudge_from_zero(Tensor<double>& t, double margin) {
  double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (std::fabs(p[i]) < margin) p[i] = p[i] < 0 ? -margin : margin;
  }
}

}  // namespace fisr
