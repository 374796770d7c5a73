#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fisr/network.hpp"

// Adam with bias correction and an exponential moving average of the
// parameters, both operating on a ParamStore.

namespace fisr {

template <typename T>
struct Adam {
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step_count = 0;
  // Moments are index-aligned with the store's registration order.
  std::vector<Tensor<T>> m, v;

  explicit Adam(const ParamStore<T>& ps, double lr_ = 3e-4) : lr(lr_) {
    for (const auto& [name, p] : ps.items()) {
      m.push_back(Tensor<T>::zeros(p.shape()));
      v.push_back(Tensor<T>::zeros(p.shape()));
    }
  }

  void step(ParamStore<T>& ps) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, double(step_count));
    const double bc2 = 1.0 - std::pow(beta2, double(step_count));
    size_t idx = 0;
    for (auto& [name, p] : ps.items()) {
      if (!p.has_grad())
        throw TrainError("adam: missing grad for parameter " + name);
      Tensor<T> pt = p;
      const T* g = pt.grad().data();
      T* pm = m[idx].data();
      T* pv = v[idx].data();
      T* pw = pt.data();
      for (int64_t i = 0; i < pt.numel(); ++i) {
        pm[i] = T(beta1) * pm[i] + T(1.0 - beta1) * g[i];
        pv[i] = T(beta2) * pv[i] + T(1.0 - beta2) * g[i] * g[i];
        const double mhat = double(pm[i]) / bc1;
        const double vhat = double(pv[i]) / bc2;
        pw[i] -= T(lr * mhat / (std::sqrt(vhat) + eps));
      }
      ++idx;
    }
  }
};

template <typename T>
struct Ema {
  double decay = 0.999;
  std::vector<std::pair<std::string, Tensor<T>>> shadow;

  Ema() = default;
  Ema(const ParamStore<T>& ps, double decay_) : decay(decay_) {
    for (const auto& [name, p] : ps.items())
      shadow.emplace_back(name, p.clone());
  }

  void check_aligned(const ParamStore<T>& ps) const {
    const auto& items = ps.items();
    if (items.size() != shadow.size())
      throw TrainError("ema: parameter count mismatch");
    for (size_t i = 0; i < items.size(); ++i) {
      if (items[i].first != shadow[i].first)
        throw TrainError("ema: parameter name mismatch at index " +
                         std::to_string(i) + ": " + items[i].first + " vs " +
                         shadow[i].first);
      if (items[i].second.shape() != shadow[i].second.shape())
        throw TrainError("ema: shape mismatch for " + items[i].first);
    }
  }

  void update(const ParamStore<T>& ps) {
    check_aligned(ps);
    const auto& items = ps.items();
    for (size_t i = 0; i < items.size(); ++i) {
      T* s = shadow[i].second.data();
      const T* p = items[i].second.data();
      for (int64_t j = 0; j < shadow[i].second.numel(); ++j)
        s[j] = T(decay) * s[j] + T(1.0 - decay) * p[j];
    }
  }

  // Exchanges shadow and live parameter buffers; calling twice restores the
  // originals bit-exactly. Used to evaluate with averaged weights.
  void swap_into(ParamStore<T>& ps) {
    check_aligned(ps);
    auto& items = ps.items();
    for (size_t i = 0; i < items.size(); ++i) {
      Tensor<T> p = items[i].second;
      std::swap_ranges(p.data(), p.data() + p.numel(),
                       shadow[i].second.data());
    }
  }
};

}  // namespace fisr
