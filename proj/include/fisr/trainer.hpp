#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "fisr/dataset.hpp"
#include "fisr/metrics.hpp"
#include "fisr/optim.hpp"

// Training harness: L1 loss on random aligned crops with flip/rotation
// augmentation, Adam + EMA, whole-image evaluation with reflective padding,
// and atomic checkpoints that resume bit-identically.

namespace fisr {

struct TrainConfig {
  double lr = 3e-4;
  int batch = 4;
  int iterations = 2000;
  double ema_decay = 0.999;
  int lr_crop = 32;
  uint64_t seed = 1;
  int eval_every = 500;
  std::string checkpoint_dir = "checkpoints";
  std::string data_root = "data";
  std::string train_split = "train";
  std::string eval_split = "test";
  bool augment = true;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (!(ema_decay > 0 && ema_decay < 1))
      throw ConfigError("ema_decay must be in (0,1)");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (lr_crop < 1) throw ConfigError("lr_crop must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  }
};

// --- key=value config records -------------------------------------------

using KvMap = std::map<std::string, std::string>;

inline KvMap parse_kv_lines(std::istream& in) {
  KvMap kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed key=value line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline KvMap parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_kv_lines(in);
}

inline void network_config_to_kv(const NetworkConfig& c, KvMap& kv) {
  kv["channels"] = std::to_string(c.channels);
  kv["feu_per_ffb"] = std::to_string(c.feu_per_ffb);
  kv["ffb_count"] = std::to_string(c.ffb_count);
  kv["window"] = std::to_string(c.window);
  kv["heads"] = std::to_string(c.heads);
  kv["scale"] = std::to_string(c.scale);
  kv["conv"] = to_string(c.conv_variant);
  kv["qsm"] = c.qsm_enabled ? "on" : "off";
  kv["dfc_k"] = std::to_string(c.dfc_k);
  kv["max_offset"] = format_double(c.max_offset);
}

inline void train_config_to_kv(const TrainConfig& c, KvMap& kv) {
  kv["lr"] = format_double(c.lr);
  kv["batch"] = std::to_string(c.batch);
  kv["iterations"] = std::to_string(c.iterations);
  kv["ema_decay"] = format_double(c.ema_decay);
  kv["lr_crop"] = std::to_string(c.lr_crop);
  kv["seed"] = std::to_string(c.seed);
  kv["eval_every"] = std::to_string(c.eval_every);
  kv["augment"] = c.augment ? "on" : "off";
}

namespace detail {

inline int64_t kv_int(const KvMap& kv, const std::string& key, int64_t dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": bad integer '" + it->second +
                      "'");
  }
}

inline double kv_real(const KvMap& kv, const std::string& key, double dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": bad real '" + it->second +
                      "'");
  }
}

inline bool kv_flag(const KvMap& kv, const std::string& key, bool dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  if (it->second == "on" || it->second == "1" || it->second == "true")
    return true;
  if (it->second == "off" || it->second == "0" || it->second == "false")
    return false;
  throw ConfigError("config key " + key + ": bad flag '" + it->second + "'");
}

}  // namespace detail

inline void network_config_from_kv(const KvMap& kv, NetworkConfig& c) {
  c.channels = detail::kv_int(kv, "channels", c.channels);
  c.feu_per_ffb = int(detail::kv_int(kv, "feu_per_ffb", c.feu_per_ffb));
  c.ffb_count = int(detail::kv_int(kv, "ffb_count", c.ffb_count));
  c.window = int(detail::kv_int(kv, "window", c.window));
  c.heads = int(detail::kv_int(kv, "heads", c.heads));
  c.scale = int(detail::kv_int(kv, "scale", c.scale));
  if (auto it = kv.find("conv"); it != kv.end())
    c.conv_variant = conv_variant_from_string(it->second);
  c.qsm_enabled = detail::kv_flag(kv, "qsm", c.qsm_enabled);
  c.dfc_k = int(detail::kv_int(kv, "dfc_k", c.dfc_k));
  c.max_offset = detail::kv_real(kv, "max_offset", c.max_offset);
}

inline void train_config_from_kv(const KvMap& kv, TrainConfig& c) {
  c.lr = detail::kv_real(kv, "lr", c.lr);
  c.batch = int(detail::kv_int(kv, "batch", c.batch));
  c.iterations = int(detail::kv_int(kv, "iterations", c.iterations));
  c.ema_decay = detail::kv_real(kv, "ema_decay", c.ema_decay);
  c.lr_crop = int(detail::kv_int(kv, "lr_crop", c.lr_crop));
  c.seed = uint64_t(detail::kv_int(kv, "seed", int64_t(c.seed)));
  c.eval_every = int(detail::kv_int(kv, "eval_every", c.eval_every));
  c.augment = detail::kv_flag(kv, "augment", c.augment);
}

// --- evaluation ------------------------------------------------------------

enum class EvalMode { Model, Bicubic, Oracle };

// Mirror padding on the bottom/right without repeating the edge sample;
// needs pad < extent. Raw copy, no autodiff.
template <typename T>
Tensor<T> reflect_pad_hw(const Tensor<T>& x, int64_t pad_b, int64_t pad_r) {
  const int64_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (pad_b >= h || pad_r >= w)
    throw ShapeError("reflect_pad_hw: pad must be smaller than the extent");
  if (pad_b == 0 && pad_r == 0) return x;
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = h + pad_b;
  out_shape[x.rank() - 1] = w + pad_r;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const int64_t planes = x.numel() / (h * w);
  const int64_t oh = h + pad_b, ow = w + pad_r;
  auto mirror = [](int64_t i, int64_t n) { return i < n ? i : 2 * n - 2 - i; };
  for (int64_t pl = 0; pl < planes; ++pl) {
    const T* sp = x.data() + pl * h * w;
    T* dp = out.data() + pl * oh * ow;
    for (int64_t y = 0; y < oh; ++y) {
      const int64_t sy = mirror(y, h);
      for (int64_t xx = 0; xx < ow; ++xx)
        dp[y * ow + xx] = sp[sy * w + mirror(xx, w)];
    }
  }
  return out;
}

// Whole-image prediction: the LR input is reflect-padded up to a window
// multiple, run through the net, and the output cropped back.
template <typename T>
Tensor<T> predict_whole(FisrNet<T>& net, const Tensor<T>& lr) {
  NoGradGuard ng;
  const int64_t h = lr.dim(1), w = lr.dim(2);
  const int64_t win = net.config().window;
  const int64_t ph = (win - h % win) % win, pw = (win - w % win) % win;
  Tensor<T> x = reflect_pad_hw(lr, ph, pw);
  x = reshape(x, {1, 3, h + ph, w + pw});
  Tensor<T> y = net.forward(x);
  const int64_t s = net.config().scale;
  Tensor<T> pred = Tensor<T>::zeros({3, h * s, w * s});
  const int64_t yw = (w + pw) * s, ow = w * s, oh = h * s;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t yy = 0; yy < oh; ++yy)
      std::copy_n(y.data() + (c * (h + ph) * s + yy) * yw, ow,
                  pred.data() + (c * oh + yy) * ow);
  return pred;
}

template <typename T>
MetricReport evaluate_samples(FisrNet<T>* net,
                              const std::vector<FlowSample<T>>& samples,
                              EvalMode mode) {
  MetricReport report;
  for (const FlowSample<T>& s : samples) {
    Tensor<T> pred;
    switch (mode) {
      case EvalMode::Model:
        if (!net) throw TrainError("evaluate: model mode needs a network");
        if (net->config().scale != s.scale)
          throw ConfigError("evaluate: checkpoint scale " +
                            std::to_string(net->config().scale) +
                            " vs dataset scale " + std::to_string(s.scale));
        pred = predict_whole(*net, s.lr);
        break;
      case EvalMode::Bicubic:
        pred = bicubic_resize(s.lr, s.hr.dim(1), s.hr.dim(2));
        break;
      case EvalMode::Oracle:
        pred = s.hr;
        break;
    }
    MetricRow row;
    row.id = s.id;
    row.psnr = psnr(pred, s.hr, 1.0, &row.psnr_capped);
    row.ssim = ssim(pred, s.hr);
    std::tie(row.rmse_255, row.mae_255) = rmse_mae_255(pred, s.hr);
    report.rows.push_back(row);
  }
  return report;
}

// --- checkpointing ----------------------------------------------------------

template <typename T>
struct Checkpoint {
  NetworkConfig net_cfg;
  TrainConfig train_cfg;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  int64_t step = 0;
  int64_t adam_step = 0;
  std::string rng_state;
};

template <typename T>
void save_checkpoint(const std::string& dir, const FisrNet<T>& net,
                     const Adam<T>& adam, const Ema<T>& ema,
                     const TrainConfig& tcfg, int64_t step,
                     const std::string& rng_state) {
  namespace fs = std::filesystem;
  const std::string tmp = dir + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  const auto& items = net.params().items();
  for (const auto& [name, p] : items) tensors.emplace_back(name, p);
  for (const auto& [name, s] : ema.shadow)
    tensors.emplace_back("ema/" + name, s);
  for (size_t i = 0; i < items.size(); ++i) {
    tensors.emplace_back("adam_m/" + items[i].first, adam.m[i]);
    tensors.emplace_back("adam_v/" + items[i].first, adam.v[i]);
  }
  save_tensor_bundle(tmp, tensors);

  KvMap kv;
  network_config_to_kv(net.config(), kv);
  train_config_to_kv(tcfg, kv);
  {
    std::ofstream out(tmp + "/config.txt", std::ios::trunc);
    for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
    if (!out) throw TrainError("save_checkpoint: config write failed");
  }
  {
    std::ofstream out(tmp + "/state.txt", std::ios::trunc);
    out << "step=" << step << '\n';
    out << "adam_step=" << adam.step_count << '\n';
    out << "rng=" << rng_state << '\n';
    if (!out) throw TrainError("save_checkpoint: state write failed");
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& dir) {
  Checkpoint<T> ck;
  KvMap kv = parse_kv_file(dir + "/config.txt");
  network_config_from_kv(kv, ck.net_cfg);
  train_config_from_kv(kv, ck.train_cfg);
  ck.tensors = load_tensor_bundle<T>(dir);
  KvMap st = parse_kv_file(dir + "/state.txt");
  ck.step = detail::kv_int(st, "step", 0);
  ck.adam_step = detail::kv_int(st, "adam_step", 0);
  if (auto it = st.find("rng"); it != st.end()) ck.rng_state = it->second;
  return ck;
}

// --- trainer ---------------------------------------------------------------

template <typename T>
class Trainer {
 public:
  Trainer(NetworkConfig net_cfg, TrainConfig train_cfg,
          std::vector<FlowSample<T>> train_set,
          std::vector<FlowSample<T>> eval_set, std::ostream* log = nullptr)
      : net_(net_cfg),
        cfg_(std::move(train_cfg)),
        adam_(net_.params(), cfg_.lr),
        rng_(cfg_.seed),
        train_set_(std::move(train_set)),
        eval_set_(std::move(eval_set)),
        log_(log) {
    cfg_.validate();
    if (train_set_.empty()) throw TrainError("trainer: empty train set");
    for (const FlowSample<T>& s : train_set_) {
      if (s.scale != net_cfg.scale)
        throw ConfigError("trainer: dataset scale " +
                          std::to_string(s.scale) + " vs network scale " +
                          std::to_string(net_cfg.scale));
      if (s.lr.dim(1) < cfg_.lr_crop || s.lr.dim(2) < cfg_.lr_crop)
        throw TrainError("trainer: crop " + std::to_string(cfg_.lr_crop) +
                         " larger than image " + shape_str(s.lr.shape()));
    }
    net_.init_weights(rng_);
    ema_ = Ema<T>(net_.params(), cfg_.ema_decay);
  }

  FisrNet<T>& net() { return net_; }
  Ema<T>& ema() { return ema_; }
  const TrainConfig& config() const { return cfg_; }
  int64_t step_index() const { return step_; }
  const std::vector<double>& losses() const { return losses_; }

  // One optimization step; returns the batch loss.
  double step() {
    Tensor<T> lr_batch, hr_batch;
    assemble_batch(lr_batch, hr_batch);
    net_.params().zero_grad();
    Tensor<T> pred = net_.forward(lr_batch);
    Tensor<T> loss = l1_loss(pred, hr_batch);
    const double loss_val = double(loss.item());
    if (!std::isfinite(loss_val))
      throw TrainError("divergence: non-finite loss at step " +
                       std::to_string(step_ + 1));
    loss.backward();
    adam_.step(net_.params());
    ema_.update(net_.params());
    ++step_;
    losses_.push_back(loss_val);
    if (log_)
      (*log_) << step_ << ' ' << format_double(loss_val) << ' '
              << format_double(cfg_.lr) << '\n';
    return loss_val;
  }

  // Full loop with periodic raw and EMA evaluation plus checkpointing.
  void run() {
    while (step_ < cfg_.iterations) {
      step();
      if (step_ % cfg_.eval_every == 0 || step_ == cfg_.iterations) {
        if (!eval_set_.empty()) {
          MetricReport raw = evaluate_samples(&net_, eval_set_,
                                              EvalMode::Model);
          ema_.swap_into(net_.params());
          MetricReport avg = evaluate_samples(&net_, eval_set_,
                                              EvalMode::Model);
          ema_.swap_into(net_.params());
          if (log_) {
            const MetricRow r = raw.aggregate(), e = avg.aggregate();
            (*log_) << "# eval step=" << step_ << " raw_psnr="
                    << format_double(r.psnr) << " raw_ssim="
                    << format_double(r.ssim) << " ema_psnr="
                    << format_double(e.psnr) << " ema_ssim="
                    << format_double(e.ssim) << '\n';
          }
        }
        save_checkpoint(cfg_.checkpoint_dir + "/latest", net_, adam_, ema_,
                        cfg_, step_, rng_.state());
      }
    }
  }

  void restore(const Checkpoint<T>& ck) {
    std::map<std::string, Tensor<T>> by_name(ck.tensors.begin(),
                                             ck.tensors.end());
    auto take = [&](const std::string& name, Tensor<T>& dst) {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw TrainError("restore: checkpoint misses tensor " + name);
      if (it->second.shape() != dst.shape())
        throw TrainError("restore: shape mismatch for " + name);
      std::copy_n(it->second.data(), dst.numel(), dst.data());
    };
    auto& items = net_.params().items();
    for (size_t i = 0; i < items.size(); ++i) {
      take(items[i].first, items[i].second);
      take("ema/" + items[i].first, ema_.shadow[i].second);
      take("adam_m/" + items[i].first, adam_.m[i]);
      take("adam_v/" + items[i].first, adam_.v[i]);
    }
    adam_.step_count = ck.adam_step;
    step_ = ck.step;
    if (!ck.rng_state.empty()) rng_.restore(ck.rng_state);
  }

 private:
  // Random aligned crop pair with optional flip/rotation augmentation. The
  // same logical transform is applied at both resolutions.
  void assemble_batch(Tensor<T>& lr_out, Tensor<T>& hr_out) {
    const int s = net_.config().scale;
    const int64_t c = cfg_.lr_crop, cs = c * s;
    lr_out = Tensor<T>::zeros({cfg_.batch, 3, c, c});
    hr_out = Tensor<T>::zeros({cfg_.batch, 3, cs, cs});
    for (int b = 0; b < cfg_.batch; ++b) {
      const FlowSample<T>& smp =
          train_set_[rng_.index(train_set_.size())];
      const int64_t lh = smp.lr.dim(1), lw = smp.lr.dim(2);
      const int64_t y0 = int64_t(rng_.index(size_t(lh - c + 1)));
      const int64_t x0 = int64_t(rng_.index(size_t(lw - c + 1)));
      bool fh = false, fv = false;
      int rot = 0;
      if (cfg_.augment) {
        fh = rng_.index(2) == 1;
        fv = rng_.index(2) == 1;
        rot = int(rng_.index(4));
      }
      copy_crop(smp.lr, y0, x0, c, fh, fv, rot,
                lr_out.data() + int64_t(b) * 3 * c * c);
      copy_crop(smp.hr, y0 * s, x0 * s, cs, fh, fv, rot,
                hr_out.data() + int64_t(b) * 3 * cs * cs);
    }
  }

  // Writes the transformed n x n crop at (y0,x0) of src into dst[3,n,n].
  static void copy_crop(const Tensor<T>& src, int64_t y0, int64_t x0,
                        int64_t n, bool fh, bool fv, int rot, T* dst) {
    const int64_t h = src.dim(1), w = src.dim(2);
    for (int64_t ch = 0; ch < 3; ++ch) {
      const T* sp = src.data() + ch * h * w;
      T* dp = dst + ch * n * n;
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          int64_t sy = y, sx = x;
          // Inverse transform: undo rotation (90 deg ccw steps), then flips.
          for (int r = 0; r < rot; ++r) {
            const int64_t ty = sy;
            sy = n - 1 - sx;
            sx = ty;
          }
          if (fv) sy = n - 1 - sy;
          if (fh) sx = n - 1 - sx;
          dp[y * n + x] = sp[(y0 + sy) * w + x0 + sx];
        }
    }
  }

  FisrNet<T> net_;
  TrainConfig cfg_;
  Adam<T> adam_;
  Ema<T> ema_;
  Rng rng_;
  std::vector<FlowSample<T>> train_set_, eval_set_;
  std::ostream* log_ = nullptr;
  int64_t step_ = 0;
  std::vector<double> losses_;
};

}  // namespace fisr
