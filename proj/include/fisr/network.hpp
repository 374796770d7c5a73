#pragma once

#include <map>
#include <unordered_map>

#include "fisr/flow_conv.hpp"
#include "fisr/ops.hpp"
#include "fisr/quaternion.hpp"

// Full super-resolution network: shallow conv, a trunk of flow feature
// blocks (windowed attention + constrained flow conv units, quaternion tail),
// a long residual around the trunk, and a pixel-shuffle reconstruction head.

namespace fisr {

enum class ConvVariant { None, Ndc, Ldfc, Rdfc, Adfc, Dfc };

inline std::string to_string(ConvVariant v) {
  switch (v) {
    case ConvVariant::None: return "none";
    case ConvVariant::Ndc: return "ndc";
    case ConvVariant::Ldfc: return "ldfc";
    case ConvVariant::Rdfc: return "rdfc";
    case ConvVariant::Adfc: return "adfc";
    case ConvVariant::Dfc: return "dfc";
  }
  return "dfc";
}

inline ConvVariant conv_variant_from_string(const std::string& s) {
  if (s == "none") return ConvVariant::None;
  if (s == "ndc") return ConvVariant::Ndc;
  if (s == "ldfc") return ConvVariant::Ldfc;
  if (s == "rdfc") return ConvVariant::Rdfc;
  if (s == "adfc") return ConvVariant::Adfc;
  if (s == "dfc") return ConvVariant::Dfc;
  throw ConfigError("unknown conv variant '" + s + "'");
}

struct NetworkConfig {
  int64_t channels = 24;
  int feu_per_ffb = 2;
  int ffb_count = 2;
  int window = 4;
  int heads = 3;
  int scale = 2;
  ConvVariant conv_variant = ConvVariant::Dfc;
  bool qsm_enabled = true;
  int dfc_k = 5;
  double max_offset = 2.0;

  void validate() const {
    if (channels < 3 || channels % 3 != 0)
      throw ConfigError("channels must be a positive multiple of 3, got " +
                        std::to_string(channels));
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("channels " + std::to_string(channels) +
                        " not divisible by heads " + std::to_string(heads));
    if (scale != 2 && scale != 4 && scale != 8)
      throw ConfigError("scale must be 2, 4 or 8, got " +
                        std::to_string(scale));
    if (feu_per_ffb < 1 || ffb_count < 1)
      throw ConfigError("feu_per_ffb and ffb_count must be >= 1");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (dfc_k < 1 || dfc_k % 2 == 0)
      throw ConfigError("dfc_k must be odd and >= 1, got " +
                        std::to_string(dfc_k));
    if (max_offset < 0) throw ConfigError("max_offset must be >= 0");
  }

  int upsample_stages() const {
    return scale == 2 ? 1 : (scale == 4 ? 2 : 3);
  }
};

// Named parameter registry. Registration order is the canonical order for
// init, checkpoints and the census table.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name))
      throw Error("duplicate parameter name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }
  const Tensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const {
    return items_;
  }
  size_t size() const { return items_.size(); }

  int64_t total_elems() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() const {
    for (const auto& [name, t] : items_) t.impl()->grad.clear();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
std::string parameter_census(const ParamStore<T>& ps) {
  std::ostringstream os;
  for (const auto& [name, t] : ps.items())
    os << name << ' ' << shape_str(t.shape()) << ' ' << t.numel() << '\n';
  os << "total " << ps.total_elems() << '\n';
  return os.str();
}

namespace detail {

// PyTorch-style conv/linear default: U(+-1/sqrt(fan_in)) for both weight
// and bias.
template <typename T>
void fanin_init(Tensor<T>& w, Tensor<T>& b, int64_t fan_in, Rng& rng) {
  T bound = static_cast<T>(1.0 / std::sqrt(double(fan_in)));
  fill_uniform(w, rng, -bound, bound);
  if (b.defined()) fill_uniform(b, rng, -bound, bound);
}

}  // namespace detail

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int pad = 1;

  void build(ParamStore<T>& ps, const std::string& prefix, int64_t co,
             int64_t ci, int k) {
    w = ps.add(prefix + ".w", Tensor<T>::zeros({co, ci, k, k}, true));
    b = ps.add(prefix + ".b", Tensor<T>::zeros({co}, true));
    pad = k / 2;
  }
  void init(Rng& rng) {
    detail::fanin_init(w, b, w.dim(1) * w.dim(2) * w.dim(3), rng);
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, w, b, 1, pad);
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma, beta;
  T eps = static_cast<T>(1e-5);

  void build(ParamStore<T>& ps, const std::string& prefix, int64_t c) {
    gamma = ps.add(prefix + ".gamma", Tensor<T>::full({c}, T(1), true));
    beta = ps.add(prefix + ".beta", Tensor<T>::zeros({c}, true));
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return layernorm_channels(x, gamma, beta, eps);
  }
};

template <typename T>
struct QsmLayer {
  QuaternionConvWeights<T> w;

  void build(ParamStore<T>& ps, const std::string& prefix, int64_t c) {
    w = make_qconv_weights<T>(c / 3, c / 3, 3, /*bias=*/true);
    ps.add(prefix + ".wr", w.wr);
    ps.add(prefix + ".wx", w.wx);
    ps.add(prefix + ".wy", w.wy);
    ps.add(prefix + ".wz", w.wz);
    // br would bias the discarded real part only; it stays zero and is not
    // registered so the optimizer never sees a grad-less parameter.
    w.br = Tensor<T>();
    ps.add(prefix + ".bx", w.bx);
    ps.add(prefix + ".by", w.by);
    ps.add(prefix + ".bz", w.bz);
  }
  void init(Rng& rng) { quaternion_init(w, rng); }
  Tensor<T> forward(const Tensor<T>& x) const { return qsm(x, w, 1); }
};

// One feature extraction unit: shared pre-norm feeding a windowed attention
// branch and a conv branch, plus the identity skip.
template <typename T>
struct Feu {
  LayerNormLayer<T> ln;
  AttentionWeights<T> attn;
  int window = 4, shift = 0, heads = 3;
  ConvVariant variant = ConvVariant::Dfc;
  T max_offset = T(2);
  DfcWeights<T> dfc_w;           // Dfc
  DfcBranchWeights<T> branch_w;  // Ldfc / Rdfc / Adfc
  NdcWeights<T> ndc_w;           // Ndc

  void build(ParamStore<T>& ps, const std::string& prefix,
             const NetworkConfig& cfg, int shift_px) {
    const int64_t c = cfg.channels;
    window = cfg.window;
    shift = shift_px;
    heads = cfg.heads;
    variant = cfg.conv_variant;
    max_offset = static_cast<T>(cfg.max_offset);
    ln.build(ps, prefix + ".ln", c);
    attn.wq = ps.add(prefix + ".attn.wq", Tensor<T>::zeros({c, c}, true));
    attn.wk = ps.add(prefix + ".attn.wk", Tensor<T>::zeros({c, c}, true));
    attn.wv = ps.add(prefix + ".attn.wv", Tensor<T>::zeros({c, c}, true));
    attn.wo = ps.add(prefix + ".attn.wo", Tensor<T>::zeros({c, c}, true));
    attn.bq = ps.add(prefix + ".attn.bq", Tensor<T>::zeros({c}, true));
    attn.bk = ps.add(prefix + ".attn.bk", Tensor<T>::zeros({c}, true));
    attn.bv = ps.add(prefix + ".attn.bv", Tensor<T>::zeros({c}, true));
    attn.bo = ps.add(prefix + ".attn.bo", Tensor<T>::zeros({c}, true));
    switch (variant) {
      case ConvVariant::None:
        break;
      case ConvVariant::Ndc:
        ndc_w = make_ndc_weights<T>(c);
        ps.add(prefix + ".conv.pred_w", ndc_w.pred_w);
        ps.add(prefix + ".conv.pred_b", ndc_w.pred_b);
        ps.add(prefix + ".conv.w", ndc_w.w);
        break;
      case ConvVariant::Ldfc:
      case ConvVariant::Rdfc:
      case ConvVariant::Adfc:
        branch_w = make_dfc_branch_weights<T>(c, cfg.dfc_k);
        ps.add(prefix + ".conv.pred_w", branch_w.pred_w);
        ps.add(prefix + ".conv.pred_b", branch_w.pred_b);
        ps.add(prefix + ".conv.wh", branch_w.wh);
        ps.add(prefix + ".conv.wv", branch_w.wv);
        break;
      case ConvVariant::Dfc:
        dfc_w = make_dfc_weights<T>(c, cfg.dfc_k);
        ps.add(prefix + ".conv.left.pred_w", dfc_w.left.pred_w);
        ps.add(prefix + ".conv.left.pred_b", dfc_w.left.pred_b);
        ps.add(prefix + ".conv.left.wh", dfc_w.left.wh);
        ps.add(prefix + ".conv.left.wv", dfc_w.left.wv);
        ps.add(prefix + ".conv.right.pred_w", dfc_w.right.pred_w);
        ps.add(prefix + ".conv.right.pred_b", dfc_w.right.pred_b);
        ps.add(prefix + ".conv.right.wh", dfc_w.right.wh);
        ps.add(prefix + ".conv.right.wv", dfc_w.right.wv);
        ps.add(prefix + ".conv.fuse", dfc_w.fuse);
        break;
    }
  }

  void init(Rng& rng) {
    const int64_t c = attn.wq.dim(0);
    T bound = static_cast<T>(1.0 / std::sqrt(double(c)));
    for (Tensor<T>* t : {&attn.wq, &attn.wk, &attn.wv, &attn.wo})
      fill_uniform(*t, rng, -bound, bound);
    for (Tensor<T>* t : {&attn.bq, &attn.bk, &attn.bv, &attn.bo})
      fill_uniform(*t, rng, -bound, bound);
    switch (variant) {
      case ConvVariant::None: break;
      case ConvVariant::Ndc: ndc_init(ndc_w, rng); break;
      case ConvVariant::Ldfc:
      case ConvVariant::Rdfc:
      case ConvVariant::Adfc: dfc_branch_init(branch_w, rng); break;
      case ConvVariant::Dfc: dfc_init(dfc_w, rng); break;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> xn = ln.forward(x);
    Tensor<T> a = window_attention(xn, attn, window, shift, heads);
    Tensor<T> c;
    switch (variant) {
      case ConvVariant::None:
        return add(a, x);
      case ConvVariant::Ndc:
        c = ndc(xn, ndc_w);
        break;
      case ConvVariant::Ldfc:
        c = dfc_branch(xn, branch_w, BranchPattern::Left, max_offset);
        break;
      case ConvVariant::Rdfc:
        c = dfc_branch(xn, branch_w, BranchPattern::Right, max_offset);
        break;
      case ConvVariant::Adfc:
        c = dfc_branch(xn, branch_w, BranchPattern::Adaptive, max_offset);
        break;
      case ConvVariant::Dfc:
        c = dfc(xn, dfc_w, max_offset);
        break;
    }
    return add(add(a, c), x);
  }
};

// Flow feature block: a chain of units closed by the quaternion tail. The
// tail is the block's output (no block-level skip); disabling it makes the
// block the bare unit chain.
template <typename T>
struct Ffb {
  std::vector<Feu<T>> units;
  QsmLayer<T> tail;
  bool qsm_enabled = true;

  void build(ParamStore<T>& ps, const std::string& prefix,
             const NetworkConfig& cfg) {
    qsm_enabled = cfg.qsm_enabled;
    units.resize(cfg.feu_per_ffb);
    for (int i = 0; i < cfg.feu_per_ffb; ++i) {
      int shift_px = (i % 2 == 0) ? 0 : cfg.window / 2;
      units[i].build(ps, prefix + ".feu" + std::to_string(i), cfg, shift_px);
    }
    if (qsm_enabled) tail.build(ps, prefix + ".qsm", cfg.channels);
  }
  void init(Rng& rng) {
    for (auto& u : units) u.init(rng);
    if (qsm_enabled) tail.init(rng);
  }
  Tensor<T> forward(const Tensor<T>& z) const {
    Tensor<T> h = z;
    for (const auto& u : units) h = u.forward(h);
    return qsm_enabled ? tail.forward(h) : h;
  }
};

template <typename T>
class FisrNet {
 public:
  explicit FisrNet(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    shallow_.build(params_, "shallow", cfg_.channels, 3, 3);
    blocks_.resize(cfg_.ffb_count);
    for (int i = 0; i < cfg_.ffb_count; ++i)
      blocks_[i].build(params_, "ffb" + std::to_string(i), cfg_);
    if (cfg_.qsm_enabled) {
      trunk_qsm_.build(params_, "trunk_qsm", cfg_.channels);
      recon_qsm_.build(params_, "recon_qsm", cfg_.channels);
    }
    up_.resize(cfg_.upsample_stages());
    for (int i = 0; i < cfg_.upsample_stages(); ++i)
      up_[i].build(params_, "recon.up" + std::to_string(i),
                   4 * cfg_.channels, cfg_.channels, 3);
    final_.build(params_, "recon.final", 3, cfg_.channels, 3);
  }

  void init_weights(Rng& rng) {
    shallow_.init(rng);
    for (auto& b : blocks_) b.init(rng);
    if (cfg_.qsm_enabled) {
      trunk_qsm_.init(rng);
      recon_qsm_.init(rng);
    }
    for (auto& u : up_) u.init(rng);
    final_.init(rng);
  }

  // lr: [N,3,H,W] in [0,1]; returns [N,3,H*scale,W*scale].
  Tensor<T> forward(const Tensor<T>& lr) const {
    if (lr.rank() != 4 || lr.dim(1) != 3)
      throw ShapeError("forward: expects [N,3,H,W], got " +
                       shape_str(lr.shape()));
    if (lr.dim(2) % cfg_.window != 0 || lr.dim(3) % cfg_.window != 0)
      throw ShapeError("forward: H,W " + shape_str({lr.dim(2), lr.dim(3)}) +
                       " not divisible by window " +
                       std::to_string(cfg_.window));
    Tensor<T> f0 = shallow_.forward(lr);
    Tensor<T> f = f0;
    for (const auto& b : blocks_) f = b.forward(f);
    // Long residual keeps the shallow features in play.
    Tensor<T> fhat =
        cfg_.qsm_enabled ? add(trunk_qsm_.forward(f), f0) : add(f, f0);
    Tensor<T> r = cfg_.qsm_enabled ? recon_qsm_.forward(fhat) : fhat;
    for (const auto& u : up_) r = gelu(pixel_shuffle(u.forward(r), 2));
    return final_.forward(r);
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  ParamStore<T> params_;
  Conv2dLayer<T> shallow_;
  std::vector<Ffb<T>> blocks_;
  QsmLayer<T> trunk_qsm_, recon_qsm_;
  std::vector<Conv2dLayer<T>> up_;
  Conv2dLayer<T> final_;
};

}  // namespace fisr
