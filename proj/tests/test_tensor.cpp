#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "fisr/gradcheck.hpp"
#include "fisr/ops.hpp"

using namespace fisr;
using D = double;

// ---------------------------------------------------------------------------
// independent oracles

// Six-nested-loop convolution, written without reference to conv2d.
static std::vector<D> conv_oracle(const std::vector<D>& x, int64_t n,
                                  int64_t ci, int64_t h, int64_t w,
                                  const std::vector<D>& ker, int64_t co,
                                  int64_t kh, int64_t kw,
                                  const std::vector<D>& bias, int stride,
                                  int pad) {
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<D> y(n * co * ho * wo, 0.0);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          D acc = bias.empty() ? 0.0 : bias[oc];
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t r = 0; r < kh; ++r)
              for (int64_t s = 0; s < kw; ++s) {
                int64_t ih = oh * stride - pad + r;
                int64_t iw = ow * stride - pad + s;
                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                acc += ker[((oc * ci + ic) * kh + r) * kw + s] *
                       x[((b * ci + ic) * h + ih) * w + iw];
              }
          y[((b * co + oc) * ho + oh) * wo + ow] = acc;
        }
  return y;
}

static Tensor<D> identity_matrix(int64_t c) {
  auto m = Tensor<D>::zeros({c, c});
  for (int64_t i = 0; i < c; ++i) m.data()[i * c + i] = 1.0;
  return m;
}

static D max_abs_diff(const Tensor<D>& a, const std::vector<D>& b) {
  REQUIRE(a.numel() == int64_t(b.size()));
  D m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------

TEST_CASE("conv2d all-ones 3x3 kernel, pad 1") {
  auto x = Tensor<D>::full({1, 1, 3, 3}, 1.0);
  auto w = Tensor<D>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, Tensor<D>(), 1, 1);
  // taps falling outside contribute zero: corners see 4 ones, edges 6
  const D expect[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]));
  CHECK(y.data()[4] == 9.0);
}

TEST_CASE("conv2d identity kernel reproduces input") {
  Rng rng(7);
  auto x = Tensor<D>::uniform(rng, {2, 3, 5, 4}, -1.0, 1.0);
  auto w = Tensor<D>::zeros({3, 3, 3, 3});
  for (int64_t c = 0; c < 3; ++c) w.data()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  auto y = conv2d(x, w, Tensor<D>(), 1, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the six-loop oracle") {
  Rng rng(11);
  auto x = Tensor<D>::uniform(rng, {1, 2, 5, 5}, -1.0, 1.0);
  auto w = Tensor<D>::uniform(rng, {3, 2, 3, 3}, -1.0, 1.0);
  auto b = Tensor<D>::uniform(rng, {3}, -1.0, 1.0);
  auto y = conv2d(x, w, b, 1, 1);
  auto ref = conv_oracle({x.data(), x.data() + x.numel()}, 1, 2, 5, 5,
                         {w.data(), w.data() + w.numel()}, 3, 3, 3,
                         {b.data(), b.data() + b.numel()}, 1, 1);
  CHECK(max_abs_diff(y, ref) <= 1e-12);
}

TEST_CASE("conv2d stride 2 matches the oracle") {
  Rng rng(13);
  auto x = Tensor<D>::uniform(rng, {2, 2, 6, 6}, -1.0, 1.0);
  auto w = Tensor<D>::uniform(rng, {4, 2, 3, 3}, -1.0, 1.0);
  auto y = conv2d(x, w, Tensor<D>(), 2, 1);
  auto ref = conv_oracle({x.data(), x.data() + x.numel()}, 2, 2, 6, 6,
                         {w.data(), w.data() + w.numel()}, 4, 3, 3, {}, 2, 1);
  CHECK(y.dim(2) == 3);
  CHECK(y.dim(3) == 3);
  CHECK(max_abs_diff(y, ref) <= 1e-12);
}

TEST_CASE("conv2d rejects channel mismatch") {
  auto x = Tensor<D>::zeros({1, 2, 4, 4});
  auto w = Tensor<D>::zeros({3, 5, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, Tensor<D>(), 1, 1), ShapeError);
}

TEST_CASE("layernorm constant input returns beta") {
  auto x = Tensor<D>::full({1, 4, 2, 2}, 3.7);
  auto gamma = Tensor<D>::full({4}, 2.0);
  auto beta = Tensor<D>::from_vector({4}, {0.1, 0.2, 0.3, 0.4});
  auto y = layernorm_channels(x, gamma, beta, 1e-5);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t p = 0; p < 4; ++p)
      CHECK(y.data()[c * 4 + p] == doctest::Approx(beta.data()[c]));
}

TEST_CASE("layernorm maps channel pair {1,3} to {-1,+1}") {
  auto x = Tensor<D>::from_vector({1, 2, 1, 1}, {1.0, 3.0});
  auto gamma = Tensor<D>::full({2}, 1.0);
  auto beta = Tensor<D>::zeros({2});
  auto y = layernorm_channels(x, gamma, beta, 1e-12);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("layernorm rejects gamma length mismatch") {
  auto x = Tensor<D>::zeros({1, 4, 2, 2});
  CHECK_THROWS_AS(
      layernorm_channels(x, Tensor<D>::zeros({3}), Tensor<D>::zeros({4}), 1e-5),
      ShapeError);
}

TEST_CASE("uniform attention averages the window") {
  Rng rng(17);
  const int64_t c = 4;
  auto x = Tensor<D>::uniform(rng, {1, c, 4, 4}, -1.0, 1.0);
  AttentionWeights<D> aw;
  aw.wq = Tensor<D>::zeros({c, c});
  aw.wk = Tensor<D>::zeros({c, c});
  aw.wv = identity_matrix(c);
  aw.wo = identity_matrix(c);
  aw.bq = Tensor<D>::zeros({c});
  aw.bk = Tensor<D>::zeros({c});
  aw.bv = Tensor<D>::zeros({c});
  aw.bo = Tensor<D>::zeros({c});
  // window covers the whole image, zero scores -> uniform softmax -> mean
  auto y = window_attention(x, aw, 4, 0, 1);
  for (int64_t ch = 0; ch < c; ++ch) {
    D m = 0;
    for (int64_t p = 0; p < 16; ++p) m += x.data()[ch * 16 + p];
    m /= 16.0;
    for (int64_t p = 0; p < 16; ++p)
      CHECK(y.data()[ch * 16 + p] == doctest::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("window attention is window-local at shift 0") {
  Rng rng(19);
  const int64_t c = 2, hw = 8;
  const int win = 4;
  auto x = Tensor<D>::uniform(rng, {1, c, hw, hw}, -1.0, 1.0);
  AttentionWeights<D> aw;
  aw.wq = Tensor<D>::uniform(rng, {c, c}, -1.0, 1.0);
  aw.wk = Tensor<D>::uniform(rng, {c, c}, -1.0, 1.0);
  aw.wv = Tensor<D>::uniform(rng, {c, c}, -1.0, 1.0);
  aw.wo = Tensor<D>::uniform(rng, {c, c}, -1.0, 1.0);
  aw.bq = Tensor<D>::uniform(rng, {c}, -1.0, 1.0);
  aw.bk = Tensor<D>::uniform(rng, {c}, -1.0, 1.0);
  aw.bv = Tensor<D>::uniform(rng, {c}, -1.0, 1.0);
  aw.bo = Tensor<D>::uniform(rng, {c}, -1.0, 1.0);

  // swap the top-left and bottom-right windows of the input
  auto swap_windows = [&](const Tensor<D>& t) {
    Tensor<D> s = Tensor<D>::from_vector(
        t.shape(), {t.data(), t.data() + t.numel()});
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t r = 0; r < win; ++r)
        for (int64_t q = 0; q < win; ++q) {
          int64_t a = (ch * hw + r) * hw + q;
          int64_t b = (ch * hw + r + win) * hw + q + win;
          std::swap(s.data()[a], s.data()[b]);
        }
    return s;
  };

  auto y = window_attention(x, aw, win, 0, 1);
  auto y_swapped = window_attention(swap_windows(x), aw, win, 0, 1);
  auto expect = swap_windows(y);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y_swapped.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("window attention rejects indivisible sizes") {
  auto x = Tensor<D>::zeros({1, 4, 6, 6});
  AttentionWeights<D> aw;
  aw.wq = aw.wk = aw.wv = aw.wo = Tensor<D>::zeros({4, 4});
  aw.bq = aw.bk = aw.bv = aw.bo = Tensor<D>::zeros({4});
  CHECK_THROWS_AS(window_attention(x, aw, 4, 0, 1), ShapeError);
  CHECK_THROWS_AS(window_attention(Tensor<D>::zeros({1, 3, 4, 4}), aw, 4, 0, 2),
                  ShapeError);
}

TEST_CASE("pixel_shuffle definitional 2x2 case") {
  auto x = Tensor<D>::from_vector({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  auto y = pixel_shuffle(x, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 2.0);
  CHECK(y.data()[2] == 3.0);
  CHECK(y.data()[3] == 4.0);
}

TEST_CASE("pixel_shuffle r=1 is the identity") {
  Rng rng(23);
  auto x = Tensor<D>::uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
  auto y = pixel_shuffle(x, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("pixel_shuffle round-trip is bit-exact") {
  Rng rng(29);
  auto x = Tensor<D>::uniform(rng, {2, 8, 3, 3}, -1.0, 1.0);
  auto y = pixel_unshuffle(pixel_shuffle(x, 2), 2);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(pixel_shuffle(Tensor<D>::zeros({1, 6, 2, 2}), 2), ShapeError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  auto x = Tensor<D>::from_vector({2, 2}, {1.0, -2.0, 3.0, 0.5}, true);
  sum(x).backward();
  for (D g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) gives 2x") {
  Rng rng(31);
  auto x = Tensor<D>::uniform(rng, {3, 4}, -1.0, 1.0, true);
  sum(mul(x, x)).backward();
  auto g = x.grad();
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(g[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-12));
}

TEST_CASE("diamond graph accumulates both paths") {
  auto x = Tensor<D>::from_vector({2}, {0.3, -0.7}, true);
  auto y = Tensor<D>::from_vector({2}, {1.5, 0.25}, true);
  // z = sum(x*y + x): dz/dx = y + 1, dz/dy = x
  sum(add(mul(x, y), x)).backward();
  auto gx = x.grad();
  auto gy = y.grad();
  for (int i = 0; i < 2; ++i) {
    CHECK(gx[i] == doctest::Approx(y.data()[i] + 1.0).epsilon(1e-12));
    CHECK(gy[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward rejects non-scalar roots and accumulates across calls") {
  auto x = Tensor<D>::from_vector({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(add(x, x).backward(), ShapeError);
  sum(x).backward();
  sum(x).backward();
  for (D g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("gradcheck: conv2d, layernorm, composite chain") {
  Rng rng(37);
  auto x = Tensor<D>::uniform(rng, {1, 2, 5, 5}, -1.0, 1.0, true);
  auto w = Tensor<D>::uniform(rng, {3, 2, 3, 3}, -1.0, 1.0, true);
  auto b = Tensor<D>::uniform(rng, {3}, -1.0, 1.0, true);
  auto r1 = grad_check(
      "conv2d", projected_loss([=]() { return conv2d(x, w, b, 1, 1); }),
      {x, w, b}, {1e-4});
  CHECK_MESSAGE(r1.ok, r1.name, " max_rel=", r1.max_rel_err);

  auto gamma = Tensor<D>::uniform(rng, {2}, 0.5, 1.5, true);
  auto beta = Tensor<D>::uniform(rng, {2}, -0.5, 0.5, true);
  auto r2 = grad_check(
      "layernorm",
      projected_loss(
          [=]() { return layernorm_channels(x, gamma, beta, 1e-5); }),
      {x, gamma, beta}, {1e-4});
  CHECK_MESSAGE(r2.ok, r2.name, " max_rel=", r2.max_rel_err);

  auto gamma3 = Tensor<D>::uniform(rng, {3}, 0.5, 1.5, true);
  auto beta3 = Tensor<D>::uniform(rng, {3}, -0.5, 0.5, true);
  auto r3 = grad_check(
      "conv-ln-sum",
      [=]() {
        return sum(layernorm_channels(conv2d(x, w, b, 1, 1), gamma3, beta3,
                                      1e-5));
      },
      {x, w, b, gamma3, beta3}, {1e-4});
  CHECK_MESSAGE(r3.ok, r3.name, " max_rel=", r3.max_rel_err);
}

TEST_CASE("gradcheck: window attention micro case") {
  Rng rng(41);
  const int64_t c = 4;
  auto x = Tensor<D>::uniform(rng, {1, c, 4, 4}, -1.0, 1.0, true);
  AttentionWeights<D> aw;
  aw.wq = Tensor<D>::uniform(rng, {c, c}, -0.5, 0.5, true);
  aw.wk = Tensor<D>::uniform(rng, {c, c}, -0.5, 0.5, true);
  aw.wv = Tensor<D>::uniform(rng, {c, c}, -0.5, 0.5, true);
  aw.wo = Tensor<D>::uniform(rng, {c, c}, -0.5, 0.5, true);
  aw.bq = Tensor<D>::uniform(rng, {c}, -0.5, 0.5, true);
  aw.bk = Tensor<D>::uniform(rng, {c}, -0.5, 0.5, true);
  aw.bv = Tensor<D>::uniform(rng, {c}, -0.5, 0.5, true);
  aw.bo = Tensor<D>::uniform(rng, {c}, -0.5, 0.5, true);
  auto r = grad_check(
      "window_attention",
      projected_loss([=]() { return window_attention(x, aw, 2, 0, 2); }),
      {x, aw.wq, aw.wk, aw.wv, aw.wo, aw.bq, aw.bk, aw.bv, aw.bo}, {1e-4});
  CHECK_MESSAGE(r.ok, r.name, " max_rel=", r.max_rel_err);
}

TEST_CASE("gradcheck holds across five seeds") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = Tensor<D>::uniform(rng, {1, 2, 4, 4}, -1.0, 1.0, true);
    auto w = Tensor<D>::uniform(rng, {2, 2, 3, 3}, -1.0, 1.0, true);
    auto r = grad_check(
        "conv2d-seed",
        projected_loss([=]() { return conv2d(x, w, Tensor<D>(), 1, 1); },
                       seed * 101),
        {x, w}, {1e-4});
    CHECK_MESSAGE(r.ok, "seed ", seed, " max_rel=", r.max_rel_err);
  }
}

TEST_CASE("primitive ops round out the gradient suite") {
  Rng rng(43);
  auto a = Tensor<D>::uniform(rng, {3, 4}, -1.0, 1.0, true);
  auto b = Tensor<D>::uniform(rng, {4, 5}, -1.0, 1.0, true);
  auto r1 = grad_check("matmul",
                       projected_loss([=]() { return matmul(a, b); }), {a, b},
                       {1e-4});
  CHECK_MESSAGE(r1.ok, r1.name, " max_rel=", r1.max_rel_err);

  auto s = Tensor<D>::uniform(rng, {2, 6}, -2.0, 2.0, true);
  auto r2 = grad_check("softmax",
                       projected_loss([=]() { return softmax_lastdim(s); }),
                       {s}, {1e-4});
  CHECK_MESSAGE(r2.ok, r2.name, " max_rel=", r2.max_rel_err);

  auto r3 = grad_check("gelu", projected_loss([=]() { return gelu(s); }), {s},
                       {1e-6});
  CHECK_MESSAGE(r3.ok, r3.name, " max_rel=", r3.max_rel_err);

  auto c1 = Tensor<D>::uniform(rng, {1, 2, 3, 3}, -1.0, 1.0, true);
  auto c2 = Tensor<D>::uniform(rng, {1, 3, 3, 3}, -1.0, 1.0, true);
  auto r4 = grad_check(
      "concat-slice",
      projected_loss(
          [=]() {
            return slice_channels(concat_channels<D>({c1, c2}), 1, 4);
          }),
      {c1, c2}, {1e-4});
  CHECK_MESSAGE(r4.ok, r4.name, " max_rel=", r4.max_rel_err);
}
