#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "fisr/dataset.hpp"
#include "fisr/fld.hpp"
#include "fisr/image.hpp"
#include "fisr/synth.hpp"

using namespace fisr;
using D = double;

// ---------------------------------------------------------------------------
// independent helpers

// Fresh scratch directory under the system temp root. Recreated on every
// call so stale files from an earlier run cannot leak into assertions.
static std::string scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / ("fisr_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

static std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

static void write_bytes(const std::string& path,
                        const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  REQUIRE(bool(out));
}

// Power spectrum by direct DFT summation, row pass then column pass. Slower
// than a transform library but shares no code with the generator.
static std::vector<double> dft_power(const std::vector<double>& f, int64_t h,
                                     int64_t w) {
  const double tau = 2.0 * std::acos(-1.0);
  std::vector<std::complex<double>> rows(size_t(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t kx = 0; kx < w; ++kx) {
      std::complex<double> acc{0.0, 0.0};
      for (int64_t x = 0; x < w; ++x) {
        const double ang = -tau * double(kx) * double(x) / double(w);
        acc += f[size_t(y * w + x)] *
               std::complex<double>(std::cos(ang), std::sin(ang));
      }
      rows[size_t(y * w + kx)] = acc;
    }
  std::vector<double> pw(size_t(h * w));
  for (int64_t kx = 0; kx < w; ++kx)
    for (int64_t ky = 0; ky < h; ++ky) {
      std::complex<double> acc{0.0, 0.0};
      for (int64_t y = 0; y < h; ++y) {
        const double ang = -tau * double(ky) * double(y) / double(h);
        acc += rows[size_t(y * w + kx)] *
               std::complex<double>(std::cos(ang), std::sin(ang));
      }
      pw[size_t(ky * w + kx)] = std::norm(acc);
    }
  return pw;
}

// Least-squares slope of log(mean power per radial bin) against log(k) over
// bins kmin..kmax. Frequencies are signed, so the radius wraps at h/2, w/2.
static double radial_log_slope(const std::vector<double>& pw, int64_t h,
                               int64_t w, int kmin, int kmax) {
  std::vector<double> sum(size_t(kmax + 1), 0.0);
  std::vector<int> cnt(size_t(kmax + 1), 0);
  for (int64_t ky = 0; ky < h; ++ky) {
    const double fy = ky <= h / 2 ? double(ky) : double(ky - h);
    for (int64_t kx = 0; kx < w; ++kx) {
      const double fx = kx <= w / 2 ? double(kx) : double(kx - w);
      const long bin = std::lround(std::sqrt(fy * fy + fx * fx));
      if (bin < kmin || bin > kmax) continue;
      sum[size_t(bin)] += pw[size_t(ky * w + kx)];
      cnt[size_t(bin)] += 1;
    }
  }
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int n = 0;
  for (int b = kmin; b <= kmax; ++b) {
    if (cnt[size_t(b)] == 0) continue;
    const double lx = std::log(double(b));
    const double ly = std::log(sum[size_t(b)] / double(cnt[size_t(b)]));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

// Per-bin power of a single realization is chi-squared noisy, so the slope
// is fitted on power averaged over several independent fields.
static double measured_slope(double exponent, int seeds) {
  const int64_t h = 64, w = 64;
  std::vector<double> acc(size_t(h * w), 0.0);
  for (int s = 1; s <= seeds; ++s) {
    Rng rng{uint64_t(s)};
    std::vector<double> f = gen_spectral_field(rng, h, w, exponent);
    std::vector<double> pw = dft_power(f, h, w);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += pw[i];
  }
  return radial_log_slope(acc, h, w, 4, 16);
}

static double raw_mean(const Tensor<D>& t) {
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i];
  return s / double(t.numel());
}

// ---------------------------------------------------------------------------
// spectral synthesis

TEST_CASE("spectral field: radial power spectrum follows the requested slope") {
  const double s53 = measured_slope(-5.0 / 3.0, 8);
  CHECK(std::fabs(s53 - (-5.0 / 3.0)) < 0.3);
  // A second exponent confirms the slope tracks the parameter rather than
  // landing near -5/3 by construction.
  const double s30 = measured_slope(-3.0, 8);
  CHECK(std::fabs(s30 - (-3.0)) < 0.3);
}

TEST_CASE("synthetic field: deterministic in the seed") {
  auto a = gen_synthetic_field<D>(42, 32, 32);
  auto b = gen_synthetic_field<D>(42, 32, 32);
  REQUIRE(a.shape() == Shape({3, 32, 32}));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);

  auto c = gen_synthetic_field<D>(43, 32, 32);
  double diff = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    diff = std::max(diff, std::fabs(a.data()[i] - c.data()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("synthetic field: every channel spans exactly [0,1]") {
  auto t = gen_synthetic_field<D>(7, 64, 32);
  const int64_t plane = 64 * 32;
  for (int c = 0; c < 3; ++c) {
    double lo = 2.0, hi = -1.0;
    for (int64_t i = 0; i < plane; ++i) {
      const double v = t.data()[c * plane + i];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(lo == 0.0);
    CHECK(hi == 1.0);
  }
}

TEST_CASE("synthetic field: single-velocity mode replicates channel 0") {
  auto one = gen_synthetic_field<D>(11, 32, 32, -5.0 / 3.0, false);
  const int64_t plane = 32 * 32;
  for (int c = 1; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      CHECK(one.data()[c * plane + i] == one.data()[i]);

  auto three = gen_synthetic_field<D>(11, 32, 32, -5.0 / 3.0, true);
  double diff = 0.0;
  for (int64_t i = 0; i < plane; ++i)
    diff = std::max(diff, std::fabs(three.data()[plane + i] - three.data()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("synthetic field: non-power-of-two sizes are rejected") {
  CHECK_THROWS_AS(gen_synthetic_field<D>(1, 48, 64), ConfigError);
  CHECK_THROWS_AS(gen_synthetic_field<D>(1, 64, 48), ConfigError);
  CHECK_THROWS_AS(gen_synthetic_field<D>(1, 0, 64), ConfigError);
}

// ---------------------------------------------------------------------------
// downsampling

TEST_CASE("downsample: constant image stays constant") {
  auto x = Tensor<D>::zeros({3, 8, 8});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 0.37;
  auto y = downsample(x, 2);
  REQUIRE(y.shape() == Shape({3, 4, 4}));
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(std::fabs(y.data()[i] - 0.37) < 1e-12);
}

TEST_CASE("downsample: 2x2 block {0,0,1,1} averages to 0.5") {
  auto x = Tensor<D>::from_vector({1, 2, 2}, {0.0, 0.0, 1.0, 1.0});
  auto y = downsample(x, 2);
  REQUIRE(y.shape() == Shape({1, 1, 1}));
  CHECK(y.data()[0] == 0.5);
}

TEST_CASE("downsample: box average preserves the mean") {
  Rng rng(5);
  auto x = Tensor<D>::uniform(rng, {3, 16, 16}, 0.0, 1.0);
  for (int s : {2, 4}) {
    auto y = downsample(x, s);
    CHECK(std::fabs(raw_mean(y) - raw_mean(x)) <= 1e-12);
  }
}

TEST_CASE("downsample: indivisible sizes and bad ranks are rejected") {
  CHECK_THROWS_AS(downsample(Tensor<D>::zeros({3, 15, 16}), 2), ShapeError);
  CHECK_THROWS_AS(downsample(Tensor<D>::zeros({3, 16, 15}), 2), ShapeError);
  CHECK_THROWS_AS(downsample(Tensor<D>::zeros({16, 16}), 2), ShapeError);
}

// ---------------------------------------------------------------------------
// FLD1 files

TEST_CASE("fld: f32 round trip is bit-exact") {
  const std::string dir = scratch_dir("fld_f32");
  Rng rng(1);
  auto t = Tensor<float>::uniform(rng, {3, 8, 8}, -2.0, 2.0);
  fld_write(t, dir + "/t.fld");
  auto r = fld_read<float>(dir + "/t.fld");
  REQUIRE(r.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(r.data()[i] == t.data()[i]);
}

TEST_CASE("fld: f64 round trip is bit-exact") {
  const std::string dir = scratch_dir("fld_f64");
  Rng rng(2);
  auto t = Tensor<double>::uniform(rng, {2, 3, 4, 5}, -10.0, 10.0);
  fld_write(t, dir + "/t.fld");
  auto r = fld_read<double>(dir + "/t.fld");
  REQUIRE(r.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(r.data()[i] == t.data()[i]);
}

TEST_CASE("fld: reads convert between scalar widths") {
  const std::string dir = scratch_dir("fld_mixed");
  Rng rng(3);
  auto f = Tensor<float>::uniform(rng, {4, 4}, -1.0, 1.0);
  fld_write(f, dir + "/f.fld");
  auto fd = fld_read<double>(dir + "/f.fld");
  REQUIRE(fd.shape() == f.shape());
  for (int64_t i = 0; i < f.numel(); ++i)
    CHECK(fd.data()[i] == double(f.data()[i]));

  // Multiples of 1/16 are exact in both widths, so this direction is also
  // an equality check rather than a tolerance check.
  auto d = Tensor<double>::zeros({5});
  for (int64_t i = 0; i < 5; ++i) d.data()[i] = double(i) / 16.0;
  fld_write(d, dir + "/d.fld");
  auto df = fld_read<float>(dir + "/d.fld");
  for (int64_t i = 0; i < 5; ++i) CHECK(double(df.data()[i]) == d.data()[i]);
}

TEST_CASE("fld: corrupt files raise distinct errors") {
  const std::string dir = scratch_dir("fld_corrupt");
  Rng rng(4);
  auto t = Tensor<float>::uniform(rng, {2, 3, 4}, -1.0, 1.0);
  fld_write(t, dir + "/good.fld");
  const std::vector<char> good = read_bytes(dir + "/good.fld");

  auto message_of = [](const std::string& path) {
    try {
      fld_read<float>(path);
    } catch (const FldError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };

  std::vector<char> magic = good;
  magic[0] = 'X';
  magic[1] = 'X';
  magic[2] = 'X';
  magic[3] = 'X';
  write_bytes(dir + "/magic.fld", magic);
  CHECK(message_of(dir + "/magic.fld").find("bad magic") != std::string::npos);

  std::vector<char> cut(good.begin(), good.end() - 10);
  write_bytes(dir + "/cut.fld", cut);
  CHECK(message_of(dir + "/cut.fld").find("truncated payload") !=
        std::string::npos);

  // A file that ends right after the magic is a header truncation, reported
  // with the same wording.
  write_bytes(dir + "/stub.fld", {'F', 'L', 'D', '1'});
  CHECK(message_of(dir + "/stub.fld").find("truncated payload") !=
        std::string::npos);

  // dtype byte sits after the magic, the rank byte, and rank u32 extents.
  std::vector<char> dt = good;
  dt[4 + 1 + 3 * 4] = 7;
  write_bytes(dir + "/dtype.fld", dt);
  CHECK(message_of(dir + "/dtype.fld").find("unknown dtype code 7") !=
        std::string::npos);
}

TEST_CASE("fld: write guards on rank and definedness") {
  const std::string dir = scratch_dir("fld_guards");
  auto r5 = Tensor<float>::zeros({1, 1, 1, 1, 2});
  try {
    fld_write(r5, dir + "/r5.fld");
    CHECK(false);
  } catch (const FldError& e) {
    CHECK(std::string(e.what()).find("exceeds 4") != std::string::npos);
  }
  Tensor<float> undef;
  CHECK_THROWS_AS(fld_write(undef, dir + "/u.fld"), FldError);
}

// ---------------------------------------------------------------------------
// PNG export

TEST_CASE("png: byte mapping and decode round trip") {
  const std::string dir = scratch_dir("png");
  const int64_t h = 4, w = 5;

  auto black = Tensor<D>::zeros({3, h, w});
  png_export(black, dir + "/black.png");
  int64_t rh = 0, rw = 0;
  auto bytes = png_read_rgb8(dir + "/black.png", rh, rw);
  REQUIRE(rh == h);
  REQUIRE(rw == w);
  REQUIRE(int64_t(bytes.size()) == 3 * h * w);
  for (uint8_t b : bytes) CHECK(int(b) == 0);

  auto white = Tensor<D>::zeros({3, h, w});
  for (int64_t i = 0; i < white.numel(); ++i) white.data()[i] = 1.0;
  png_export(white, dir + "/white.png");
  bytes = png_read_rgb8(dir + "/white.png", rh, rw);
  for (uint8_t b : bytes) CHECK(int(b) == 255);

  // v = byte / 255 followed by round(v * 255) recovers every byte value,
  // so a synthetic image built from bytes must decode to those bytes.
  Rng rng(9);
  auto t = Tensor<D>::zeros({3, h, w});
  std::vector<uint8_t> src(size_t(3 * h * w));
  for (auto& b : src) b = uint8_t(rng.index(256));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        t.data()[(c * h + y) * w + x] =
            double(src[size_t((y * w + x) * 3 + c)]) / 255.0;
  png_export(t, dir + "/rand.png");
  bytes = png_read_rgb8(dir + "/rand.png", rh, rw);
  REQUIRE(bytes.size() == src.size());
  for (size_t i = 0; i < src.size(); ++i) CHECK(bytes[i] == src[i]);

  // Half grey rounds away from zero.
  auto grey = Tensor<D>::zeros({3, 1, 1});
  for (int64_t i = 0; i < 3; ++i) grey.data()[i] = 0.5;
  png_export(grey, dir + "/grey.png");
  bytes = png_read_rgb8(dir + "/grey.png", rh, rw);
  for (uint8_t b : bytes) CHECK(int(b) == 128);
}

TEST_CASE("png: rejects out-of-range values and non-RGB shapes") {
  const std::string dir = scratch_dir("png_bad");
  auto hot = Tensor<D>::zeros({3, 2, 2});
  hot.data()[5] = 1.001;
  CHECK_THROWS_AS(png_export(hot, dir + "/hot.png"), ImageError);
  auto cold = Tensor<D>::zeros({3, 2, 2});
  cold.data()[0] = -0.001;
  CHECK_THROWS_AS(png_export(cold, dir + "/cold.png"), ImageError);
  CHECK_THROWS_AS(png_export(Tensor<D>::zeros({1, 4, 4}), dir + "/c1.png"),
                  ImageError);
  CHECK_THROWS_AS(png_export(Tensor<D>::zeros({4, 4}), dir + "/r2.png"),
                  ImageError);
}

// ---------------------------------------------------------------------------
// bicubic resampling

TEST_CASE("bicubic: same-size resample is the identity") {
  Rng rng(6);
  auto x = Tensor<D>::uniform(rng, {3, 8, 8}, 0.0, 1.0);
  auto y = bicubic_resize(x, 8, 8);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::fabs(y.data()[i] - x.data()[i]) <= 1e-12);
}

TEST_CASE("bicubic: constants survive up and down scaling") {
  auto x = Tensor<D>::zeros({3, 8, 8});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 0.37;
  for (auto [oh, ow] : {std::pair<int64_t, int64_t>{16, 16}, {4, 4}, {16, 4}}) {
    auto y = bicubic_resize(x, oh, ow);
    REQUIRE(y.shape() == Shape({3, oh, ow}));
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::fabs(y.data()[i] - 0.37) <= 1e-12);
  }
}

TEST_CASE("bicubic: doubling reproduces an affine ramp in the interior") {
  const int64_t in = 16, out = 32;
  auto x = Tensor<D>::zeros({1, in, in});
  for (int64_t y = 0; y < in; ++y)
    for (int64_t xx = 0; xx < in; ++xx)
      x.data()[y * in + xx] = 0.2 + 0.03 * double(xx) + 0.05 * double(y);
  auto up = bicubic_resize(x, out, out);
  // Half-pixel centers: output index i samples source coordinate
  // (i + 0.5) * in/out - 0.5. Edge rows are clamped, so only the interior
  // is checked.
  for (int64_t y = 4; y < out - 4; ++y)
    for (int64_t xx = 4; xx < out - 4; ++xx) {
      const double sx = (double(xx) + 0.5) * 0.5 - 0.5;
      const double sy = (double(y) + 0.5) * 0.5 - 0.5;
      const double want = 0.2 + 0.03 * sx + 0.05 * sy;
      CHECK(std::fabs(up.data()[y * out + xx] - want) <= 1e-10);
    }
}

// ---------------------------------------------------------------------------
// dataset generation

TEST_CASE("dataset: generate and load round trip") {
  DatasetSpec spec;
  spec.root = scratch_dir("ds_roundtrip");
  spec.split = "train";
  spec.count = 3;
  spec.height = 32;
  spec.width = 32;
  spec.scale = 2;
  spec.seed = 7;
  auto ids = generate_dataset(spec);
  REQUIRE(ids == std::vector<std::string>({"f00000", "f00001", "f00002"}));

  std::ifstream manifest(spec.root + "/train/manifest.txt");
  REQUIRE(bool(manifest));
  std::string line;
  std::getline(manifest, line);
  CHECK(line == "f00000 7 32 32 2");
  std::getline(manifest, line);
  CHECK(line == "f00001 8 32 32 2");

  auto samples = load_dataset<float>(spec.root, "train", 2);
  REQUIRE(samples.size() == 3);
  for (int i = 0; i < 3; ++i) {
    const auto& s = samples[size_t(i)];
    CHECK(s.id == ids[size_t(i)]);
    CHECK(s.scale == 2);
    REQUIRE(s.hr.shape() == Shape({3, 32, 32}));
    REQUIRE(s.lr.shape() == Shape({3, 16, 16}));
    // Sample i is drawn from seed spec.seed + i, and both files are f32, so
    // regeneration matches bit for bit.
    auto hr = gen_synthetic_field<float>(spec.seed + uint64_t(i), 32, 32);
    for (int64_t j = 0; j < hr.numel(); ++j)
      CHECK(s.hr.data()[j] == hr.data()[j]);
    auto lr = downsample(hr, 2);
    for (int64_t j = 0; j < lr.numel(); ++j)
      CHECK(s.lr.data()[j] == lr.data()[j]);
    for (int64_t j = 0; j < s.hr.numel(); ++j) {
      CHECK(s.hr.data()[j] >= 0.0f);
      CHECK(s.hr.data()[j] <= 1.0f);
    }
  }
}

TEST_CASE("dataset: scale filter and missing data are flagged") {
  DatasetSpec spec;
  spec.root = scratch_dir("ds_filter");
  spec.count = 1;
  spec.height = 16;
  spec.width = 16;
  spec.scale = 2;
  generate_dataset(spec);
  CHECK_THROWS_AS(load_dataset<float>(spec.root, "train", 4), ConfigError);
  CHECK_THROWS_AS(load_dataset<float>(spec.root, "test", 2), ConfigError);

  const std::string bad = scratch_dir("ds_badline");
  std::filesystem::create_directories(bad + "/train");
  std::ofstream(bad + "/train/manifest.txt") << "not a valid record\n";
  CHECK_THROWS_AS(load_dataset<float>(bad, "train", 2), ConfigError);

  DatasetSpec odd = spec;
  odd.root = scratch_dir("ds_odd");
  odd.height = 17;
  CHECK_THROWS_AS(generate_dataset(odd), ConfigError);
}

TEST_CASE("dataset: bicubic degradation flag switches the LR operator") {
  DatasetSpec spec;
  spec.root = scratch_dir("ds_bicubic");
  spec.count = 1;
  spec.height = 32;
  spec.width = 32;
  spec.scale = 2;
  spec.seed = 21;
  spec.bicubic_degrade = true;
  generate_dataset(spec);
  auto samples = load_dataset<float>(spec.root, "train", 2);
  REQUIRE(samples.size() == 1);
  auto hr = gen_synthetic_field<float>(21, 32, 32);
  auto cubic = bicubic_resize(hr, 16, 16);
  for (int64_t j = 0; j < cubic.numel(); ++j)
    CHECK(samples[0].lr.data()[j] == cubic.data()[j]);
  auto box = downsample(hr, 2);
  double diff = 0.0;
  for (int64_t j = 0; j < box.numel(); ++j)
    diff = std::max(diff, std::fabs(double(samples[0].lr.data()[j]) -
                                    double(box.data()[j])));
  CHECK(diff > 1e-6);
}

// ---------------------------------------------------------------------------
// tensor bundles

TEST_CASE("bundle: named tensors round trip in manifest order") {
  const std::string dir = scratch_dir("bundle");
  Rng rng(8);
  std::vector<std::pair<std::string, Tensor<float>>> ts;
  ts.emplace_back("alpha", Tensor<float>::uniform(rng, {2, 3}, -1.0, 1.0));
  ts.emplace_back("beta.w", Tensor<float>::uniform(rng, {4}, -1.0, 1.0));
  ts.emplace_back("gamma", Tensor<float>::uniform(rng, {1, 2, 2, 2}, -1.0, 1.0));
  save_tensor_bundle(dir, ts);

  REQUIRE(std::filesystem::exists(dir + "/p00000.fld"));
  REQUIRE(std::filesystem::exists(dir + "/p00002.fld"));
  std::ifstream manifest(dir + "/manifest.txt");
  std::string line;
  std::getline(manifest, line);
  CHECK(line == "alpha f32 2 3");

  auto back = load_tensor_bundle<float>(dir);
  REQUIRE(back.size() == ts.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].first == ts[i].first);
    REQUIRE(back[i].second.shape() == ts[i].second.shape());
    for (int64_t j = 0; j < ts[i].second.numel(); ++j)
      CHECK(back[i].second.data()[j] == ts[i].second.data()[j]);
  }
}
