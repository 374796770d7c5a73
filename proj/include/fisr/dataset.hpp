#pragma once

#include <cinttypes>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fisr/fld.hpp"
#include "fisr/image.hpp"
#include "fisr/synth.hpp"

// Dataset layout: <root>/<split>/<id>_hr.fld and <id>_lr<s>.fld pairs, plus
// <root>/<split>/manifest.txt with one "id seed H W s" record per line.

namespace fisr {

template <typename T>
struct FlowSample {
  Tensor<T> hr;  // [3,H,W] in [0,1]
  Tensor<T> lr;  // [3,H/s,W/s]
  int scale = 0;
  std::string id;
};

// s x s box-average pooling; accepts [C,H,W] or [N,C,H,W].
template <typename T>
Tensor<T> downsample(const Tensor<T>& hr, int s) {
  if (hr.rank() != 3 && hr.rank() != 4)
    throw ShapeError("downsample: need [C,H,W] or [N,C,H,W], got " +
                     shape_str(hr.shape()));
  const int64_t h = hr.dim(hr.rank() - 2), w = hr.dim(hr.rank() - 1);
  if (s <= 0 || h % s != 0 || w % s != 0)
    throw ShapeError("downsample: " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by " +
                     std::to_string(s));
  Shape out_shape = hr.shape();
  out_shape[hr.rank() - 2] = h / s;
  out_shape[hr.rank() - 1] = w / s;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const int64_t planes = hr.numel() / (h * w);
  const int64_t oh = h / s, ow = w / s;
  const T inv = T(1) / T(s * s);
  const T* src = hr.data();
  T* dst = out.data();
  for (int64_t pl = 0; pl < planes; ++pl) {
    const T* sp = src + pl * h * w;
    T* dp = dst + pl * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx)
            acc += sp[(oy * s + dy) * w + ox * s + dx];
        dp[oy * ow + ox] = acc * inv;
      }
  }
  return out;
}

struct DatasetSpec {
  std::string root;
  std::string split = "train";
  int count = 16;
  int64_t height = 128, width = 128;
  int scale = 2;
  uint64_t seed = 1;
  double spectrum_exponent = -5.0 / 3.0;
  bool multi_velocities = true;
  bool bicubic_degrade = false;  // default is box-average pooling
};

// Writes count HR/LR pairs; sample i uses seed spec.seed + i. Returns the
// generated ids. Files are f32.
inline std::vector<std::string> generate_dataset(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  if (spec.height % spec.scale != 0 || spec.width % spec.scale != 0)
    throw ConfigError("generate_dataset: size not divisible by scale");
  const std::string dir = spec.root + "/" + spec.split;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt", std::ios::trunc);
  if (!manifest)
    throw ConfigError("generate_dataset: cannot open manifest in " + dir);

  std::vector<std::string> ids;
  for (int i = 0; i < spec.count; ++i) {
    const uint64_t sample_seed = spec.seed + uint64_t(i);
    char id[32];
    std::snprintf(id, sizeof(id), "f%05d", i);
    Tensor<float> hr = gen_synthetic_field<float>(
        sample_seed, spec.height, spec.width, spec.spectrum_exponent,
        spec.multi_velocities);
    Tensor<float> lr =
        spec.bicubic_degrade
            ? bicubic_resize(hr, spec.height / spec.scale,
                             spec.width / spec.scale)
            : downsample(hr, spec.scale);
    fld_write(hr, dir + "/" + id + "_hr.fld");
    fld_write(lr, dir + "/" + id + "_lr" + std::to_string(spec.scale) +
                      ".fld");
    char rec[128];
    std::snprintf(rec, sizeof(rec), "%s %" PRIu64 " %lld %lld %d\n", id,
                  sample_seed, (long long)spec.height, (long long)spec.width,
                  spec.scale);
    manifest << rec;
    ids.emplace_back(id);
  }
  if (!manifest) throw ConfigError("generate_dataset: manifest write failed");
  return ids;
}

// Loads every manifest record matching the requested scale.
template <typename T>
std::vector<FlowSample<T>> load_dataset(const std::string& root,
                                        const std::string& split, int scale) {
  const std::string dir = root + "/" + split;
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest)
    throw ConfigError("load_dataset: cannot open manifest in " + dir);
  std::vector<FlowSample<T>> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    uint64_t seed;
    int64_t h, w;
    int s;
    if (!(ls >> id >> seed >> h >> w >> s))
      throw ConfigError("load_dataset: malformed manifest line: " + line);
    if (s != scale) continue;
    FlowSample<T> sample;
    sample.id = id;
    sample.scale = s;
    sample.hr = fld_read<T>(dir + "/" + id + "_hr.fld");
    sample.lr = fld_read<T>(dir + "/" + id + "_lr" + std::to_string(s) +
                            ".fld");
    if (sample.hr.rank() != 3 || sample.hr.dim(1) != h ||
        sample.hr.dim(2) != w)
      throw ConfigError("load_dataset: hr shape mismatch for " + id);
    if (sample.lr.rank() != 3 || sample.lr.dim(1) != h / s ||
        sample.lr.dim(2) != w / s)
      throw ConfigError("load_dataset: lr shape mismatch for " + id);
    out.push_back(std::move(sample));
  }
  if (out.empty())
    throw ConfigError("load_dataset: no samples at scale " +
                      std::to_string(scale) + " in " + dir);
  return out;
}

}  // namespace fisr
