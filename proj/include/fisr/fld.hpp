#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fisr/tensor.hpp"

// FLD1 container: magic "FLD1", u8 rank, rank x u32 little-endian extents,
// u8 dtype code (1 = f32, 2 = f64), then the raw little-endian scalars in
// row-major order. Readers and writers assume a little-endian host.

namespace fisr {

struct FldError : Error {
  explicit FldError(const std::string& m) : Error(m) {}
};

namespace detail {

inline constexpr uint8_t kFldDtypeF32 = 1;
inline constexpr uint8_t kFldDtypeF64 = 2;

template <typename T>
constexpr uint8_t fld_dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "FLD1 stores f32 or f64 scalars");
  return std::is_same_v<T, float> ? kFldDtypeF32 : kFldDtypeF64;
}

}  // namespace detail

template <typename T>
void fld_write(const Tensor<T>& t, const std::string& path) {
  if (!t.defined()) throw FldError("fld_write: undefined tensor");
  if (t.rank() > 4)
    throw FldError("fld_write: rank " + std::to_string(t.rank()) +
                   " exceeds 4");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FldError("fld_write: cannot open " + path);
  out.write("FLD1", 4);
  const uint8_t rank = static_cast<uint8_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (int64_t d = 0; d < t.rank(); ++d) {
    const uint32_t ext = static_cast<uint32_t>(t.dim(d));
    out.write(reinterpret_cast<const char*>(&ext), 4);
  }
  const uint8_t dtype = detail::fld_dtype_code<T>();
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!out) throw FldError("fld_write: write failed for " + path);
}

// Reads any FLD1 file and converts the payload to T. A matching stored
// dtype round-trips bit-exactly.
template <typename T>
Tensor<T> fld_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FldError("fld_read: cannot open " + path);

  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "FLD1", 4) != 0)
    throw FldError("fld_read: bad magic in " + path);

  uint8_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (in.gcount() != 1 || rank > 4)
    throw FldError("fld_read: truncated payload in " + path);

  Shape shape(rank);
  int64_t numel = 1;
  for (uint8_t d = 0; d < rank; ++d) {
    uint32_t ext = 0;
    in.read(reinterpret_cast<char*>(&ext), 4);
    if (in.gcount() != 4)
      throw FldError("fld_read: truncated payload in " + path);
    shape[d] = ext;
    numel *= ext;
  }

  uint8_t dtype = 0;
  in.read(reinterpret_cast<char*>(&dtype), 1);
  if (in.gcount() != 1)
    throw FldError("fld_read: truncated payload in " + path);
  if (dtype != detail::kFldDtypeF32 && dtype != detail::kFldDtypeF64)
    throw FldError("fld_read: unknown dtype code " + std::to_string(dtype) +
                   " in " + path);

  Tensor<T> t = Tensor<T>::zeros(shape);
  const size_t scalar = dtype == detail::kFldDtypeF32 ? 4 : 8;
  std::vector<char> raw(static_cast<size_t>(numel) * scalar);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(in.gcount()) != raw.size())
    throw FldError("fld_read: truncated payload in " + path);

  if (dtype == detail::fld_dtype_code<T>()) {
    std::memcpy(t.data(), raw.data(), raw.size());
  } else if (dtype == detail::kFldDtypeF32) {
    const float* src = reinterpret_cast<const float*>(raw.data());
    for (int64_t i = 0; i < numel; ++i) t.data()[i] = static_cast<T>(src[i]);
  } else {
    const double* src = reinterpret_cast<const double*>(raw.data());
    for (int64_t i = 0; i < numel; ++i) t.data()[i] = static_cast<T>(src[i]);
  }
  return t;
}

// Named-tensor bundle: <dir>/manifest.txt has one "name dtype extents..."
// line per tensor, and tensor i lives in <dir>/p<i:05>.fld. Order in the
// manifest is authoritative.
template <typename T>
void save_tensor_bundle(
    const std::string& dir,
    const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream manifest;
  int idx = 0;
  for (const auto& [name, t] : tensors) {
    char blob[16];
    std::snprintf(blob, sizeof(blob), "p%05d.fld", idx++);
    fld_write(t, dir + "/" + blob);
    manifest << name << ' '
             << (std::is_same_v<T, float> ? "f32" : "f64");
    for (int64_t d = 0; d < t.rank(); ++d) manifest << ' ' << t.dim(d);
    manifest << '\n';
  }
  std::ofstream out(dir + "/manifest.txt", std::ios::trunc);
  if (!out) throw FldError("save_tensor_bundle: cannot open manifest in " +
                           dir);
  out << manifest.str();
  if (!out) throw FldError("save_tensor_bundle: manifest write failed");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_tensor_bundle(
    const std::string& dir) {
  std::ifstream in(dir + "/manifest.txt");
  if (!in) throw FldError("load_tensor_bundle: cannot open manifest in " +
                          dir);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  std::string line;
  int idx = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, dtype;
    if (!(ls >> name >> dtype))
      throw FldError("load_tensor_bundle: malformed manifest line: " + line);
    Shape shape;
    int64_t ext;
    while (ls >> ext) shape.push_back(ext);
    char blob[16];
    std::snprintf(blob, sizeof(blob), "p%05d.fld", idx++);
    Tensor<T> t = fld_read<T>(dir + "/" + blob);
    if (t.shape() != shape)
      throw FldError("load_tensor_bundle: shape mismatch for " + name +
                     ": manifest " + shape_str(shape) + " vs blob " +
                     shape_str(t.shape()));
    out.emplace_back(name, std::move(t));
  }
  return out;
}

}  // namespace fisr
