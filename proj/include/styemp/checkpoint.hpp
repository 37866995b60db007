#pragma once

// Checkpoint container: one line of UTF-8 JSON manifest
//   {"format":"styemp-ckpt","version":1,"tensors":[{"name":..,"shape":[..],"dtype":"f32"|"f64"},..]}
// terminated by '\n', followed by the row-major little-endian buffers of
// every tensor, concatenated in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "styemp/error.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::string dtype;
  std::vector<double> values;  // widened; f32 values round-trip exactly
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {

template <typename U>
void write_le(std::ostream& os, U value) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits bits;
  std::memcpy(&bits, &value, sizeof(U));
  for (std::size_t b = 0; b < sizeof(U); ++b) os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <typename U>
U read_le(std::istream& is) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    const int c = is.get();
    if (c == EOF) throw SchemaError("checkpoint: truncated tensor buffer");
    bits |= static_cast<Bits>(static_cast<unsigned char>(c)) << (8 * b);
  }
  U value;
  std::memcpy(&value, &bits, sizeof(U));
  return value;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors) {
  nlohmann::json manifest;
  manifest["format"] = "styemp-ckpt";
  manifest["version"] = 1;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors)
    manifest["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"dtype", dtype_name<T>()}});
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os << manifest.dump() << '\n';
  for (const auto& nt : tensors)
    for (T v : nt.tensor.data()) detail::write_le(os, v);
  if (!os) throw Error("write failed for checkpoint " + path.string());
}

inline std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("checkpoint not found: " + path.string());
  std::string header;
  std::getline(is, header);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "styemp-ckpt") throw SchemaError("not a styemp checkpoint: " + path.string());
  std::vector<StoredTensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    StoredTensor st;
    st.name = entry.at("name").get<std::string>();
    st.shape = entry.at("shape").get<Shape>();
    st.dtype = entry.at("dtype").get<std::string>();
    const std::size_t n = shape_numel(st.shape);
    st.values.resize(n);
    if (st.dtype == "f32") {
      for (auto& v : st.values) v = detail::read_le<float>(is);
    } else if (st.dtype == "f64") {
      for (auto& v : st.values) v = detail::read_le<double>(is);
    } else {
      throw SchemaError("checkpoint: unsupported dtype '" + st.dtype + "' for " + st.name);
    }
    out.push_back(std::move(st));
  }
  return out;
}

/// Copies stored values into parameters by name; every parameter must be
/// present with a matching shape.
template <typename T>
void restore_params(std::vector<NamedTensor<T>>& params, const std::vector<StoredTensor>& stored) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& st : stored) by_name[st.name] = &st;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw SchemaError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape())
      throw ShapeError("checkpoint parameter '" + p.name + "' has shape " + shape_string(it->second->shape) +
                       ", model expects " + shape_string(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
}

}  // namespace styemp
