#pragma once

// Header+payload file convention shared by volumes, label maps, retrieval
// indexes and checkpoints:
//
//   #priorseg-raw 1\n
//   {"shape":[...],"dtype":"float32","byte_order":"little", ...}\n
//   <contiguous little-endian payload>
//
// The JSON line may carry extra keys (spacing_mm, tensor tables, configs).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorseg/core.hpp"

namespace priorseg {

static_assert(std::endian::native == std::endian::little,
              "payloads are written in host order and must be little-endian");

inline constexpr std::string_view kRawMagic = "#priorseg-raw 1";

template <class T>
constexpr std::string_view dtype_name();
template <>
constexpr std::string_view dtype_name<float>() { return "float32"; }
template <>
constexpr std::string_view dtype_name<double>() { return "float64"; }
template <>
constexpr std::string_view dtype_name<std::uint8_t>() { return "uint8"; }

struct RawFile {
  nlohmann::json header;
  std::vector<char> payload;

  template <class T>
  std::vector<T> values(std::size_t offset_elems, std::size_t count) const {
    if ((offset_elems + count) * sizeof(T) > payload.size())
      throw Error("raw payload too short: need " + std::to_string((offset_elems + count) * sizeof(T)) +
                  " bytes, have " + std::to_string(payload.size()));
    std::vector<T> out(count);
    std::memcpy(out.data(), payload.data() + offset_elems * sizeof(T), count * sizeof(T));
    return out;
  }
};

inline void write_raw(const std::filesystem::path& path, nlohmann::json header,
                      std::span<const char> payload) {
  header["byte_order"] = "little";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << kRawMagic << '\n' << header.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.flush();
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

template <class T>
std::span<const char> as_bytes_span(const std::vector<T>& v) {
  return {reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T)};
}

inline RawFile read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string magic;
  std::string header_line;
  if (!std::getline(in, magic) || magic != kRawMagic)
    throw Error("'" + path.string() + "' is not a priorseg raw file");
  if (!std::getline(in, header_line)) throw Error("'" + path.string() + "' has no header");
  RawFile f;
  try {
    f.header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt header in '" + path.string() + "': " + e.what());
  }
  if (f.header.value("byte_order", "") != "little")
    throw Error("'" + path.string() + "' has unsupported byte order");
  f.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return f;
}

/// Writes one 3D array with its spacing metadata.
template <class T>
void write_array(const std::filesystem::path& path, const Array3<T>& a,
                 const std::array<double, 3>& spacing) {
  nlohmann::json h;
  h["shape"] = {a.d0, a.d1, a.d2};
  h["spacing_mm"] = spacing;
  h["dtype"] = dtype_name<T>();
  write_raw(path, h, as_bytes_span(a.data));
}

template <class T>
Array3<T> read_array(const std::filesystem::path& path, std::array<double, 3>* spacing = nullptr) {
  RawFile f = read_raw(path);
  try {
    if (f.header.at("dtype").get<std::string>() != dtype_name<T>())
      throw Error("'" + path.string() + "' has dtype " + f.header.at("dtype").get<std::string>() +
                  ", expected " + std::string(dtype_name<T>()));
    auto shape = f.header.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw Error("'" + path.string() + "' is not a 3D array");
    Array3<T> a(shape[0], shape[1], shape[2]);
    if (f.payload.size() != a.size() * sizeof(T))
      throw Error("'" + path.string() + "' payload is " + std::to_string(f.payload.size()) +
                  " bytes, header implies " + std::to_string(a.size() * sizeof(T)));
    std::memcpy(a.data.data(), f.payload.data(), f.payload.size());
    if (spacing) *spacing = f.header.at("spacing_mm").get<std::array<double, 3>>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt header in '" + path.string() + "': " + e.what());
  }
}

}  // namespace priorseg
