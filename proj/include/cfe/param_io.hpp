#pragma once

// Parameter block files: a raw little-endian float64 array plus a JSON
// manifest listing (name, rows, cols, offset) per block.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "cfe/error.hpp"
#include "cfe/neural.hpp"

namespace cfe::io {

using nlohmann::json;

inline void write_f64_le(std::ostream& os, std::span<const double> v) {
  std::vector<unsigned char> buf(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error("failed writing parameter data");
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t n) {
  std::vector<unsigned char> buf(n * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw IngestionError("parameter data file is truncated");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

inline json manifest_to_json(const nn::Manifest& m) {
  json a = json::array();
  for (const auto& b : m) a.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}, {"offset", b.offset}});
  return a;
}

inline nn::Manifest manifest_from_json(const json& a) {
  if (!a.is_array()) throw IngestionError("manifest must be a JSON array");
  nn::Manifest m;
  for (const auto& e : a)
    m.push_back({e.at("name").get<std::string>(), e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>(),
                 e.at("offset").get<std::size_t>()});
  return m;
}

inline std::ofstream open_out(const std::filesystem::path& p, bool binary = false) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
  if (!os) throw Error("cannot open " + p.string() + " for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p, bool binary = false) {
  std::ifstream is(p, binary ? std::ios::binary : std::ios::in);
  if (!is) throw IngestionError("cannot open " + p.string());
  return is;
}

// <stem>.json + <stem>.bin
inline void save_param_vector(const std::filesystem::path& stem, const nn::ParamVector& p) {
  p.validate();
  auto js = open_out(stem.string() + ".json");
  js << json{{"blocks", manifest_to_json(p.manifest)}, {"length", p.size()}}.dump(2) << '\n';
  auto bin = open_out(stem.string() + ".bin", true);
  write_f64_le(bin, p.values);
}

inline nn::ParamVector load_param_vector(const std::filesystem::path& stem) {
  auto js = open_in(stem.string() + ".json");
  const auto doc = json::parse(js);
  nn::ParamVector p;
  p.manifest = manifest_from_json(doc.at("blocks"));
  auto bin = open_in(stem.string() + ".bin", true);
  p.values = read_f64_le(bin, nn::manifest_size(p.manifest));
  p.validate();
  return p;
}

}  // namespace cfe::io
