// DNEPACK container: 8-byte magic "DNEPACK1", 4-byte little-endian header
// length, JSON header, then raw row-major 32-bit little-endian floats.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dne/feature_grid.hpp"

namespace dne {

using json = nlohmann::json;

inline constexpr char kDnepackMagic[8] = {'D', 'N', 'E', 'P', 'A', 'C', 'K', '1'};

namespace pack_detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("dnepack: cannot open for write: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("dnepack: write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string pack(const json& header, const std::vector<float>& payload) {
  const std::string hdr = header.dump();
  if (hdr.size() > 0xffffffffull) throw std::runtime_error("dnepack: header too large");
  std::string bytes;
  bytes.reserve(8 + 4 + hdr.size() + payload.size() * 4);
  bytes.append(kDnepackMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(hdr.size());
  char lenb[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                  static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
  bytes.append(lenb, 4);
  bytes.append(hdr);
  // Little-endian floats; this targets little-endian hosts.
  bytes.append(reinterpret_cast<const char*>(payload.data()), payload.size() * 4);
  return bytes;
}

struct Unpacked {
  json header;
  std::vector<float> payload;
};

inline Unpacked unpack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("dnepack: cannot open: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDnepackMagic, 8) != 0)
    throw std::runtime_error("dnepack: bad magic in " + path.string());
  char lenb[4];
  in.read(lenb, 4);
  if (!in) throw std::runtime_error("dnepack: truncated header length");
  const std::uint32_t len = static_cast<std::uint8_t>(lenb[0]) |
                            (static_cast<std::uint8_t>(lenb[1]) << 8) |
                            (static_cast<std::uint8_t>(lenb[2]) << 16) |
                            (static_cast<std::uint8_t>(lenb[3]) << 24);
  std::string hdr(len, '\0');
  in.read(hdr.data(), len);
  if (!in) throw std::runtime_error("dnepack: truncated header");
  Unpacked u;
  u.header = json::parse(hdr);
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() % 4 != 0) throw std::runtime_error("dnepack: payload not float-aligned");
  u.payload.resize(rest.size() / 4);
  std::memcpy(u.payload.data(), rest.data(), rest.size());
  return u;
}

}  // namespace pack_detail

inline void write_feature_grid(const std::filesystem::path& path, const FeatureGrid& grid) {
  json header = {{"shape", {grid.height(), grid.width(), grid.channels()}},
                 {"dtype", "f32le"},
                 {"kind", "feature_grid"}};
  std::vector<float> payload(grid.values().size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    payload[i] = static_cast<float>(grid.values()[i]);
  pack_detail::write_file_atomic(path, pack_detail::pack(header, payload));
}

inline FeatureGrid read_feature_grid(const std::filesystem::path& path) {
  auto u = pack_detail::unpack(path);
  if (u.header.value("kind", "") != "feature_grid")
    throw std::runtime_error("dnepack: not a feature_grid: " + path.string());
  const auto shape = u.header.at("shape");
  if (shape.size() != 3) throw std::runtime_error("dnepack: feature_grid shape must be rank 3");
  const int h = shape[0], w = shape[1], c = shape[2];
  FeatureGrid grid(h, w, c);
  if (u.payload.size() != grid.values().size())
    throw std::runtime_error("dnepack: payload size mismatch in " + path.string());
  for (std::size_t i = 0; i < u.payload.size(); ++i)
    grid.values()[i] = static_cast<double>(u.payload[i]);
  return grid;
}

// Checkpoint container: named tensors with shapes, plus an arbitrary JSON
// config blob carried in the header.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

inline void write_checkpoint(const std::filesystem::path& path,
                             const std::vector<NamedTensor>& tensors, const json& config) {
  json tensor_list = json::array();
  std::vector<float> payload;
  for (const auto& t : tensors) {
    std::size_t count = 1;
    for (int d : t.shape) count *= static_cast<std::size_t>(d);
    if (count != t.values.size())
      throw std::runtime_error("dnepack: tensor shape/value mismatch: " + t.name);
    tensor_list.push_back({{"name", t.name}, {"shape", t.shape}});
    for (double v : t.values) payload.push_back(static_cast<float>(v));
  }
  json header = {{"kind", "checkpoint"},
                 {"dtype", "f32le"},
                 {"config", config},
                 {"tensors", tensor_list}};
  pack_detail::write_file_atomic(path, pack_detail::pack(header, payload));
}

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  json config;

  const NamedTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("dnepack: checkpoint tensor missing: " + name);
  }
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto u = pack_detail::unpack(path);
  if (u.header.value("kind", "") != "checkpoint")
    throw std::runtime_error("dnepack: not a checkpoint: " + path.string());
  Checkpoint ck;
  ck.config = u.header.value("config", json::object());
  std::size_t offset = 0;
  for (const auto& entry : u.header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<int>>();
    std::size_t count = 1;
    for (int d : t.shape) count *= static_cast<std::size_t>(d);
    if (offset + count > u.payload.size())
      throw std::runtime_error("dnepack: checkpoint payload truncated");
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      t.values[i] = static_cast<double>(u.payload[offset + i]);
    offset += count;
    ck.tensors.push_back(std::move(t));
  }
  if (offset != u.payload.size())
    throw std::runtime_error("dnepack: checkpoint payload has trailing data");
  return ck;
}

}  // namespace dne
