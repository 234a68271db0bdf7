// JSON serialization of meshes and cameras.
#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dne/camera.hpp"
#include "dne/mesh.hpp"

namespace dne {

inline json mesh_to_json(const HandMesh& mesh) {
  json j;
  j["version"] = 1;
  json verts = json::array();
  for (const Vec3& v : mesh.vertices) verts.push_back({v.x, v.y, v.z});
  j["vertices"] = std::move(verts);
  json faces = json::array();
  for (const auto& f : mesh.faces) faces.push_back({f[0], f[1], f[2]});
  j["faces"] = std::move(faces);
  json groups = json::array();
  for (const auto& g : mesh.joint_groups) groups.push_back(g);
  j["joint_groups"] = std::move(groups);
  return j;
}

inline HandMesh mesh_from_json(const json& j) {
  if (j.value("version", 0) != 1) throw std::runtime_error("mesh: unsupported version");
  HandMesh mesh;
  for (const auto& v : j.at("vertices")) {
    if (v.size() != 3) throw std::runtime_error("mesh: vertex must have 3 coordinates");
    mesh.vertices.push_back({v[0].get<double>(), v[1].get<double>(), v[2].get<double>()});
  }
  for (const auto& f : j.at("faces")) {
    if (f.size() != 3) throw std::runtime_error("mesh: face must have 3 indices");
    mesh.faces.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
  }
  for (const auto& g : j.at("joint_groups")) mesh.joint_groups.push_back(g.get<std::vector<int>>());
  validate_mesh(mesh);
  return mesh;
}

inline json camera_to_json(const Camera& c) {
  return json{{"sx", c.sx}, {"sy", c.sy}, {"tx", c.tx}, {"ty", c.ty}};
}

inline Camera camera_from_json(const json& j) {
  return Camera{j.at("sx").get<double>(), j.at("sy").get<double>(), j.at("tx").get<double>(),
                j.at("ty").get<double>()};
}

inline void write_json_atomic(const std::filesystem::path& path, const json& j) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path.string());
    out << j.dump(1, '\t') << "\n";
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  json j;
  in >> j;
  return j;
}

}  // namespace dne
