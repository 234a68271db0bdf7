// On-disk dataset layout: one subdirectory per instance holding
// gt_mesh.json, coarse_mesh.json, camera.json and features.dnepack, plus a
// top-level manifest.json with the per-instance seeds.
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dne/dnepack.hpp"
#include "dne/io.hpp"
#include "dne/parallel.hpp"
#include "dne/synthetic.hpp"

namespace dne {

inline std::string instance_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "inst_%05d", index);
  return buf;
}

inline void write_instance(const std::filesystem::path& dir, const SyntheticInstance& inst) {
  std::filesystem::create_directories(dir);
  write_json_atomic(dir / "gt_mesh.json", mesh_to_json(inst.gt_mesh));
  write_json_atomic(dir / "coarse_mesh.json", mesh_to_json(inst.coarse_mesh));
  write_json_atomic(dir / "camera.json", json{{"gt", camera_to_json(inst.gt_camera)},
                                              {"coarse", camera_to_json(inst.coarse_camera)}});
  write_feature_grid(dir / "features.dnepack", inst.grid);
}

inline SyntheticInstance read_instance(const std::filesystem::path& dir) {
  SyntheticInstance inst;
  inst.gt_mesh = mesh_from_json(read_json(dir / "gt_mesh.json"));
  inst.coarse_mesh = mesh_from_json(read_json(dir / "coarse_mesh.json"));
  const json cams = read_json(dir / "camera.json");
  inst.gt_camera = camera_from_json(cams.at("gt"));
  inst.coarse_camera = camera_from_json(cams.at("coarse"));
  inst.grid = read_feature_grid(dir / "features.dnepack");
  return inst;
}

struct DatasetStats {
  double mean_coarse_mpvpe = 0.0;
};

// Generates `count` instances under `out_dir` and writes manifest.json.
inline DatasetStats write_dataset(const std::filesystem::path& out_dir, int count,
                                  std::uint64_t seed, double corruption,
                                  const PipelineConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  const CounterRng rng(seed);
  std::vector<std::uint64_t> seeds(count);
  for (int i = 0; i < count; ++i) seeds[i] = rng.bits(0xd5u, i);
  std::vector<double> coarse_err(count, 0.0);
  parallel_for(count, [&](int i) {
    const SyntheticInstance inst = make_synthetic_instance(seeds[i], cfg, corruption);
    write_instance(out_dir / instance_dir_name(i), inst);
    coarse_err[i] = mpvpe(inst.coarse_mesh, inst.gt_mesh);
  });
  double mean_err = 0.0;
  for (double e : coarse_err) mean_err += e;
  mean_err = count > 0 ? mean_err / count : 0.0;

  json manifest;
  manifest["version"] = 1;
  manifest["count"] = count;
  manifest["seed"] = seed;
  manifest["corruption"] = corruption;
  manifest["mean_coarse_mpvpe"] = mean_err;
  json entries = json::array();
  for (int i = 0; i < count; ++i)
    entries.push_back({{"dir", instance_dir_name(i)}, {"seed", seeds[i]}});
  manifest["instances"] = std::move(entries);
  write_json_atomic(out_dir / "manifest.json", manifest);
  return DatasetStats{mean_err};
}

// Loads every instance listed in manifest.json, in manifest order.
inline std::vector<SyntheticInstance> load_dataset(const std::filesystem::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  const auto& entries = manifest.at("instances");
  std::vector<SyntheticInstance> out(entries.size());
  parallel_for(static_cast<int>(entries.size()), [&](int i) {
    out[i] = read_instance(dir / entries[i].at("dir").get<std::string>());
    out[i].seed = entries[i].value("seed", 0ull);
  });
  return out;
}

}  // namespace dne
