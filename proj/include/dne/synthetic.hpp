// Synthetic benchmark instances: a posed template, a ground-truth camera,
// and a corrupted coarse fit standing in for a parametric baseline model.
#pragma once

#include <cstdint>
#include <vector>

#include "dne/camera.hpp"
#include "dne/mesh.hpp"
#include "dne/pipeline.hpp"
#include "dne/rng.hpp"
#include "dne/synth.hpp"

namespace dne {

struct SyntheticInstance {
  HandMesh gt_mesh;
  Camera gt_camera;
  HandMesh coarse_mesh;
  Camera coarse_camera;
  FeatureGrid grid;
  std::uint64_t seed = 0;
};

// Coarse corruption: one rigid 3D offset per joint-group region (ungrouped
// palm vertices follow the wrist region), a global translation, and
// multiplicative scale / additive translation noise on the camera. The
// feature grid is synthesized against the ground-truth camera, the way an
// image encoder would only ever see the true hand.
inline SyntheticInstance make_synthetic_instance(std::uint64_t seed, const PipelineConfig& cfg,
                                                 double corruption = 1.0) {
  const CounterRng rng(seed);
  SyntheticInstance inst;
  inst.seed = seed;

  std::vector<double> pose(kTemplateJointCount);
  for (int j = 0; j < kTemplateJointCount; ++j)
    pose[j] = cfg.pose_std * rng.normal(0x90u, j);
  inst.gt_mesh = make_template(seed, pose);

  const double base_scale = 0.42 * cfg.image_size;
  inst.gt_camera.sx = base_scale * (1.0 + 0.08 * rng.uniform_in(-1.0, 1.0, 0x91u, 0));
  inst.gt_camera.sy = base_scale * (1.0 + 0.08 * rng.uniform_in(-1.0, 1.0, 0x91u, 1));
  inst.gt_camera.tx = cfg.image_size * (0.5 + 0.04 * rng.uniform_in(-1.0, 1.0, 0x91u, 2));
  inst.gt_camera.ty = cfg.image_size * (0.5 + 0.04 * rng.uniform_in(-1.0, 1.0, 0x91u, 3));

  // Vertex -> region lookup (region = joint group, wrist for the rest).
  const int n = inst.gt_mesh.vertex_count();
  std::vector<int> region(n, 0);
  for (int g = 0; g < inst.gt_mesh.joint_count(); ++g)
    for (int idx : inst.gt_mesh.joint_groups[g]) region[idx] = g;

  const double off_axis_std = corruption * cfg.coarse_offset_std / std::sqrt(3.0);
  std::vector<Vec3> offsets(inst.gt_mesh.joint_count());
  for (std::size_t g = 0; g < offsets.size(); ++g)
    offsets[g] = {off_axis_std * rng.normal(0x92u, g, 0), off_axis_std * rng.normal(0x92u, g, 1),
                  off_axis_std * rng.normal(0x92u, g, 2)};
  const double glob_std = corruption * cfg.coarse_global_std;
  const Vec3 global{glob_std * rng.normal(0x93u, 0), glob_std * rng.normal(0x93u, 1),
                    glob_std * rng.normal(0x93u, 2)};

  inst.coarse_mesh = inst.gt_mesh;
  for (int k = 0; k < n; ++k) inst.coarse_mesh.vertices[k] += offsets[region[k]] + global;

  inst.coarse_camera = inst.gt_camera;
  inst.coarse_camera.sx *= 1.0 + corruption * cfg.cam_scale_std * rng.normal(0x94u, 0);
  inst.coarse_camera.sy *= 1.0 + corruption * cfg.cam_scale_std * rng.normal(0x94u, 1);
  inst.coarse_camera.tx += corruption * cfg.cam_trans_std * rng.normal(0x94u, 2);
  inst.coarse_camera.ty += corruption * cfg.cam_trans_std * rng.normal(0x94u, 3);

  // Displacement channels measure GT projections against the coarse
  // projections the pipeline starts from, so camera error is part of the
  // recoverable signal.
  inst.grid = synthesize_features(
      inst.gt_mesh, inst.coarse_mesh, inst.gt_camera, cfg.noise_level, seed, cfg.synth_spec(),
      project_all(inst.coarse_mesh.vertices, inst.coarse_camera));
  return inst;
}

// The refinement pipeline starts from the coarse fit: u is the coarse
// projection under the coarse camera.
inline RefinementState coarse_state(const SyntheticInstance& inst) {
  RefinementState s;
  s.mesh = inst.coarse_mesh;
  s.coords_2d = project_all(inst.coarse_mesh.vertices, inst.coarse_camera);
  s.camera = inst.coarse_camera;
  return s;
}

}  // namespace dne
