// The dual-noise refinement stage and its progressive composition: 2D
// coordinate refinement, 3D vertex refinement through three-view pooled
// features, closed-form camera correction, and the training loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dne/camera.hpp"
#include "dne/dnepack.hpp"
#include "dne/feature_grid.hpp"
#include "dne/mesh.hpp"
#include "dne/mlp.hpp"
#include "dne/noise.hpp"
#include "dne/regressor.hpp"
#include "dne/synth.hpp"
#include "dne/voxel.hpp"

namespace dne {

struct PipelineConfig {
  int modules = 3;       // M
  int samples = 4;       // R
  double gamma = 0.1;
  double delta_2d = 0.5;   // pixels
  double delta_3d = 1e-3;  // scene units
  double xi = 1e-4;
  // The 2D term is measured in pixels, the 3D term in scene units; with a
  // nominal camera scale near 100 px/unit, lambda_2d = 0.01 puts both terms
  // on the same footing.
  double lambda_2d = 0.01;
  double lambda_3d = 1.0;
  int grid_height = 32;
  int grid_width = 32;
  int grid_channels = 16;
  double image_size = 224.0;
  int hidden = 64;
  int voxel_resolution = 8;
  // Fixed output gain of the 3D head. The 2D head emits pixels while the 3D
  // head emits scene units (~1/100 the magnitude); the gain keeps both MLPs
  // working at the same numeric range so one learning rate serves both.
  double psi_output_scale = 0.01;
  bool enable_2d = true;
  bool enable_3d = true;

  // training
  int epochs = 14;
  double lr = 0.015;
  double lr_decay = 0.5;
  int lr_step_epochs = 5;
  int batch_size = 16;

  // synthetic data generation magnitudes (corruption level 1.0)
  double coarse_offset_std = 0.05;   // per-group 3D offset magnitude, scene units
  double coarse_global_std = 0.015;  // global translation, per axis
  double cam_scale_std = 0.05;       // multiplicative, relative
  double cam_trans_std = 2.0;        // pixels, per axis
  double noise_level = 0.05;         // feature-grid noise channels
  double pose_std = 0.35;            // radians, per joint
  double kernel_sigma = 1.3;         // splat width, grid cells

  void validate() const {
    if (modules < 0) throw std::invalid_argument("config: modules must be >= 0");
    if (samples < 1) throw std::invalid_argument("config: samples must be >= 1");
    if (!(gamma > 0) || !(delta_2d > 0) || !(delta_3d > 0))
      throw std::invalid_argument("config: gamma/delta must be positive");
    if (!(lambda_2d > 0) || !(lambda_3d > 0))
      throw std::invalid_argument("config: loss weights must be positive");
    if (xi < 0) throw std::invalid_argument("config: xi must be non-negative");
    if (grid_height < 2 || grid_width < 2 || grid_channels < 1)
      throw std::invalid_argument("config: bad grid shape");
    if (image_size <= 1) throw std::invalid_argument("config: image_size must exceed 1");
    if (voxel_resolution < 1) throw std::invalid_argument("config: bad voxel resolution");
  }

  FeatureSynthSpec synth_spec() const {
    return {grid_height, grid_width, grid_channels, image_size, kernel_sigma};
  }

  double grid_scale_x() const { return (grid_width - 1) / (image_size - 1.0); }
  double grid_scale_y() const { return (grid_height - 1) / (image_size - 1.0); }
  Vec2 to_grid(Vec2 px) const { return {px.x * grid_scale_x(), px.y * grid_scale_y()}; }
};

inline void to_json(json& j, const PipelineConfig& c) {
  j = json{{"modules", c.modules},
           {"samples", c.samples},
           {"gamma", c.gamma},
           {"delta_2d", c.delta_2d},
           {"delta_3d", c.delta_3d},
           {"xi", c.xi},
           {"lambda_2d", c.lambda_2d},
           {"lambda_3d", c.lambda_3d},
           {"grid_height", c.grid_height},
           {"grid_width", c.grid_width},
           {"grid_channels", c.grid_channels},
           {"image_size", c.image_size},
           {"hidden", c.hidden},
           {"voxel_resolution", c.voxel_resolution},
           {"psi_output_scale", c.psi_output_scale},
           {"enable_2d", c.enable_2d},
           {"enable_3d", c.enable_3d},
           {"epochs", c.epochs},
           {"lr", c.lr},
           {"lr_decay", c.lr_decay},
           {"lr_step_epochs", c.lr_step_epochs},
           {"batch_size", c.batch_size},
           {"coarse_offset_std", c.coarse_offset_std},
           {"coarse_global_std", c.coarse_global_std},
           {"cam_scale_std", c.cam_scale_std},
           {"cam_trans_std", c.cam_trans_std},
           {"noise_level", c.noise_level},
           {"pose_std", c.pose_std},
           {"kernel_sigma", c.kernel_sigma}};
}

inline void from_json(const json& j, PipelineConfig& c) {
  PipelineConfig d;
  c.modules = j.value("modules", d.modules);
  c.samples = j.value("samples", d.samples);
  c.gamma = j.value("gamma", d.gamma);
  c.delta_2d = j.value("delta_2d", d.delta_2d);
  c.delta_3d = j.value("delta_3d", d.delta_3d);
  c.xi = j.value("xi", d.xi);
  c.lambda_2d = j.value("lambda_2d", d.lambda_2d);
  c.lambda_3d = j.value("lambda_3d", d.lambda_3d);
  c.grid_height = j.value("grid_height", d.grid_height);
  c.grid_width = j.value("grid_width", d.grid_width);
  c.grid_channels = j.value("grid_channels", d.grid_channels);
  c.image_size = j.value("image_size", d.image_size);
  c.hidden = j.value("hidden", d.hidden);
  c.voxel_resolution = j.value("voxel_resolution", d.voxel_resolution);
  c.psi_output_scale = j.value("psi_output_scale", d.psi_output_scale);
  c.enable_2d = j.value("enable_2d", d.enable_2d);
  c.enable_3d = j.value("enable_3d", d.enable_3d);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.lr_step_epochs = j.value("lr_step_epochs", d.lr_step_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.coarse_offset_std = j.value("coarse_offset_std", d.coarse_offset_std);
  c.coarse_global_std = j.value("coarse_global_std", d.coarse_global_std);
  c.cam_scale_std = j.value("cam_scale_std", d.cam_scale_std);
  c.cam_trans_std = j.value("cam_trans_std", d.cam_trans_std);
  c.noise_level = j.value("noise_level", d.noise_level);
  c.pose_std = j.value("pose_std", d.pose_std);
  c.kernel_sigma = j.value("kernel_sigma", d.kernel_sigma);
}

struct DneStageParams {
  Mlp phi;                  // 2C -> hidden -> 2
  Mlp psi3d;                // 3C -> hidden -> 3
  CoordRegressor regressor;
};

struct DnePipelineParams {
  std::vector<DneStageParams> stages;
  PipelineConfig config;
  int n_vertices = kTemplateVertexCount;
};

// Xavier init for hidden layers; the output layers of phi/psi and the
// channel map of the regressor start at zero so an untrained pipeline is an
// exact passthrough (the camera fit of an unchanged state reproduces its
// own camera).
inline DnePipelineParams init_pipeline(const PipelineConfig& cfg, int n_vertices,
                                       std::uint64_t seed) {
  cfg.validate();
  DnePipelineParams p;
  p.config = cfg;
  p.n_vertices = n_vertices;
  const int c = cfg.grid_channels;
  const int hw = cfg.grid_height * cfg.grid_width;
  for (int m = 0; m < cfg.modules; ++m) {
    DneStageParams sp;
    sp.phi = make_mlp({2 * c, cfg.hidden, 2}, Act::Relu, seed, 100 + m);
    sp.psi3d = make_mlp({3 * c, cfg.hidden, 3}, Act::Relu, seed, 200 + m);
    sp.regressor = make_regressor(n_vertices, hw, c, seed, 300 + m);
    sp.phi.layers.back().w.fill(0.0);
    sp.psi3d.layers.back().w.fill(0.0);
    sp.regressor.w_chan.fill(0.0);
    p.stages.push_back(std::move(sp));
  }
  return p;
}

struct StageTraceEntry {
  std::vector<Vec2> mu_2d;
  std::vector<Vec3> mu_3d;
  Camera camera;
};

struct RefinementState {
  HandMesh mesh;
  std::vector<Vec2> coords_2d;
  Camera camera;
  std::vector<StageTraceEntry> trace;
};

namespace stage_detail {

inline void check_finite(std::span<const double> vals, int stage, const char* step) {
  for (double v : vals)
    if (!std::isfinite(v))
      throw std::runtime_error("dne_stage " + std::to_string(stage) + " step " + step +
                               ": non-finite value");
}

inline void check_finite2(const std::vector<Vec2>& vals, int stage, const char* step) {
  for (const Vec2& v : vals)
    if (!finite(v))
      throw std::runtime_error("dne_stage " + std::to_string(stage) + " step " + step +
                               ": non-finite value");
}

inline void check_finite3(const std::vector<Vec3>& vals, int stage, const char* step) {
  for (const Vec3& v : vals)
    if (!finite(v))
      throw std::runtime_error("dne_stage " + std::to_string(stage) + " step " + step +
                               ": non-finite value");
}

// Interpolates the grid at per-vertex pixel positions; returns N x C.
inline Mat interp_rows(const FeatureGrid& grid, const PipelineConfig& cfg,
                       const std::vector<Vec2>& px, std::vector<Vec2>* grid_pos = nullptr) {
  Mat out(static_cast<int>(px.size()), grid.channels());
  if (grid_pos) grid_pos->resize(px.size());
  for (std::size_t k = 0; k < px.size(); ++k) {
    const Vec2 q = cfg.to_grid(px[k]);
    if (grid_pos) (*grid_pos)[k] = q;
    interpolate_into(grid, q, out.row(static_cast<int>(k)));
  }
  return out;
}

}  // namespace stage_detail

// One forward path (the mean path or one reparameterized sample branch).
struct StagePath {
  std::vector<Vec2> z_2d;
  std::vector<Vec2> u_new;
  std::vector<Vec2> u_grid;  // grid-space query positions for f_u
  PooledGather gather;
  BatchTape psi_tape;
  Mat mu3d;  // N x 3
  std::vector<Vec3> z_3d;
  std::vector<Vec3> v_new;
};

struct StageTape {
  std::vector<Vec3> v_in;
  std::vector<Vec2> u_in;
  Camera cam_in;
  std::vector<Vec2> proj_px;
  std::vector<Vec2> proj_grid;
  std::vector<Vec2> reg_coords;
  std::vector<Vec2> reg_grid;
  Mat reg_y1;
  BatchTape phi_tape;
  Mat mu2d;  // N x 2
  std::vector<StagePath> paths;  // paths[0] is the mean path
  CameraFitTape fit;
  Camera cam_out;
};

// Executes one DNE stage. paths[0] carries the mean path (eps = mu); in
// train mode paths[1..R] carry the reparameterized sample branches used by
// the loss. The camera is corrected from the mean path.
inline void stage_forward(const DneStageParams& sp, const PipelineConfig& cfg,
                          const FeatureGrid& grid, int stage_index,
                          const std::vector<Vec3>& v, const std::vector<Vec2>& u,
                          const Camera& cam, int n_samples, std::uint64_t noise_seed,
                          StageTape& tape) {
  using namespace stage_detail;
  const int n = static_cast<int>(v.size());
  if (u.size() != v.size()) throw std::invalid_argument("dne_stage: v/u size mismatch");
  const int c = grid.channels();
  if (c != cfg.grid_channels || grid.height() != cfg.grid_height ||
      grid.width() != cfg.grid_width)
    throw std::invalid_argument("dne_stage: grid shape does not match config");

  tape.v_in = v;
  tape.u_in = u;
  tape.cam_in = cam;

  // (1) image-aligned features at the current projections and at the
  // directly regressed coordinates; (2) mu_2d = phi(f_p, f_r).
  project_all(v, cam, tape.proj_px);
  check_finite2(tape.proj_px, stage_index, "projection");
  if (cfg.enable_2d) {
    tape.reg_coords = regress_coords(sp.regressor, grid, &tape.reg_y1);
    check_finite2(tape.reg_coords, stage_index, "regress_coords");
    const Mat f_p = interp_rows(grid, cfg, tape.proj_px, &tape.proj_grid);
    const Mat f_r = interp_rows(grid, cfg, tape.reg_coords, &tape.reg_grid);
    Mat phi_in(n, 2 * c);
    for (int k = 0; k < n; ++k) {
      double* row = phi_in.row(k);
      const double* fp = f_p.row(k);
      const double* fr = f_r.row(k);
      for (int i = 0; i < c; ++i) row[i] = fp[i];
      for (int i = 0; i < c; ++i) row[c + i] = fr[i];
    }
    forward_batch(sp.phi, phi_in, tape.mu2d, &tape.phi_tape);
    check_finite(std::span<const double>(tape.mu2d.data(), tape.mu2d.size()), stage_index,
                 "mu_2d");
  } else {
    tape.mu2d = Mat(n, 2);
  }

  const CounterRng rng(noise_seed);
  tape.paths.assign(static_cast<std::size_t>(n_samples) + 1, StagePath{});
  for (int p = 0; p <= n_samples; ++p) {
    StagePath& path = tape.paths[p];
    // u <- u + eps_2d ("the updated 2D coordinate is used for feature
    // interpolation"); path 0 takes eps = mu, others reparameterized draws
    // indexed by (stage, sample, vertex, channel).
    path.z_2d.assign(n, Vec2{});
    path.u_new.resize(n);
    if (p > 0) {
      for (int k = 0; k < n; ++k)
        path.z_2d[k] = {rng.normal(stage_index, p, noise_detail::kDomain2d, k, 0u),
                        rng.normal(stage_index, p, noise_detail::kDomain2d, k, 1u)};
    }
    for (int k = 0; k < n; ++k) {
      const double mx = tape.mu2d(k, 0);
      const double my = tape.mu2d(k, 1);
      path.u_new[k] = {
          u[k].x + mx + noise_sigma(mx, cfg.gamma, cfg.delta_2d) * path.z_2d[k].x *
                            (cfg.enable_2d ? 1.0 : 0.0),
          u[k].y + my + noise_sigma(my, cfg.gamma, cfg.delta_2d) * path.z_2d[k].y *
                            (cfg.enable_2d ? 1.0 : 0.0)};
    }
    check_finite2(path.u_new, stage_index, "u_update");

    // (3) features at the updated coordinates, voxel pooling over the
    // current mesh, mu_3d = psi(front, lateral, top), v <- v + eps_3d.
    path.v_new.resize(n);
    path.z_3d.assign(n, Vec3{});
    if (cfg.enable_3d) {
      const Mat f_u = interp_rows(grid, cfg, path.u_new, &path.u_grid);
      path.gather = pooled_gather(std::span<const Vec3>(v), f_u, cfg.voxel_resolution);
      Mat psi_in(n, 3 * c);
      for (int k = 0; k < n; ++k) {
        double* row = psi_in.row(k);
        const double* ff = path.gather.features.front.row(k);
        const double* fl = path.gather.features.lateral.row(k);
        const double* ft = path.gather.features.top.row(k);
        for (int i = 0; i < c; ++i) row[i] = ff[i];
        for (int i = 0; i < c; ++i) row[c + i] = fl[i];
        for (int i = 0; i < c; ++i) row[2 * c + i] = ft[i];
      }
      forward_batch(sp.psi3d, psi_in, path.mu3d, &path.psi_tape);
      for (std::size_t i = 0; i < path.mu3d.size(); ++i)
        path.mu3d.data()[i] *= cfg.psi_output_scale;
      check_finite(std::span<const double>(path.mu3d.data(), path.mu3d.size()), stage_index,
                   "mu_3d");
      if (p > 0) {
        for (int k = 0; k < n; ++k)
          path.z_3d[k] = {rng.normal(stage_index, p, noise_detail::kDomain3d, k, 0u),
                          rng.normal(stage_index, p, noise_detail::kDomain3d, k, 1u),
                          rng.normal(stage_index, p, noise_detail::kDomain3d, k, 2u)};
      }
      for (int k = 0; k < n; ++k) {
        const double mx = path.mu3d(k, 0);
        const double my = path.mu3d(k, 1);
        const double mz = path.mu3d(k, 2);
        path.v_new[k] = {
            v[k].x + mx + noise_sigma(mx, cfg.gamma, cfg.delta_3d) * path.z_3d[k].x,
            v[k].y + my + noise_sigma(my, cfg.gamma, cfg.delta_3d) * path.z_3d[k].y,
            v[k].z + mz + noise_sigma(mz, cfg.gamma, cfg.delta_3d) * path.z_3d[k].z};
      }
    } else {
      path.mu3d = Mat(n, 3);
      path.v_new = v;
    }
    check_finite3(path.v_new, stage_index, "v_update");
  }

  // (4) camera correction from the updated mean-path state.
  tape.cam_out = correct_camera(tape.paths[0].v_new, tape.paths[0].u_new,
                                RidgeConfig{cfg.xi}, &tape.fit);
  if (!std::isfinite(tape.cam_out.sx) || !std::isfinite(tape.cam_out.sy) ||
      !std::isfinite(tape.cam_out.tx) || !std::isfinite(tape.cam_out.ty))
    throw std::runtime_error("dne_stage " + std::to_string(stage_index) +
                             " step camera_correction: non-finite value");
}

struct StageGrad {
  MlpGrad phi;
  MlpGrad psi;
  RegressorGrad reg;

  void init_like(const DneStageParams& sp) {
    phi.init_like(sp.phi);
    psi.init_like(sp.psi3d);
    reg.init_like(sp.regressor);
  }
  void accumulate(const StageGrad& o) {
    phi.accumulate(o.phi);
    psi.accumulate(o.psi);
    reg.accumulate(o.reg);
  }
};

struct PipelineGrad {
  std::vector<StageGrad> stages;

  void init_like(const DnePipelineParams& p) {
    stages.resize(p.stages.size());
    for (std::size_t m = 0; m < p.stages.size(); ++m) stages[m].init_like(p.stages[m]);
  }
  void accumulate(const PipelineGrad& o) {
    for (std::size_t m = 0; m < stages.size(); ++m) stages[m].accumulate(o.stages[m]);
  }
};

// Gradient holder for a camera (same layout as the parameters).
struct CameraGrad {
  double sx = 0, sy = 0, tx = 0, ty = 0;
};

// Reverse pass through one stage. Inputs are dL/d(mean v_new), dL/d(mean
// u_new), dL/d(cam_out) and dL/d(sample v_new) per branch; outputs
// accumulate into the previous stage's registers.
inline void stage_backward(const DneStageParams& sp, const PipelineConfig& cfg,
                           const FeatureGrid& grid, const StageTape& tape,
                           const std::vector<Vec3>& d_mean_v_new,
                           const std::vector<Vec2>& d_mean_u_new, const CameraGrad& d_cam_out,
                           const std::vector<std::vector<Vec3>>& d_sample_v_new,
                           StageGrad& grad, std::vector<Vec3>& d_v_in,
                           std::vector<Vec2>& d_u_in, CameraGrad& d_cam_in) {
  const int n = static_cast<int>(tape.v_in.size());
  const int c = grid.channels();
  const int n_paths = static_cast<int>(tape.paths.size());
  const double gsx = cfg.grid_scale_x();
  const double gsy = cfg.grid_scale_y();

  std::vector<std::vector<Vec3>> d_pv(n_paths, std::vector<Vec3>(n));
  std::vector<std::vector<Vec2>> d_pu(n_paths, std::vector<Vec2>(n));
  d_pv[0] = d_mean_v_new;
  d_pu[0] = d_mean_u_new;
  for (int p = 1; p < n_paths; ++p) d_pv[p] = d_sample_v_new[p - 1];

  // (4) camera fit ran on the mean path.
  camera_fit_backward(tape.fit, tape.paths[0].v_new, tape.paths[0].u_new, d_cam_out.sx,
                      d_cam_out.sy, d_cam_out.tx, d_cam_out.ty, d_pv[0], d_pu[0]);

  Mat d_mu2d(n, 2);
  Mat d_fu(n, c);
  for (int p = 0; p < n_paths; ++p) {
    const StagePath& path = tape.paths[p];
    // (3) 3D branch
    if (cfg.enable_3d) {
      Mat d_mu3d(n, 3);
      const double os = cfg.psi_output_scale;
      for (int k = 0; k < n; ++k) {
        d_mu3d(k, 0) =
            os * d_pv[p][k].x * reparam_factor(path.mu3d(k, 0), cfg.gamma, path.z_3d[k].x);
        d_mu3d(k, 1) =
            os * d_pv[p][k].y * reparam_factor(path.mu3d(k, 1), cfg.gamma, path.z_3d[k].y);
        d_mu3d(k, 2) =
            os * d_pv[p][k].z * reparam_factor(path.mu3d(k, 2), cfg.gamma, path.z_3d[k].z);
        d_v_in[k] += d_pv[p][k];
      }
      Mat d_psi_in;
      backward_batch(sp.psi3d, path.psi_tape, d_mu3d, grad.psi, &d_psi_in);
      d_fu.fill(0.0);
      for (int k = 0; k < n; ++k) {
        const double* row = d_psi_in.row(k);
        for (int view = 0; view < 3; ++view)
          for (int ch = 0; ch < c; ++ch) {
            const double g = row[view * c + ch];
            if (g == 0.0) continue;
            const std::int32_t src =
                path.gather.source[(static_cast<std::size_t>(k) * 3 + view) * c + ch];
            if (src >= 0) d_fu(src, ch) += g;
          }
      }
      for (int k = 0; k < n; ++k) {
        const Vec2 gp = interpolate_pos_gradient(grid, path.u_grid[k], d_fu.row(k));
        d_pu[p][k] += Vec2{gp.x * gsx, gp.y * gsy};
      }
    } else {
      for (int k = 0; k < n; ++k) d_v_in[k] += d_pv[p][k];
    }
    // (2) 2D update
    if (cfg.enable_2d) {
      for (int k = 0; k < n; ++k) {
        d_mu2d(k, 0) += d_pu[p][k].x * reparam_factor(tape.mu2d(k, 0), cfg.gamma, path.z_2d[k].x);
        d_mu2d(k, 1) += d_pu[p][k].y * reparam_factor(tape.mu2d(k, 1), cfg.gamma, path.z_2d[k].y);
        d_u_in[k] += d_pu[p][k];
      }
    } else {
      for (int k = 0; k < n; ++k) d_u_in[k] += d_pu[p][k];
    }
  }

  // (1)-(2) shared 2D estimation
  if (cfg.enable_2d) {
    Mat d_phi_in;
    backward_batch(sp.phi, tape.phi_tape, d_mu2d, grad.phi, &d_phi_in);
    std::vector<Vec2> d_reg(n);
    for (int k = 0; k < n; ++k) {
      const double* row = d_phi_in.row(k);
      const Vec2 gp = interpolate_pos_gradient(grid, tape.proj_grid[k], row);
      const Vec2 d_proj{gp.x * gsx, gp.y * gsy};
      d_v_in[k].x += tape.cam_in.sx * d_proj.x;
      d_v_in[k].y += tape.cam_in.sy * d_proj.y;
      d_cam_in.sx += d_proj.x * tape.v_in[k].x;
      d_cam_in.tx += d_proj.x;
      d_cam_in.sy += d_proj.y * tape.v_in[k].y;
      d_cam_in.ty += d_proj.y;
      const Vec2 gr = interpolate_pos_gradient(grid, tape.reg_grid[k], row + c);
      d_reg[k] = {gr.x * gsx, gr.y * gsy};
    }
    regress_coords_backward(sp.regressor, grid, tape.reg_y1, d_reg, grad.reg);
  }
}

// Lean inference pass: mean path only, no tapes, updates the state in place.
inline void stage_infer(const DneStageParams& sp, const PipelineConfig& cfg,
                        const FeatureGrid& grid, int stage_index, std::vector<Vec3>& v,
                        std::vector<Vec2>& u, Camera& cam, StageTraceEntry* trace) {
  using namespace stage_detail;
  const int n = static_cast<int>(v.size());
  const int c = grid.channels();
  std::vector<Vec2> proj;
  project_all(v, cam, proj);
  check_finite2(proj, stage_index, "projection");
  Mat mu2d(n, 2);
  if (cfg.enable_2d) {
    const std::vector<Vec2> reg = regress_coords(sp.regressor, grid);
    const Mat f_p = interp_rows(grid, cfg, proj);
    const Mat f_r = interp_rows(grid, cfg, reg);
    Mat phi_in(n, 2 * c);
    for (int k = 0; k < n; ++k) {
      double* row = phi_in.row(k);
      for (int i = 0; i < c; ++i) row[i] = f_p(k, i);
      for (int i = 0; i < c; ++i) row[c + i] = f_r(k, i);
    }
    forward_batch(sp.phi, phi_in, mu2d);
    check_finite(std::span<const double>(mu2d.data(), mu2d.size()), stage_index, "mu_2d");
    for (int k = 0; k < n; ++k) {
      u[k].x += mu2d(k, 0);
      u[k].y += mu2d(k, 1);
    }
  }
  check_finite2(u, stage_index, "u_update");
  Mat mu3d(n, 3);
  if (cfg.enable_3d) {
    const Mat f_u = interp_rows(grid, cfg, u);
    const PooledGather pg = pooled_gather(std::span<const Vec3>(v), f_u, cfg.voxel_resolution);
    Mat psi_in(n, 3 * c);
    for (int k = 0; k < n; ++k) {
      double* row = psi_in.row(k);
      for (int i = 0; i < c; ++i) row[i] = pg.features.front(k, i);
      for (int i = 0; i < c; ++i) row[c + i] = pg.features.lateral(k, i);
      for (int i = 0; i < c; ++i) row[2 * c + i] = pg.features.top(k, i);
    }
    forward_batch(sp.psi3d, psi_in, mu3d);
    for (std::size_t i = 0; i < mu3d.size(); ++i) mu3d.data()[i] *= cfg.psi_output_scale;
    check_finite(std::span<const double>(mu3d.data(), mu3d.size()), stage_index, "mu_3d");
    for (int k = 0; k < n; ++k) {
      v[k].x += mu3d(k, 0);
      v[k].y += mu3d(k, 1);
      v[k].z += mu3d(k, 2);
    }
  }
  check_finite3(v, stage_index, "v_update");
  cam = correct_camera(v, u, RidgeConfig{cfg.xi});
  if (trace) {
    trace->mu_2d.resize(n);
    trace->mu_3d.resize(n);
    for (int k = 0; k < n; ++k) {
      trace->mu_2d[k] = {mu2d(k, 0), mu2d(k, 1)};
      trace->mu_3d[k] = {mu3d(k, 0), mu3d(k, 1), mu3d(k, 2)};
    }
    trace->camera = cam;
  }
}

// Spec-facing single-stage entry point.
struct StageSampleState {
  std::vector<Vec3> vertices;
  std::vector<Vec2> coords_2d;
};

struct StageResult {
  RefinementState state;
  std::vector<StageSampleState> samples;  // train mode only
};

inline StageResult dne_stage(const RefinementState& state, const FeatureGrid& grid,
                             const DneStageParams& sp, const PipelineConfig& cfg,
                             int stage_index, bool train, std::uint64_t seed) {
  StageResult out;
  out.state = state;
  if (train) {
    StageTape tape;
    stage_forward(sp, cfg, grid, stage_index, state.mesh.vertices, state.coords_2d,
                  state.camera, cfg.samples, seed, tape);
    out.state.mesh.vertices = tape.paths[0].v_new;
    out.state.coords_2d = tape.paths[0].u_new;
    out.state.camera = tape.cam_out;
    StageTraceEntry entry;
    entry.mu_2d.resize(tape.mu2d.rows());
    entry.mu_3d.resize(tape.mu2d.rows());
    for (int k = 0; k < tape.mu2d.rows(); ++k) {
      entry.mu_2d[k] = {tape.mu2d(k, 0), tape.mu2d(k, 1)};
      entry.mu_3d[k] = {tape.paths[0].mu3d(k, 0), tape.paths[0].mu3d(k, 1),
                        tape.paths[0].mu3d(k, 2)};
    }
    entry.camera = tape.cam_out;
    out.state.trace.push_back(std::move(entry));
    for (std::size_t p = 1; p < tape.paths.size(); ++p)
      out.samples.push_back({tape.paths[p].v_new, tape.paths[p].u_new});
  } else {
    StageTraceEntry entry;
    stage_infer(sp, cfg, grid, stage_index, out.state.mesh.vertices, out.state.coords_2d,
                out.state.camera, &entry);
    out.state.trace.push_back(std::move(entry));
  }
  return out;
}

// Progressive refinement: M sequential stages in inference mode. M = 0 is
// the identity (baseline).
inline RefinementState refine(const RefinementState& coarse, const FeatureGrid& grid,
                              const DnePipelineParams& params) {
  RefinementState state = coarse;
  state.trace.clear();
  for (std::size_t m = 0; m < params.stages.size(); ++m) {
    StageTraceEntry entry;
    stage_infer(params.stages[m], params.config, grid, static_cast<int>(m),
                state.mesh.vertices, state.coords_2d, state.camera, &entry);
    state.trace.push_back(std::move(entry));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Training loss (L1 on sampled vertices and their projections).

struct StageLossInputs {
  std::vector<std::vector<Vec3>> sample_vertices;  // R x N
  std::vector<Vec3> mean_vertices;                 // v_m
  Camera camera;                                   // c_m (post-correction)
};

struct LossGrad {
  std::vector<std::vector<std::vector<Vec3>>> d_samples;  // M x R x N
  std::vector<std::vector<Vec3>> d_mean;                  // M x N
  std::vector<CameraGrad> d_camera;                       // M
};

// loss = lambda_3d * sum_{m,r} |v_{m,r} - v_gt|_1
//      + lambda_2d * sum_{m,r} |proj(v_{m,r}, c_m) - proj(v_m, c_gt)|_1
// The 2D target depends on the (learnable) mean-path vertices; the gradient
// follows the expression exactly, with sign(0) = 0.
inline double loss_v(const std::vector<StageLossInputs>& stages, const HandMesh& gt_mesh,
                     const Camera& gt_camera, double lambda_2d, double lambda_3d,
                     LossGrad* grad = nullptr) {
  const std::size_t n = gt_mesh.vertices.size();
  if (stages.empty()) throw std::invalid_argument("loss_v: need at least one stage");
  const std::size_t r_count = stages.front().sample_vertices.size();
  for (const auto& st : stages) {
    if (st.sample_vertices.size() != r_count)
      throw std::invalid_argument("loss_v: inconsistent sample count across stages");
    if (st.mean_vertices.size() != n)
      throw std::invalid_argument("loss_v: vertex count mismatch");
    for (const auto& sv : st.sample_vertices)
      if (sv.size() != n) throw std::invalid_argument("loss_v: vertex count mismatch");
  }
  if (grad) {
    grad->d_samples.assign(stages.size(), {});
    grad->d_mean.assign(stages.size(), std::vector<Vec3>(n));
    grad->d_camera.assign(stages.size(), CameraGrad{});
    for (std::size_t m = 0; m < stages.size(); ++m)
      grad->d_samples[m].assign(r_count, std::vector<Vec3>(n));
  }
  double loss = 0.0;
  for (std::size_t m = 0; m < stages.size(); ++m) {
    const StageLossInputs& st = stages[m];
    for (std::size_t r = 0; r < r_count; ++r) {
      const auto& vr = st.sample_vertices[r];
      for (std::size_t k = 0; k < n; ++k) {
        const Vec3 d3 = vr[k] - gt_mesh.vertices[k];
        loss += lambda_3d * (std::abs(d3.x) + std::abs(d3.y) + std::abs(d3.z));
        const Vec2 pr = project(vr[k], st.camera);
        const Vec2 pt = project(st.mean_vertices[k], gt_camera);
        const Vec2 e = pr - pt;
        loss += lambda_2d * (std::abs(e.x) + std::abs(e.y));
        if (grad) {
          Vec3& gs = grad->d_samples[m][r][k];
          gs.x += lambda_3d * sign0(d3.x) + lambda_2d * sign0(e.x) * st.camera.sx;
          gs.y += lambda_3d * sign0(d3.y) + lambda_2d * sign0(e.y) * st.camera.sy;
          gs.z += lambda_3d * sign0(d3.z);
          CameraGrad& gc = grad->d_camera[m];
          gc.sx += lambda_2d * sign0(e.x) * vr[k].x;
          gc.tx += lambda_2d * sign0(e.x);
          gc.sy += lambda_2d * sign0(e.y) * vr[k].y;
          gc.ty += lambda_2d * sign0(e.y);
          Vec3& gm = grad->d_mean[m][k];
          gm.x -= lambda_2d * sign0(e.x) * gt_camera.sx;
          gm.y -= lambda_2d * sign0(e.y) * gt_camera.sy;
        }
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Full train-mode pass over one instance: forward through all stages,
// evaluate loss_v, backpropagate into `grad` (which must be init_like'd).

inline double train_forward_backward(const DnePipelineParams& params, const FeatureGrid& grid,
                                     const RefinementState& coarse, const HandMesh& gt_mesh,
                                     const Camera& gt_camera, std::uint64_t noise_seed,
                                     PipelineGrad& grad) {
  const PipelineConfig& cfg = params.config;
  const int m_count = static_cast<int>(params.stages.size());
  const int n = static_cast<int>(coarse.mesh.vertices.size());
  std::vector<StageTape> tapes(m_count);
  std::vector<Vec3> v = coarse.mesh.vertices;
  std::vector<Vec2> u = coarse.coords_2d;
  Camera cam = coarse.camera;
  for (int m = 0; m < m_count; ++m) {
    stage_forward(params.stages[m], cfg, grid, m, v, u, cam, cfg.samples, noise_seed,
                  tapes[m]);
    v = tapes[m].paths[0].v_new;
    u = tapes[m].paths[0].u_new;
    cam = tapes[m].cam_out;
  }

  std::vector<StageLossInputs> loss_in(m_count);
  for (int m = 0; m < m_count; ++m) {
    loss_in[m].mean_vertices = tapes[m].paths[0].v_new;
    loss_in[m].camera = tapes[m].cam_out;
    for (std::size_t p = 1; p < tapes[m].paths.size(); ++p)
      loss_in[m].sample_vertices.push_back(tapes[m].paths[p].v_new);
  }
  LossGrad lg;
  const double loss =
      loss_v(loss_in, gt_mesh, gt_camera, cfg.lambda_2d, cfg.lambda_3d, &lg);
  if (!std::isfinite(loss)) throw std::runtime_error("train: non-finite loss");

  // Backward, last stage first. Registers hold dL/d(state entering stage m).
  std::vector<Vec3> d_v(n);
  std::vector<Vec2> d_u(n);
  CameraGrad d_cam;
  for (int m = m_count - 1; m >= 0; --m) {
    std::vector<Vec3> d_mean_v = lg.d_mean[m];
    for (int k = 0; k < n; ++k) d_mean_v[k] += d_v[k];
    std::vector<Vec2> d_mean_u = d_u;
    CameraGrad d_cam_out = lg.d_camera[m];
    d_cam_out.sx += d_cam.sx;
    d_cam_out.sy += d_cam.sy;
    d_cam_out.tx += d_cam.tx;
    d_cam_out.ty += d_cam.ty;
    d_v.assign(n, Vec3{});
    d_u.assign(n, Vec2{});
    d_cam = CameraGrad{};
    stage_backward(params.stages[m], cfg, grid, tapes[m], d_mean_v, d_mean_u, d_cam_out,
                   lg.d_samples[m], grad.stages[m], d_v, d_u, d_cam);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Parameter plumbing: iteration, SGD application, checkpoint round-trip.

template <class Fn>
inline void visit_params(DnePipelineParams& params, PipelineGrad& grad, Fn&& fn) {
  for (std::size_t m = 0; m < params.stages.size(); ++m) {
    DneStageParams& sp = params.stages[m];
    StageGrad& sg = grad.stages[m];
    for (std::size_t l = 0; l < sp.phi.layers.size(); ++l) {
      fn(sp.phi.layers[l].w.data(), sg.phi.w[l].data(), sp.phi.layers[l].w.size());
      fn(sp.phi.layers[l].b.data(), sg.phi.b[l].data(), sp.phi.layers[l].b.size());
    }
    for (std::size_t l = 0; l < sp.psi3d.layers.size(); ++l) {
      fn(sp.psi3d.layers[l].w.data(), sg.psi.w[l].data(), sp.psi3d.layers[l].w.size());
      fn(sp.psi3d.layers[l].b.data(), sg.psi.b[l].data(), sp.psi3d.layers[l].b.size());
    }
    fn(sp.regressor.w_spatial.data(), sg.reg.w_spatial.data(), sp.regressor.w_spatial.size());
    fn(sp.regressor.b_spatial.data(), sg.reg.b_spatial.data(), sp.regressor.b_spatial.size());
    fn(sp.regressor.w_chan.data(), sg.reg.w_chan.data(), sp.regressor.w_chan.size());
    fn(sp.regressor.b_chan.data(), sg.reg.b_chan.data(), sp.regressor.b_chan.size());
  }
}

inline void apply_sgd(DnePipelineParams& params, PipelineGrad& grad, double lr) {
  visit_params(params, grad,
               [lr](double* p, const double* g, std::size_t count) {
                 for (std::size_t i = 0; i < count; ++i) p[i] -= lr * g[i];
               });
}

inline std::vector<NamedTensor> pipeline_tensors(const DnePipelineParams& params) {
  std::vector<NamedTensor> out;
  auto add_mat = [&](const std::string& name, const Mat& m) {
    NamedTensor t;
    t.name = name;
    t.shape = {m.rows(), m.cols()};
    t.values.assign(m.data(), m.data() + m.size());
    out.push_back(std::move(t));
  };
  auto add_vec = [&](const std::string& name, const std::vector<double>& v) {
    NamedTensor t;
    t.name = name;
    t.shape = {static_cast<int>(v.size())};
    t.values = v;
    out.push_back(std::move(t));
  };
  for (std::size_t m = 0; m < params.stages.size(); ++m) {
    const std::string s = "stage" + std::to_string(m);
    const DneStageParams& sp = params.stages[m];
    for (std::size_t l = 0; l < sp.phi.layers.size(); ++l) {
      add_mat(s + ".phi.w" + std::to_string(l), sp.phi.layers[l].w);
      add_vec(s + ".phi.b" + std::to_string(l), sp.phi.layers[l].b);
    }
    for (std::size_t l = 0; l < sp.psi3d.layers.size(); ++l) {
      add_mat(s + ".psi.w" + std::to_string(l), sp.psi3d.layers[l].w);
      add_vec(s + ".psi.b" + std::to_string(l), sp.psi3d.layers[l].b);
    }
    add_mat(s + ".reg.w_spatial", sp.regressor.w_spatial);
    add_vec(s + ".reg.b_spatial", sp.regressor.b_spatial);
    add_mat(s + ".reg.w_chan", sp.regressor.w_chan);
    add_vec(s + ".reg.b_chan", sp.regressor.b_chan);
  }
  return out;
}

inline void save_pipeline(const std::filesystem::path& path, const DnePipelineParams& params) {
  json config;
  to_json(config, params.config);
  config["n_vertices"] = params.n_vertices;
  write_checkpoint(path, pipeline_tensors(params), config);
}

inline DnePipelineParams load_pipeline(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  PipelineConfig cfg;
  from_json(ck.config, cfg);
  const int n = ck.config.value("n_vertices", kTemplateVertexCount);
  DnePipelineParams params = init_pipeline(cfg, n, 0);
  auto load_mat = [&](const std::string& name, Mat& m) {
    const NamedTensor& t = ck.find(name);
    if (t.shape.size() != 2 || t.shape[0] != m.rows() || t.shape[1] != m.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    std::copy(t.values.begin(), t.values.end(), m.data());
  };
  auto load_vec = [&](const std::string& name, std::vector<double>& v) {
    const NamedTensor& t = ck.find(name);
    if (t.shape.size() != 1 || t.shape[0] != static_cast<int>(v.size()))
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    v = t.values;
  };
  for (std::size_t m = 0; m < params.stages.size(); ++m) {
    const std::string s = "stage" + std::to_string(m);
    DneStageParams& sp = params.stages[m];
    for (std::size_t l = 0; l < sp.phi.layers.size(); ++l) {
      load_mat(s + ".phi.w" + std::to_string(l), sp.phi.layers[l].w);
      load_vec(s + ".phi.b" + std::to_string(l), sp.phi.layers[l].b);
    }
    for (std::size_t l = 0; l < sp.psi3d.layers.size(); ++l) {
      load_mat(s + ".psi.w" + std::to_string(l), sp.psi3d.layers[l].w);
      load_vec(s + ".psi.b" + std::to_string(l), sp.psi3d.layers[l].b);
    }
    load_mat(s + ".reg.w_spatial", sp.regressor.w_spatial);
    load_vec(s + ".reg.b_spatial", sp.regressor.b_spatial);
    load_mat(s + ".reg.w_chan", sp.regressor.w_chan);
    load_vec(s + ".reg.b_chan", sp.regressor.b_chan);
  }
  return params;
}

}  // namespace dne
