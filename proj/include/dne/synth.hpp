// Synthetic feature-grid generator. Stands in for a learned image encoder:
// channels carry a splatted displacement field (true projection minus coarse
// projection), splatted depth, splat density, and pure-noise channels.
#pragma once

#include <cmath>
#include <cstdint>

#include "dne/camera.hpp"
#include "dne/feature_grid.hpp"
#include "dne/mesh.hpp"
#include "dne/rng.hpp"

namespace dne {

struct FeatureSynthSpec {
  int height = 32;
  int width = 32;
  int channels = 16;
  double image_size = 224.0;   // pixel extent the camera projects into
  double kernel_sigma = 1.3;   // Gaussian splat width, in grid cells
};

// Channel layout: 0 displacement-x, 1 displacement-y (pixels), 2 depth,
// 3 splat density, 4.. i.i.d. noise of std `noise_level`.
inline constexpr int kChanDispX = 0;
inline constexpr int kChanDispY = 1;
inline constexpr int kChanDepth = 2;
inline constexpr int kChanDensity = 3;
inline constexpr int kNumSignalChannels = 4;

// Maps image-pixel coordinates onto grid-index coordinates.
inline Vec2 pixel_to_grid(Vec2 px, const FeatureSynthSpec& spec) {
  const double sx = (spec.width - 1) / (spec.image_size - 1.0);
  const double sy = (spec.height - 1) / (spec.image_size - 1.0);
  return {px.x * sx, px.y * sy};
}

inline double pixel_to_grid_scale_x(const FeatureSynthSpec& spec) {
  return (spec.width - 1) / (spec.image_size - 1.0);
}
inline double pixel_to_grid_scale_y(const FeatureSynthSpec& spec) {
  return (spec.height - 1) / (spec.image_size - 1.0);
}

inline double splat_kernel(double dist2, double sigma) {
  return std::exp(-dist2 / (2.0 * sigma * sigma));
}

// `camera` is the image camera (splat centers and GT projections live under
// it). The displacement field is GT projection minus coarse projection;
// `coarse_uv`, when provided, supplies the coarse projections the consumer
// actually starts from (they may come from a different, corrupted camera).
// When empty, the coarse mesh is projected under `camera`.
inline FeatureGrid synthesize_features(const HandMesh& gt_mesh, const HandMesh& coarse_mesh,
                                       const Camera& camera, double noise_level,
                                       std::uint64_t seed,
                                       const FeatureSynthSpec& spec = {},
                                       const std::vector<Vec2>& coarse_uv = {}) {
  if (gt_mesh.vertex_count() != coarse_mesh.vertex_count())
    throw std::invalid_argument("synthesize_features: vertex count mismatch");
  if (!coarse_uv.empty() && coarse_uv.size() != gt_mesh.vertices.size())
    throw std::invalid_argument("synthesize_features: coarse_uv size mismatch");
  if (spec.channels < kNumSignalChannels)
    throw std::invalid_argument("synthesize_features: need at least 4 channels");
  FeatureGrid grid(spec.height, spec.width, spec.channels);

  const double sigma = spec.kernel_sigma;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  for (int k = 0; k < gt_mesh.vertex_count(); ++k) {
    const Vec2 gt_px = project(gt_mesh.vertices[k], camera);
    const Vec2 coarse_px =
        coarse_uv.empty() ? project(coarse_mesh.vertices[k], camera) : coarse_uv[k];
    const Vec2 disp = gt_px - coarse_px;
    const Vec2 center = pixel_to_grid(gt_px, spec);
    const int x0 = std::max(0, static_cast<int>(std::floor(center.x)) - radius);
    const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(center.x)) + radius);
    const int y0 = std::max(0, static_cast<int>(std::floor(center.y)) - radius);
    const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(center.y)) + radius);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - center.x;
        const double dy = y - center.y;
        const double w = splat_kernel(dx * dx + dy * dy, sigma);
        double* cell = grid.cell(y, x);
        cell[kChanDispX] += w * disp.x;
        cell[kChanDispY] += w * disp.y;
        cell[kChanDepth] += w * gt_mesh.vertices[k].z;
        cell[kChanDensity] += w;
      }
  }

  if (noise_level != 0.0) {
    const CounterRng rng(seed);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        double* cell = grid.cell(y, x);
        for (int c = kNumSignalChannels; c < spec.channels; ++c)
          cell[c] = noise_level * rng.normal(0xfeedu, y, x, c);
      }
  }
  return grid;
}

}  // namespace dne
