// Voxelization of per-vertex features, three-view max pooling, and the
// per-vertex gather that reads the pooled planes back.
#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "dne/linalg.hpp"
#include "dne/mesh.hpp"

namespace dne {

struct VoxelGrid {
  int resolution = 0;
  int channels = 0;
  std::vector<double> cells;       // ((ix*G + iy)*G + iz)*C + c
  std::vector<std::uint8_t> occupancy;  // (ix*G + iy)*G + iz

  double& at(int ix, int iy, int iz, int c) {
    return cells[(((static_cast<std::size_t>(ix) * resolution) + iy) * resolution + iz) *
                     channels + c];
  }
  double at(int ix, int iy, int iz, int c) const {
    return cells[(((static_cast<std::size_t>(ix) * resolution) + iy) * resolution + iz) *
                     channels + c];
  }
  bool occupied(int ix, int iy, int iz) const {
    return occupancy[(static_cast<std::size_t>(ix) * resolution + iy) * resolution + iz] != 0;
  }
};

// Min-max normalizes vertex coordinates per axis and bins them into a G^3
// lattice. An axis with zero extent sends every vertex to bin 0.
inline std::vector<std::array<int, 3>> voxel_bins(std::span<const Vec3> positions,
                                                  int resolution) {
  const int n = static_cast<int>(positions.size());
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};
  for (const Vec3& v : positions) {
    lo.x = std::min(lo.x, v.x); lo.y = std::min(lo.y, v.y); lo.z = std::min(lo.z, v.z);
    hi.x = std::max(hi.x, v.x); hi.y = std::max(hi.y, v.y); hi.z = std::max(hi.z, v.z);
  }
  auto bin = [&](double v, double l, double h) {
    const double extent = h - l;
    if (extent == 0.0) return 0;
    int b = static_cast<int>((v - l) / extent * resolution);
    return std::min(std::max(b, 0), resolution - 1);
  };
  std::vector<std::array<int, 3>> bins(n);
  for (int i = 0; i < n; ++i) {
    const Vec3& v = positions[i];
    bins[i] = {bin(v.x, lo.x, hi.x), bin(v.y, lo.y, hi.y), bin(v.z, lo.z, hi.z)};
  }
  return bins;
}

inline std::vector<std::array<int, 3>> voxel_bins(const HandMesh& mesh, int resolution) {
  return voxel_bins(std::span<const Vec3>(mesh.vertices), resolution);
}

// Cell feature = elementwise max over member vertices; empty cells hold 0.
inline VoxelGrid voxelize(const HandMesh& mesh, const Mat& features, int resolution) {
  if (features.rows() != mesh.vertex_count())
    throw std::invalid_argument("voxelize: feature row count mismatch");
  if (resolution < 1) throw std::invalid_argument("voxelize: resolution must be positive");
  const int c = features.cols();
  VoxelGrid grid;
  grid.resolution = resolution;
  grid.channels = c;
  grid.cells.assign(static_cast<std::size_t>(resolution) * resolution * resolution * c, 0.0);
  grid.occupancy.assign(static_cast<std::size_t>(resolution) * resolution * resolution, 0);
  const auto bins = voxel_bins(mesh, resolution);
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    const auto [ix, iy, iz] = bins[i];
    const std::size_t cell_idx =
        (static_cast<std::size_t>(ix) * resolution + iy) * resolution + iz;
    const double* f = features.row(i);
    double* cellv = grid.cells.data() + cell_idx * c;
    if (!grid.occupancy[cell_idx]) {
      grid.occupancy[cell_idx] = 1;
      for (int ch = 0; ch < c; ++ch) cellv[ch] = f[ch];
    } else {
      for (int ch = 0; ch < c; ++ch) cellv[ch] = std::max(cellv[ch], f[ch]);
    }
  }
  return grid;
}

// The three pooled planes: front = max over z (indexed x,y), lateral = max
// over x (indexed y,z), top = max over y (indexed x,z). Fully empty columns
// stay 0.
struct ViewPlanes {
  int resolution = 0;
  int channels = 0;
  std::vector<double> front, lateral, top;  // (a*G + b)*C + c

  double value(const std::vector<double>& plane, int a, int b, int c) const {
    return plane[(static_cast<std::size_t>(a) * resolution + b) * channels + c];
  }
};

inline ViewPlanes three_view_pool(const VoxelGrid& vox) {
  const int g = vox.resolution;
  const int c = vox.channels;
  ViewPlanes planes;
  planes.resolution = g;
  planes.channels = c;
  const std::size_t plane_size = static_cast<std::size_t>(g) * g * c;
  planes.front.assign(plane_size, 0.0);
  planes.lateral.assign(plane_size, 0.0);
  planes.top.assign(plane_size, 0.0);
  std::vector<std::uint8_t> occ_front(g * g, 0), occ_lateral(g * g, 0), occ_top(g * g, 0);
  auto fold = [c](std::vector<double>& plane, std::vector<std::uint8_t>& occ, int a, int b,
                  const double* cell, int g_) {
    double* p = plane.data() + (static_cast<std::size_t>(a) * g_ + b) * c;
    std::uint8_t& o = occ[a * g_ + b];
    if (!o) {
      o = 1;
      for (int ch = 0; ch < c; ++ch) p[ch] = cell[ch];
    } else {
      for (int ch = 0; ch < c; ++ch) p[ch] = std::max(p[ch], cell[ch]);
    }
  };
  for (int ix = 0; ix < g; ++ix)
    for (int iy = 0; iy < g; ++iy)
      for (int iz = 0; iz < g; ++iz) {
        if (!vox.occupied(ix, iy, iz)) continue;
        const double* cell =
            vox.cells.data() +
            ((static_cast<std::size_t>(ix) * g + iy) * g + iz) * c;
        fold(planes.front, occ_front, ix, iy, cell, g);
        fold(planes.lateral, occ_lateral, iy, iz, cell, g);
        fold(planes.top, occ_top, ix, iz, cell, g);
      }
  return planes;
}

struct ViewFeatures {
  Mat front, lateral, top;  // N x C each
};

// Each vertex reads the pooled plane cell its normalized coordinates fall
// into, one read per view.
inline ViewFeatures gather_view_features(const ViewPlanes& planes, const HandMesh& mesh) {
  const int n = mesh.vertex_count();
  const int c = planes.channels;
  const auto bins = voxel_bins(mesh, planes.resolution);
  ViewFeatures out;
  out.front = Mat(n, c);
  out.lateral = Mat(n, c);
  out.top = Mat(n, c);
  for (int i = 0; i < n; ++i) {
    const auto [ix, iy, iz] = bins[i];
    for (int ch = 0; ch < c; ++ch) {
      out.front(i, ch) = planes.value(planes.front, ix, iy, ch);
      out.lateral(i, ch) = planes.value(planes.lateral, iy, iz, ch);
      out.top(i, ch) = planes.value(planes.top, ix, iz, ch);
    }
  }
  return out;
}

// Fused voxelize + pool + gather that also records, per (vertex, view,
// channel), which source vertex won the max. Values are identical to the
// three-op route; the provenance drives backpropagation.
struct PooledGather {
  ViewFeatures features;
  // source vertex index per (vertex, view, channel); views: 0 front,
  // 1 lateral, 2 top. -1 where the column was empty (cannot happen for a
  // vertex's own column, kept for safety).
  std::vector<std::int32_t> source;  // (vertex*3 + view)*C + c
  int channels = 0;
};

inline PooledGather pooled_gather(std::span<const Vec3> positions, const Mat& features,
                                  int resolution) {
  if (features.rows() != static_cast<int>(positions.size()))
    throw std::invalid_argument("pooled_gather: feature row count mismatch");
  const int n = static_cast<int>(positions.size());
  const int c = features.cols();
  const int g = resolution;
  const auto bins = voxel_bins(positions, g);
  // Per plane cell: best value and source vertex per channel. First strict
  // maximum in vertex order wins, matching the cell-then-column max route.
  const std::size_t plane_cells = static_cast<std::size_t>(g) * g;
  std::vector<double> best(plane_cells * c * 3, 0.0);
  std::vector<std::int32_t> src(plane_cells * c * 3, -1);
  auto fold = [&](int view, int a, int b, int vertex) {
    const std::size_t base = (view * plane_cells + static_cast<std::size_t>(a) * g + b) * c;
    const double* f = features.row(vertex);
    for (int ch = 0; ch < c; ++ch) {
      if (src[base + ch] < 0 || f[ch] > best[base + ch]) {
        best[base + ch] = f[ch];
        src[base + ch] = vertex;
      }
    }
  };
  for (int i = 0; i < n; ++i) {
    const auto [ix, iy, iz] = bins[i];
    fold(0, ix, iy, i);
    fold(1, iy, iz, i);
    fold(2, ix, iz, i);
  }
  PooledGather out;
  out.channels = c;
  out.features.front = Mat(n, c);
  out.features.lateral = Mat(n, c);
  out.features.top = Mat(n, c);
  out.source.assign(static_cast<std::size_t>(n) * 3 * c, -1);
  for (int i = 0; i < n; ++i) {
    const auto [ix, iy, iz] = bins[i];
    const std::array<std::pair<int, int>, 3> ab{{{ix, iy}, {iy, iz}, {ix, iz}}};
    for (int view = 0; view < 3; ++view) {
      const std::size_t base =
          (view * plane_cells + static_cast<std::size_t>(ab[view].first) * g + ab[view].second) * c;
      Mat& m = view == 0 ? out.features.front : (view == 1 ? out.features.lateral : out.features.top);
      for (int ch = 0; ch < c; ++ch) {
        m(i, ch) = src[base + ch] >= 0 ? best[base + ch] : 0.0;
        out.source[(static_cast<std::size_t>(i) * 3 + view) * c + ch] = src[base + ch];
      }
    }
  }
  return out;
}

inline PooledGather pooled_gather(const HandMesh& mesh, const Mat& features, int resolution) {
  return pooled_gather(std::span<const Vec3>(mesh.vertices), features, resolution);
}

}  // namespace dne
