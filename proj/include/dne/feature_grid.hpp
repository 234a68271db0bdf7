// Image-aligned feature grid with clamped bilinear interpolation.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dne/geometry.hpp"

namespace dne {

// H x W x C scalar field, row-major (y, x, c); channels are contiguous.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(int height, int width, int channels)
      : h_(height), w_(width), c_(channels),
        values_(static_cast<std::size_t>(height) * width * channels, 0.0) {
    if (height < 2 || width < 2 || channels < 1)
      throw std::invalid_argument("FeatureGrid: need H,W >= 2 and C >= 1");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }

  double& at(int y, int x, int c) { return values_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return values_[index(y, x, c)]; }

  const double* cell(int y, int x) const { return values_.data() + index(y, x, 0); }
  double* cell(int y, int x) { return values_.data() + index(y, x, 0); }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * w_ + x) * c_ + c;
  }
  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> values_;
};

namespace interp_detail {

struct AxisCoord {
  int i0 = 0;      // lower cell index
  double frac = 0; // fractional offset in [0, 1]
  bool clamped = false;
};

inline AxisCoord resolve(double q, int extent) {
  AxisCoord a;
  if (q <= 0.0) {
    a.i0 = 0;
    a.frac = 0.0;
    a.clamped = q < 0.0;
    return a;
  }
  const double hi = static_cast<double>(extent - 1);
  if (q >= hi) {
    a.i0 = extent - 2;
    a.frac = 1.0;
    a.clamped = q > hi;
    return a;
  }
  a.i0 = static_cast<int>(q);
  if (a.i0 > extent - 2) a.i0 = extent - 2;
  a.frac = q - a.i0;
  return a;
}

}  // namespace interp_detail

// Bilinear interpolation; queries outside [0,W-1]x[0,H-1] clamp to the
// border. uv.x runs along the width axis, uv.y along the height axis.
inline void interpolate_into(const FeatureGrid& g, Vec2 uv, double* out) {
  if (!finite(uv)) throw std::invalid_argument("interpolate: non-finite query");
  const auto ax = interp_detail::resolve(uv.x, g.width());
  const auto ay = interp_detail::resolve(uv.y, g.height());
  const double fx = ax.frac, fy = ay.frac;
  const double w00 = (1 - fx) * (1 - fy);
  const double w10 = fx * (1 - fy);
  const double w01 = (1 - fx) * fy;
  const double w11 = fx * fy;
  const double* c00 = g.cell(ay.i0, ax.i0);
  const double* c10 = g.cell(ay.i0, ax.i0 + 1);
  const double* c01 = g.cell(ay.i0 + 1, ax.i0);
  const double* c11 = g.cell(ay.i0 + 1, ax.i0 + 1);
  for (int c = 0; c < g.channels(); ++c)
    out[c] = w00 * c00[c] + w10 * c10[c] + w01 * c01[c] + w11 * c11[c];
}

inline std::vector<double> interpolate(const FeatureGrid& g, Vec2 uv) {
  std::vector<double> out(g.channels());
  interpolate_into(g, uv, out.data());
  return out;
}

// Gradient of sum_c upstream[c] * interpolate(g, uv)[c] with respect to uv.
// Clamped axes contribute zero (the query sits on a constant extension).
inline Vec2 interpolate_pos_gradient(const FeatureGrid& g, Vec2 uv, const double* upstream) {
  const auto ax = interp_detail::resolve(uv.x, g.width());
  const auto ay = interp_detail::resolve(uv.y, g.height());
  const double fx = ax.frac, fy = ay.frac;
  const double* c00 = g.cell(ay.i0, ax.i0);
  const double* c10 = g.cell(ay.i0, ax.i0 + 1);
  const double* c01 = g.cell(ay.i0 + 1, ax.i0);
  const double* c11 = g.cell(ay.i0 + 1, ax.i0 + 1);
  double gx = 0.0, gy = 0.0;
  for (int c = 0; c < g.channels(); ++c) {
    const double up = upstream[c];
    gx += up * ((c10[c] - c00[c]) * (1 - fy) + (c11[c] - c01[c]) * fy);
    gy += up * ((c01[c] - c00[c]) * (1 - fx) + (c11[c] - c10[c]) * fx);
  }
  return {ax.clamped ? 0.0 : gx, ay.clamped ? 0.0 : gy};
}

}  // namespace dne
