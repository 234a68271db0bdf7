// Direct 2D-coordinate regressor: a spatial map (HW -> N, applied per
// channel) followed by a per-vertex channel map (C -> 2).
#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dne/feature_grid.hpp"
#include "dne/geometry.hpp"
#include "dne/linalg.hpp"
#include "dne/rng.hpp"

namespace dne {

struct CoordRegressor {
  Mat w_spatial;                  // N x HW
  std::vector<double> b_spatial;  // N
  Mat w_chan;                     // 2 x C
  std::vector<double> b_chan;     // 2
};

inline CoordRegressor make_regressor(int n_vertices, int hw, int channels, std::uint64_t seed,
                                     std::uint64_t tag = 0) {
  const CounterRng rng(seed);
  CoordRegressor reg;
  reg.w_spatial = Mat(n_vertices, hw);
  reg.b_spatial.assign(n_vertices, 0.0);
  reg.w_chan = Mat(2, channels);
  reg.b_chan.assign(2, 0.0);
  const double a_sp = std::sqrt(6.0 / (hw + n_vertices));
  for (int i = 0; i < n_vertices; ++i)
    for (int j = 0; j < hw; ++j)
      reg.w_spatial(i, j) = rng.uniform_in(-a_sp, a_sp, 0xce0u, tag, 0, i, j);
  const double a_ch = std::sqrt(6.0 / (channels + 2));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < channels; ++j)
      reg.w_chan(i, j) = rng.uniform_in(-a_ch, a_ch, 0xcc0u, tag, 1, i, j);
  return reg;
}

// Forward: Y1[n,c] = sum_p W1[n,p] F[p,c] + b1[n]; coords[n] = W2 Y1[n] + b2.
// The grid is treated as an (HW) x C matrix in row-major (y, x) order.
inline std::vector<Vec2> regress_coords(const CoordRegressor& reg, const FeatureGrid& grid,
                                        Mat* y1_out = nullptr) {
  const int hw = grid.height() * grid.width();
  const int c = grid.channels();
  const int n = reg.w_spatial.rows();
  if (reg.w_spatial.cols() != hw || reg.w_chan.cols() != c)
    throw std::invalid_argument("regress_coords: grid shape does not match regressor");
  Mat y1(n, c);
  const double* f = grid.values().data();
  for (int i = 0; i < n; ++i) {
    const double* wr = reg.w_spatial.row(i);
    double* yr = y1.row(i);
    for (int ch = 0; ch < c; ++ch) yr[ch] = reg.b_spatial[i];
    for (int p = 0; p < hw; ++p) {
      const double w = wr[p];
      const double* fr = f + static_cast<std::size_t>(p) * c;
      for (int ch = 0; ch < c; ++ch) yr[ch] += w * fr[ch];
    }
  }
  std::vector<Vec2> coords(n);
  for (int i = 0; i < n; ++i) {
    const double* yr = y1.row(i);
    double out[2];
    for (int k = 0; k < 2; ++k) {
      const double* wr = reg.w_chan.row(k);
      double acc = reg.b_chan[k];
      for (int ch = 0; ch < c; ++ch) acc += wr[ch] * yr[ch];
      out[k] = acc;
    }
    coords[i] = {out[0], out[1]};
  }
  if (y1_out) *y1_out = std::move(y1);
  return coords;
}

struct RegressorGrad {
  Mat w_spatial;
  std::vector<double> b_spatial;
  Mat w_chan;
  std::vector<double> b_chan;

  void init_like(const CoordRegressor& reg) {
    w_spatial = Mat(reg.w_spatial.rows(), reg.w_spatial.cols());
    b_spatial.assign(reg.b_spatial.size(), 0.0);
    w_chan = Mat(reg.w_chan.rows(), reg.w_chan.cols());
    b_chan.assign(reg.b_chan.size(), 0.0);
  }

  void accumulate(const RegressorGrad& o) {
    w_spatial += o.w_spatial;
    add_scaled(b_spatial, o.b_spatial, 1.0);
    w_chan += o.w_chan;
    add_scaled(b_chan, o.b_chan, 1.0);
  }
};

// Gradients w.r.t. regressor parameters only; the grid is input data and is
// never differentiated.
inline void regress_coords_backward(const CoordRegressor& reg, const FeatureGrid& grid,
                                    const Mat& y1, const std::vector<Vec2>& d_coords,
                                    RegressorGrad& grad) {
  const int hw = grid.height() * grid.width();
  const int c = grid.channels();
  const int n = reg.w_spatial.rows();
  Mat dy1(n, c);
  for (int i = 0; i < n; ++i) {
    const double dc[2] = {d_coords[i].x, d_coords[i].y};
    double* dyr = dy1.row(i);
    const double* yr = y1.row(i);
    for (int k = 0; k < 2; ++k) {
      grad.b_chan[k] += dc[k];
      double* gw = grad.w_chan.row(k);
      const double* wr = reg.w_chan.row(k);
      for (int ch = 0; ch < c; ++ch) {
        gw[ch] += dc[k] * yr[ch];
        dyr[ch] += dc[k] * wr[ch];
      }
    }
  }
  const double* f = grid.values().data();
  for (int i = 0; i < n; ++i) {
    const double* dyr = dy1.row(i);
    double sum = 0.0;
    for (int ch = 0; ch < c; ++ch) sum += dyr[ch];
    grad.b_spatial[i] += sum;
    double* gw = grad.w_spatial.row(i);
    for (int p = 0; p < hw; ++p) {
      const double* fr = f + static_cast<std::size_t>(p) * c;
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) acc += dyr[ch] * fr[ch];
      gw[p] += acc;
    }
  }
}

}  // namespace dne
