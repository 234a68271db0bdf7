// Dual Gaussian noise fields: reparameterized sampling for training and the
// deterministic rule used at inference.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dne/geometry.hpp"
#include "dne/rng.hpp"

namespace dne {

struct NoiseField {
  std::vector<Vec2> mu_2d;
  std::vector<Vec3> mu_3d;
  double gamma = 0.1;
  double delta = 1e-3;
};

struct NoiseSample {
  std::vector<Vec2> eps_2d;
  std::vector<Vec3> eps_3d;
  // Standard-normal draws, retained so gradients can be replayed.
  std::vector<Vec2> z_2d;
  std::vector<Vec3> z_3d;
};

inline double noise_sigma(double mu, double gamma, double delta) {
  return gamma * std::abs(mu) + delta;
}

inline void validate_field(const NoiseField& f) {
  if (!(f.gamma > 0.0) || !(f.delta > 0.0))
    throw std::invalid_argument("noise: gamma and delta must be positive");
  for (const Vec2& m : f.mu_2d)
    if (!finite(m)) throw std::invalid_argument("noise: non-finite mu_2d");
  for (const Vec3& m : f.mu_3d)
    if (!finite(m)) throw std::invalid_argument("noise: non-finite mu_3d");
}

namespace noise_detail {
// Stream-domain tags keep 2D and 3D draws decorrelated.
inline constexpr std::uint64_t kDomain2d = 0xd2;
inline constexpr std::uint64_t kDomain3d = 0xd3;
}  // namespace noise_detail

// eps = mu + (gamma*|mu| + delta) * z with z ~ N(0,1). Draws are addressed
// by (seed, stage, sample, domain, vertex, channel), so sampling order is
// irrelevant.
inline NoiseSample sample(const NoiseField& field, std::uint64_t rng_seed,
                          std::uint64_t stage = 0, std::uint64_t sample_index = 0) {
  validate_field(field);
  const CounterRng rng(rng_seed);
  NoiseSample s;
  s.eps_2d.resize(field.mu_2d.size());
  s.z_2d.resize(field.mu_2d.size());
  for (std::size_t k = 0; k < field.mu_2d.size(); ++k) {
    const Vec2 mu = field.mu_2d[k];
    const Vec2 z{rng.normal(stage, sample_index, noise_detail::kDomain2d, k, 0u),
                 rng.normal(stage, sample_index, noise_detail::kDomain2d, k, 1u)};
    s.z_2d[k] = z;
    s.eps_2d[k] = {mu.x + noise_sigma(mu.x, field.gamma, field.delta) * z.x,
                   mu.y + noise_sigma(mu.y, field.gamma, field.delta) * z.y};
  }
  s.eps_3d.resize(field.mu_3d.size());
  s.z_3d.resize(field.mu_3d.size());
  for (std::size_t k = 0; k < field.mu_3d.size(); ++k) {
    const Vec3 mu = field.mu_3d[k];
    const Vec3 z{rng.normal(stage, sample_index, noise_detail::kDomain3d, k, 0u),
                 rng.normal(stage, sample_index, noise_detail::kDomain3d, k, 1u),
                 rng.normal(stage, sample_index, noise_detail::kDomain3d, k, 2u)};
    s.z_3d[k] = z;
    s.eps_3d[k] = {mu.x + noise_sigma(mu.x, field.gamma, field.delta) * z.x,
                   mu.y + noise_sigma(mu.y, field.gamma, field.delta) * z.y,
                   mu.z + noise_sigma(mu.z, field.gamma, field.delta) * z.z};
  }
  return s;
}

// Inference rule: eps = mu exactly, z = 0.
inline NoiseSample inference_noise(const NoiseField& field) {
  validate_field(field);
  NoiseSample s;
  s.eps_2d = field.mu_2d;
  s.eps_3d = field.mu_3d;
  s.z_2d.assign(field.mu_2d.size(), Vec2{});
  s.z_3d.assign(field.mu_3d.size(), Vec3{});
  return s;
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// d eps / d mu = 1 + gamma * sign(mu) * z, chained with the upstream
// gradient. sign(0) = 0 by convention.
inline double reparam_factor(double mu, double gamma, double z) {
  return 1.0 + gamma * sign0(mu) * z;
}

struct NoiseGrad {
  std::vector<Vec2> mu_2d;
  std::vector<Vec3> mu_3d;
};

inline NoiseGrad sample_gradient(const NoiseField& field, const NoiseSample& s,
                                 const std::vector<Vec2>& upstream_2d,
                                 const std::vector<Vec3>& upstream_3d) {
  if (upstream_2d.size() != field.mu_2d.size() || upstream_3d.size() != field.mu_3d.size() ||
      s.z_2d.size() != field.mu_2d.size() || s.z_3d.size() != field.mu_3d.size())
    throw std::invalid_argument("sample_gradient: shape mismatch");
  NoiseGrad g;
  g.mu_2d.resize(field.mu_2d.size());
  for (std::size_t k = 0; k < field.mu_2d.size(); ++k) {
    g.mu_2d[k].x = upstream_2d[k].x * reparam_factor(field.mu_2d[k].x, field.gamma, s.z_2d[k].x);
    g.mu_2d[k].y = upstream_2d[k].y * reparam_factor(field.mu_2d[k].y, field.gamma, s.z_2d[k].y);
  }
  g.mu_3d.resize(field.mu_3d.size());
  for (std::size_t k = 0; k < field.mu_3d.size(); ++k) {
    g.mu_3d[k].x = upstream_3d[k].x * reparam_factor(field.mu_3d[k].x, field.gamma, s.z_3d[k].x);
    g.mu_3d[k].y = upstream_3d[k].y * reparam_factor(field.mu_3d[k].y, field.gamma, s.z_3d[k].y);
    g.mu_3d[k].z = upstream_3d[k].z * reparam_factor(field.mu_3d[k].z, field.gamma, s.z_3d[k].z);
  }
  return g;
}

}  // namespace dne
