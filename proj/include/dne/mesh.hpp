// Hand mesh container, the procedural articulated template, joint
// regression, and the MPVPE / MPJPE evaluation metrics.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dne/geometry.hpp"
#include "dne/rng.hpp"

namespace dne {

struct HandMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::vector<int>> joint_groups;

  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int joint_count() const { return static_cast<int>(joint_groups.size()); }
};

struct JointSet {
  std::vector<Vec3> joints;
};

inline constexpr int kTemplateVertexCount = 178;
inline constexpr int kTemplateJointCount = 21;

namespace tmpl {
// Fixed index layout of the template. Palm is two 6x6 vertex layers plus a
// wrist vertex; each finger contributes four 5-vertex rings and a tip cap.
inline constexpr int kFingers = 5;
inline constexpr int kRingSize = 5;
inline constexpr int kRingsPerFinger = 4;
inline constexpr int kPalmCols = 6;
inline constexpr int kPalmRows = 6;
inline constexpr int kPalmLayer = kPalmCols * kPalmRows;   // 36
inline constexpr int kWristVertex = 2 * kPalmLayer;        // 72
inline constexpr int kFingerBase = kWristVertex + 1;       // 73
inline constexpr int kVertsPerFinger = kRingsPerFinger * kRingSize + 1;  // 21

inline int ring_vertex(int finger, int ring, int k) {
  return kFingerBase + finger * kVertsPerFinger + ring * kRingSize + k;
}
inline int cap_vertex(int finger) {
  return kFingerBase + finger * kVertsPerFinger + kRingsPerFinger * kRingSize;
}
}  // namespace tmpl

inline double wrap_angle(double a) {
  // Wraps into [-pi, pi).
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double w = a - kTwoPi * std::floor((a + kTwoPi / 2.0) / kTwoPi);
  if (w >= kTwoPi / 2.0) w -= kTwoPi;  // guard against rounding at the seam
  return w;
}

// Builds the fixed-topology articulated hand. `pose` holds 21 joint angles
// (wrist, then MCP/PIP/DIP/TIP per finger); angles are wrapped into
// [-pi, pi). Vertices always land inside [-1, 1]^3: skinned coordinates are
// rescaled about the origin when an extreme pose would escape the box.
inline HandMesh make_template(std::uint64_t seed, const std::vector<double>& pose) {
  using namespace tmpl;
  if (static_cast<int>(pose.size()) != kTemplateJointCount)
    throw std::invalid_argument("make_template: pose must have 21 angles");
  for (double a : pose)
    if (!std::isfinite(a)) throw std::invalid_argument("make_template: non-finite pose angle");

  const CounterRng rng(seed);
  auto jitter = [&](double scale, std::uint64_t a, std::uint64_t b) {
    return 1.0 + scale * rng.uniform_in(-1.0, 1.0, 9000u, a, b);
  };

  const Vec3 wrist{0.0, -0.55, 0.0};
  const double palm_w = 0.42 * jitter(0.08, 1, 0);
  const double palm_y0 = -0.58 * jitter(0.06, 2, 0);
  const double palm_y1 = 0.02;
  const double palm_t = 0.10 * jitter(0.08, 3, 0);

  // Per-finger skeleton in the rest pose.
  const double finger_len[kFingers] = {0.85, 1.00, 1.08, 1.02, 0.85};
  const double seg_base[3] = {0.26, 0.20, 0.15};
  std::array<std::array<Vec3, kRingsPerFinger>, kFingers> joints_rest{};
  std::array<Vec3, kFingers> dir{}, axis{}, up{};
  std::array<std::array<double, kRingsPerFinger>, kFingers> radius{};
  for (int f = 0; f < kFingers; ++f) {
    const double spread = (f - 2) * 0.21 * jitter(0.05, 10, f);
    const Vec3 base{spread, palm_y1 + 0.03, 0.0};
    dir[f] = normalized(Vec3{0.30 * (f - 2) / 2.0, 1.0, 0.0});
    axis[f] = normalized(Vec3{dir[f].y, -dir[f].x, 0.0});
    up[f] = normalized(cross(axis[f], dir[f]));
    joints_rest[f][0] = base;
    double acc = 0.0;
    for (int s = 0; s < 3; ++s) {
      acc += seg_base[s] * finger_len[f] * jitter(0.12, 20 + s, f);
      joints_rest[f][s + 1] = base + acc * dir[f];
    }
    const double r0 = 0.055 * jitter(0.10, 30, f);
    for (int s = 0; s < kRingsPerFinger; ++s) radius[f][s] = r0 * (1.05 - 0.12 * s);
  }

  // Rest vertices in the fixed index layout.
  std::vector<Vec3> rest(kTemplateVertexCount);
  for (int layer = 0; layer < 2; ++layer) {
    const double z = layer == 0 ? palm_t : -palm_t;
    for (int j = 0; j < kPalmRows; ++j)
      for (int i = 0; i < kPalmCols; ++i) {
        const double x = -palm_w + 2.0 * palm_w * i / (kPalmCols - 1);
        const double y = palm_y0 + (palm_y1 - palm_y0) * j / (kPalmRows - 1);
        rest[layer * kPalmLayer + j * kPalmCols + i] = {x, y, z};
      }
  }
  rest[kWristVertex] = {0.0, palm_y0 - 0.04, 0.0};
  for (int f = 0; f < kFingers; ++f) {
    for (int s = 0; s < kRingsPerFinger; ++s)
      for (int k = 0; k < kRingSize; ++k) {
        const double t = 2.0 * 3.14159265358979323846 * k / kRingSize;
        rest[ring_vertex(f, s, k)] =
            joints_rest[f][s] + (radius[f][s] * std::cos(t)) * axis[f] +
            (radius[f][s] * std::sin(t)) * up[f];
      }
    rest[cap_vertex(f)] = joints_rest[f][3] + (0.9 * radius[f][3]) * dir[f];
  }

  // Forward kinematics. Flexions about each finger's knuckle axis share that
  // axis, so accumulated rotations compose by angle addition.
  std::vector<double> ang(pose.size());
  for (std::size_t i = 0; i < pose.size(); ++i) ang[i] = wrap_angle(pose[i]);
  const double wrist_angle = ang[0];
  auto rooted = [&](Vec3 p) {
    return rotate(p - wrist, Vec3{0, 0, 1}, wrist_angle) + wrist;
  };

  std::array<std::array<Vec3, kRingsPerFinger>, kFingers> joints_posed{};
  std::array<std::array<double, kRingsPerFinger>, kFingers> flex{};
  for (int f = 0; f < kFingers; ++f) {
    const Vec3 axis_rooted = rotate(axis[f], Vec3{0, 0, 1}, wrist_angle);
    joints_posed[f][0] = rooted(joints_rest[f][0]);
    double acc = 0.0;
    for (int s = 0; s < 3; ++s) {
      acc += ang[1 + f * 4 + s];
      flex[f][s] = acc;
      const Vec3 seg = rooted(joints_rest[f][s + 1]) - rooted(joints_rest[f][s]);
      joints_posed[f][s + 1] = joints_posed[f][s] + rotate(seg, axis_rooted, acc);
    }
    flex[f][3] = acc + ang[1 + f * 4 + 3];  // tip cap articulation
  }

  // Linear blend skinning with fixed weights: palm rigid to the root, ring s
  // blends the bones meeting at its joint, the cap follows the tip bone.
  auto skin_bone = [&](int f, int bone, Vec3 p) {
    // bone -1 = root; 0..2 = phalanges; 3 = tip.
    Vec3 q = rooted(p);
    if (bone < 0) return q;
    const Vec3 axis_rooted = rotate(axis[f], Vec3{0, 0, 1}, wrist_angle);
    const int pivot = bone;  // bone s pivots at joint s
    const Vec3 pivot_rooted = rooted(joints_rest[f][pivot]);
    return joints_posed[f][pivot] + rotate(q - pivot_rooted, axis_rooted, flex[f][bone]);
  };

  std::vector<Vec3> posed(kTemplateVertexCount);
  for (int i = 0; i <= kWristVertex; ++i) posed[i] = rooted(rest[i]);
  for (int f = 0; f < kFingers; ++f) {
    for (int s = 0; s < kRingsPerFinger; ++s)
      for (int k = 0; k < kRingSize; ++k) {
        const int idx = ring_vertex(f, s, k);
        const Vec3 a = skin_bone(f, s - 1, rest[idx]);
        const Vec3 b = skin_bone(f, s, rest[idx]);
        posed[idx] = 0.5 * (a + b);
      }
    posed[cap_vertex(f)] = skin_bone(f, 3, rest[cap_vertex(f)]);
  }

  // Containment: extreme poses may swing fingertips outside the unit box.
  double extent = 0.0;
  for (const Vec3& p : posed)
    extent = std::max({extent, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
  if (extent > 0.97) {
    const double s = 0.97 / extent;
    for (Vec3& p : posed) p = s * p;
  }

  HandMesh mesh;
  mesh.vertices = std::move(posed);

  // Faces: palm grids, palm side walls, finger tubes, tip fans.
  auto quad = [&](int a, int b, int c, int d) {
    mesh.faces.push_back({a, b, c});
    mesh.faces.push_back({a, c, d});
  };
  for (int layer = 0; layer < 2; ++layer) {
    const int off = layer * kPalmLayer;
    for (int j = 0; j + 1 < kPalmRows; ++j)
      for (int i = 0; i + 1 < kPalmCols; ++i)
        quad(off + j * kPalmCols + i, off + j * kPalmCols + i + 1,
             off + (j + 1) * kPalmCols + i + 1, off + (j + 1) * kPalmCols + i);
  }
  for (int i = 0; i + 1 < kPalmCols; ++i) {
    quad(i, i + 1, kPalmLayer + i + 1, kPalmLayer + i);
    const int top = (kPalmRows - 1) * kPalmCols;
    quad(top + i, top + i + 1, kPalmLayer + top + i + 1, kPalmLayer + top + i);
  }
  for (int j = 0; j + 1 < kPalmRows; ++j) {
    quad(j * kPalmCols, (j + 1) * kPalmCols, kPalmLayer + (j + 1) * kPalmCols,
         kPalmLayer + j * kPalmCols);
    const int right = kPalmCols - 1;
    quad(j * kPalmCols + right, (j + 1) * kPalmCols + right,
         kPalmLayer + (j + 1) * kPalmCols + right, kPalmLayer + j * kPalmCols + right);
  }
  for (int f = 0; f < kFingers; ++f) {
    for (int s = 0; s + 1 < kRingsPerFinger; ++s)
      for (int k = 0; k < kRingSize; ++k) {
        const int k1 = (k + 1) % kRingSize;
        quad(ring_vertex(f, s, k), ring_vertex(f, s, k1), ring_vertex(f, s + 1, k1),
             ring_vertex(f, s + 1, k));
      }
    for (int k = 0; k < kRingSize; ++k)
      mesh.faces.push_back({ring_vertex(f, 3, k), ring_vertex(f, 3, (k + 1) % kRingSize),
                            cap_vertex(f)});
  }

  // Joint groups: wrist vertex plus the near-wrist palm rows, then one group
  // per finger ring (tip ring also owns the cap).
  mesh.joint_groups.resize(kTemplateJointCount);
  std::vector<int>& wg = mesh.joint_groups[0];
  wg.push_back(kWristVertex);
  for (int i = 0; i < kPalmCols; ++i) {
    wg.push_back(i);
    wg.push_back(kPalmLayer + i);
  }
  for (int f = 0; f < kFingers; ++f)
    for (int s = 0; s < kRingsPerFinger; ++s) {
      std::vector<int>& g = mesh.joint_groups[1 + f * 4 + s];
      for (int k = 0; k < kRingSize; ++k) g.push_back(ring_vertex(f, s, k));
      if (s == kRingsPerFinger - 1) g.push_back(cap_vertex(f));
    }

  return mesh;
}

inline HandMesh make_template(std::uint64_t seed) {
  return make_template(seed, std::vector<double>(kTemplateJointCount, 0.0));
}

// FNV-1a over the connectivity; poses and seeds must not change it.
inline std::uint64_t topology_hash(const HandMesh& mesh) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  feed(static_cast<std::uint64_t>(mesh.vertices.size()));
  for (const auto& f : mesh.faces)
    for (int idx : f) feed(static_cast<std::uint64_t>(idx));
  feed(0xabcdef);
  for (const auto& g : mesh.joint_groups) {
    feed(static_cast<std::uint64_t>(g.size()));
    for (int idx : g) feed(static_cast<std::uint64_t>(idx));
  }
  return h;
}

inline JointSet regress_joints(const HandMesh& mesh) {
  JointSet js;
  js.joints.reserve(mesh.joint_groups.size());
  for (const auto& group : mesh.joint_groups) {
    Vec3 acc{};
    for (int idx : group) acc += mesh.vertices[idx];
    js.joints.push_back((1.0 / static_cast<double>(group.size())) * acc);
  }
  return js;
}

inline double mean_point_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                                  const char* what) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument(std::string(what) + ": size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += norm(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

inline double mpvpe(const HandMesh& pred, const HandMesh& gt) {
  return mean_point_distance(pred.vertices, gt.vertices, "mpvpe");
}

inline double mpjpe(const HandMesh& pred, const HandMesh& gt) {
  return mean_point_distance(regress_joints(pred).joints, regress_joints(gt).joints, "mpjpe");
}

inline double mpvpe_2d(const std::vector<Vec2>& pred_uv, const std::vector<Vec2>& gt_uv) {
  if (pred_uv.size() != gt_uv.size() || pred_uv.empty())
    throw std::invalid_argument("mpvpe_2d: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred_uv.size(); ++i) acc += norm(pred_uv[i] - gt_uv[i]);
  return acc / static_cast<double>(pred_uv.size());
}

// Multi-hand scenes average over the concatenated vertex set.
inline double mpvpe_concat(const std::vector<const HandMesh*>& pred,
                           const std::vector<const HandMesh*>& gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw std::invalid_argument("mpvpe_concat: hand count mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t h = 0; h < pred.size(); ++h) {
    const auto& pv = pred[h]->vertices;
    const auto& gv = gt[h]->vertices;
    if (pv.size() != gv.size()) throw std::invalid_argument("mpvpe_concat: size mismatch");
    for (std::size_t i = 0; i < pv.size(); ++i) acc += norm(pv[i] - gv[i]);
    n += pv.size();
  }
  return acc / static_cast<double>(n);
}

inline void validate_mesh(const HandMesh& mesh) {
  const int n = mesh.vertex_count();
  for (const auto& f : mesh.faces)
    for (int idx : f)
      if (idx < 0 || idx >= n) throw std::invalid_argument("mesh: face index out of range");
  std::vector<char> seen(n, 0);
  for (const auto& g : mesh.joint_groups) {
    if (g.empty()) throw std::invalid_argument("mesh: empty joint group");
    for (int idx : g) {
      if (idx < 0 || idx >= n) throw std::invalid_argument("mesh: group index out of range");
      if (seen[idx]) throw std::invalid_argument("mesh: joint groups overlap");
      seen[idx] = 1;
    }
  }
}

}  // namespace dne
