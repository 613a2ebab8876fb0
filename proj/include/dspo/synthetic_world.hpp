#pragma once

// Analytic scenes standing in for real sequences: ray-cast depth and shading,
// correspondence oracles and corrupted monocular depth.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dspo/errors.hpp"
#include "dspo/flow.hpp"
#include "dspo/geometry.hpp"
#include "dspo/keyvalue.hpp"
#include "dspo/rng.hpp"

namespace dspo {

/// Axis-aligned box. Face order: -x, +x, -y, +y, -z, +z. An inward box is
/// seen from inside (a room).
struct BoxPrimitive {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();
  std::array<Vec3, 6> face_albedo{};
  bool inward = false;
};

struct SpherePrimitive {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  Vec3 albedo = Vec3::Constant(0.5);
};

struct SyntheticScene {
  std::vector<BoxPrimitive> boxes;
  std::vector<SpherePrimitive> spheres;
  std::vector<SE3Pose> trajectory;
  Intrinsics intrinsics;

  std::size_t size() const { return trajectory.size(); }

  /// Diagonal of the bounding box of all primitives.
  double diameter() const {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const auto& b : boxes) {
      lo = lo.cwiseMin(b.lo);
      hi = hi.cwiseMax(b.hi);
    }
    for (const auto& s : spheres) {
      lo = lo.cwiseMin(s.center - Vec3::Constant(s.radius));
      hi = hi.cwiseMax(s.center + Vec3::Constant(s.radius));
    }
    return (boxes.empty() && spheres.empty()) ? 0.0 : (hi - lo).norm();
  }
};

struct RayHit {
  double t = 0.0;  // along the unnormalized direction
  Vec3 normal = Vec3::Zero();
  Vec3 albedo = Vec3::Zero();
};

struct OracleObservation {
  Image image;
  DepthMap gt_depth;
  Mask valid;
  int frame_index = 0;
};

inline const Vec3& light_direction() {
  static const Vec3 l = Vec3(0.5, -1.0, 0.3).normalized();
  return l;
}

inline constexpr double kAmbient = 0.3;

namespace detail {

inline std::optional<RayHit> intersect_box(const BoxPrimitive& b, const Vec3& o, const Vec3& d) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int face_min = -1, face_max = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return std::nullopt;
      continue;
    }
    double t0 = (b.lo[a] - o[a]) / d[a];
    double t1 = (b.hi[a] - o[a]) / d[a];
    int f0 = 2 * a, f1 = 2 * a + 1;
    if (t0 > t1) {
      std::swap(t0, t1);
      std::swap(f0, f1);
    }
    if (t0 > tmin) { tmin = t0; face_min = f0; }
    if (t1 < tmax) { tmax = t1; face_max = f1; }
  }
  if (tmin > tmax) return std::nullopt;
  constexpr double eps = 1e-9;
  double t;
  int face;
  if (b.inward) {
    if (!(tmin < eps && tmax > eps)) return std::nullopt;  // origin must be inside
    t = tmax;
    face = face_max;
  } else {
    if (!(tmin > eps)) return std::nullopt;
    t = tmin;
    face = face_min;
  }
  if (face < 0) return std::nullopt;
  Vec3 n = Vec3::Zero();
  n[face / 2] = (face % 2 == 0) ? -1.0 : 1.0;
  if (b.inward) n = -n;
  return RayHit{t, n, b.face_albedo[face]};
}

inline std::optional<RayHit> intersect_sphere(const SpherePrimitive& s, const Vec3& o,
                                              const Vec3& d) {
  const Vec3 oc = o - s.center;
  const double a = d.squaredNorm();
  const double half_b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = half_b * half_b - a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = (-half_b - sq) / a;
  if (!(t > 1e-9)) return std::nullopt;  // camera inside a sphere is unsupported
  const Vec3 n = (o + t * d - s.center) / s.radius;
  // Latitude shading of the base colour gives every sphere point its own albedo.
  const Vec3 albedo = s.albedo * (0.85 + 0.15 * n.y());
  return RayHit{t, n, albedo};
}

}  // namespace detail

/// Nearest hit along o + t d for t > 0. `d` need not be unit length.
inline std::optional<RayHit> cast_ray(const SyntheticScene& scene, const Vec3& o, const Vec3& d) {
  std::optional<RayHit> best;
  auto consider = [&](const std::optional<RayHit>& h) {
    if (h && (!best || h->t < best->t)) best = h;
  };
  for (const auto& b : scene.boxes) consider(detail::intersect_box(b, o, d));
  for (const auto& s : scene.spheres) consider(detail::intersect_sphere(s, o, d));
  return best;
}

inline Vec3 shade(const RayHit& hit, const Vec3& ray_dir) {
  Vec3 n = hit.normal;
  if (n.dot(ray_dir) > 0.0) n = -n;
  const double lambert = std::max(0.0, n.dot(light_direction()));
  return hit.albedo * (kAmbient + (1.0 - kAmbient) * lambert);
}

/// Ray-cast z-depth and shaded colour of the scene seen from `pose`.
inline OracleObservation render_view(const SyntheticScene& scene, const SE3Pose& pose) {
  const auto& k = scene.intrinsics;
  OracleObservation obs{Image(k.width, k.height, Vec3::Zero()),
                        DepthMap(k.width, k.height, 0.0), Mask(k.width, k.height, 0), 0};
  const Vec3 origin = pose.translation();
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      // Camera ray has unit z, so the hit parameter is the z-depth.
      const Vec3 dir = pose.rotation() * k.ray(u, v);
      auto hit = cast_ray(scene, origin, dir);
      if (!hit) continue;
      obs.gt_depth(u, v) = hit->t;
      obs.valid(u, v) = 1;
      obs.image(u, v) = shade(*hit, dir);
    }
  }
  return obs;
}

inline OracleObservation render_observation(const SyntheticScene& scene, std::size_t pose_index) {
  if (pose_index >= scene.trajectory.size())
    throw std::out_of_range("pose index " + std::to_string(pose_index) + " outside trajectory");
  auto obs = render_view(scene, scene.trajectory[pose_index]);
  obs.frame_index = static_cast<int>(pose_index);
  return obs;
}

struct FlowOracleConfig {
  double noise_sigma = 0.0;  // pixels
  double conf_floor = 0.0;
  std::uint64_t seed = 0;
};

/// Ground-truth correspondences i -> j plus seeded isotropic noise. Occluded or
/// out-of-view pixels keep their geometric target but get `conf_floor` weight.
inline FlowEdge oracle_flow(const SyntheticScene& scene, int i, int j,
                            const FlowOracleConfig& cfg) {
  const auto& k = scene.intrinsics;
  const auto obs_i = render_observation(scene, static_cast<std::size_t>(i));
  const auto obs_j = render_observation(scene, static_cast<std::size_t>(j));
  const auto disp_i = depth_to_disparity(obs_i.gt_depth, &obs_i.valid);
  const SE3Pose& pose_i = scene.trajectory[static_cast<std::size_t>(i)];
  const SE3Pose& pose_j = scene.trajectory[static_cast<std::size_t>(j)];
  const auto corr = reproject(disp_i, pose_i, pose_j, k);
  const SE3Pose rel = pose_j.inverse() * pose_i;

  FlowEdge e;
  e.src = i;
  e.dst = j;
  e.target = Raster<Vec2>(k.width, k.height, Vec2::Zero());
  e.weight = Raster<Vec2>(k.width, k.height, Vec2::Zero());
  const CounterRng rng = CounterRng(cfg.seed, 0x666c6f77 /* "flow" */)
                             .substream(static_cast<std::uint64_t>(i) * 1000003u +
                                        static_cast<std::uint64_t>(j));
  const double w_valid = 1.0 / (cfg.noise_sigma * cfg.noise_sigma + 1e-6);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      if (!obs_i.valid(u, v)) {
        e.target(u, v) = Vec2(u, v);
        continue;
      }
      Vec2 tgt = corr.field(u, v);
      const Vec3 pc = rel * (obs_i.gt_depth(u, v) * k.ray(u, v));
      bool visible = pc.z() > kMinDepth;
      if (visible) {
        if (!corr.valid(u, v)) {
          // reproject() leaves invalid entries at zero; recompute the target.
          tgt = *project_camera(pc, k);
        }
        const int uj = static_cast<int>(std::lround(tgt.x()));
        const int vj = static_cast<int>(std::lround(tgt.y()));
        visible = obs_j.valid.contains(uj, vj) && obs_j.valid(uj, vj) &&
                  std::abs(obs_j.gt_depth(uj, vj) - pc.z()) <= 0.01 * pc.z();
      } else {
        tgt = Vec2(u, v);
      }
      if (cfg.noise_sigma > 0.0) {
        const std::uint64_t pix = static_cast<std::uint64_t>(v) * k.width + u;
        tgt += cfg.noise_sigma * Vec2(rng.normal(pix, 0), rng.normal(pix, 1));
      }
      e.target(u, v) = tgt;
      const double w = visible ? w_valid : cfg.conf_floor;
      e.weight(u, v) = Vec2(w, w);
    }
  }
  return e;
}

struct MonoDepth {
  DepthMap depth;
  Mask valid;
  Mask outlier;
};

struct MonoCorruption {
  double theta = 1.0;
  double gamma = 0.0;
  double noise_sigma = 0.0;   // meters
  double outlier_frac = 0.0;  // fraction of pixels scaled by U[1.3, 1.7]
  std::uint64_t seed = 0;
  int frame = 0;
};

/// Relative depth such that theta * D_mono + gamma reproduces the clean depth.
inline MonoDepth corrupt_mono_depth(const DepthMap& gt_depth, const Mask& gt_valid,
                                    const MonoCorruption& cfg) {
  if (!(cfg.theta > 0.0)) throw std::invalid_argument("mono corruption needs theta > 0");
  const int w = gt_depth.width(), h = gt_depth.height();
  MonoDepth out{DepthMap(w, h, 0.0), Mask(w, h, 0), Mask(w, h, 0)};
  const CounterRng rng = CounterRng(cfg.seed, 0x6d6f6e6f /* "mono" */)
                             .substream(static_cast<std::uint64_t>(cfg.frame));
  for (std::size_t p = 0; p < gt_depth.size(); ++p) {
    if (!gt_valid[p]) continue;
    double d = (gt_depth[p] - cfg.gamma) / cfg.theta;
    if (cfg.noise_sigma > 0.0) d += cfg.noise_sigma * rng.normal(p, 0);
    if (rng.uniform(p, 7) < cfg.outlier_frac) {
      d *= 1.3 + 0.4 * rng.uniform(p, 8);
      out.outlier[p] = 1;
    }
    out.depth[p] = std::max(d, kMinDepth);
    out.valid[p] = 1;
  }
  return out;
}

/// Camera-to-world pose at `eye` looking at `target`; world +y is down.
inline SE3Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, -1, 0)) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return {r, eye};
}

inline Intrinsics desk_intrinsics() { return {48.0, 48.0, 31.5, 23.5, 64, 48}; }

/// Poses on a horizontal circle, each looking at `target`. A full lap with no
/// repeated pose.
inline std::vector<SE3Pose> circle_trajectory(const Vec3& center, double radius, int count,
                                              const Vec3& target, double arc = 2.0 * M_PI) {
  std::vector<SE3Pose> poses;
  for (int n = 0; n < count; ++n) {
    const double a = arc * n / count;
    const Vec3 eye = center + radius * Vec3(std::sin(a), 0.0, -std::cos(a));
    poses.push_back(look_at(eye, target));
  }
  return poses;
}

/// 4 m box room with a sphere and a box inside, 24-pose loop.
inline SyntheticScene make_default_scene(int poses = 24) {
  SyntheticScene s;
  s.intrinsics = desk_intrinsics();
  BoxPrimitive room;
  room.lo = Vec3(-2.0, -1.5, -2.0);
  room.hi = Vec3(2.0, 1.5, 2.0);
  room.inward = true;
  room.face_albedo = {Vec3(0.80, 0.45, 0.40), Vec3(0.40, 0.70, 0.45), Vec3(0.85, 0.85, 0.80),
                      Vec3(0.55, 0.45, 0.35), Vec3(0.45, 0.50, 0.80), Vec3(0.75, 0.70, 0.35)};
  s.boxes.push_back(room);
  BoxPrimitive block;
  block.lo = Vec3(-0.55, 0.3, -0.45);
  block.hi = Vec3(-0.1, 1.5, 0.0);
  block.face_albedo = {Vec3(0.2, 0.3, 0.7), Vec3(0.25, 0.35, 0.75), Vec3(0.3, 0.4, 0.8),
                       Vec3(0.2, 0.3, 0.6), Vec3(0.15, 0.25, 0.65), Vec3(0.3, 0.35, 0.7)};
  s.boxes.push_back(block);
  s.spheres.push_back({Vec3(0.3, 1.0, 0.25), 0.4, Vec3(0.85, 0.3, 0.25)});
  s.trajectory = circle_trajectory(Vec3(0.0, -0.1, 0.0), 1.2, poses, Vec3(0.0, 0.5, 0.0));
  return s;
}

/// A single textureless wall 2 m in front of a handful of nearby cameras.
inline SyntheticScene make_plane_scene(int poses = 3) {
  SyntheticScene s;
  s.intrinsics = desk_intrinsics();
  BoxPrimitive wall;
  wall.lo = Vec3(-6.0, -6.0, 2.0);
  wall.hi = Vec3(6.0, 6.0, 3.0);
  wall.face_albedo.fill(Vec3(0.8, 0.5, 0.3));
  s.boxes.push_back(wall);
  for (int n = 0; n < poses; ++n) {
    const double x = 0.1 * (n - (poses - 1) / 2.0);
    s.trajectory.push_back(look_at(Vec3(x, 0.0, 0.0), Vec3(0.0, 0.0, 2.0)));
  }
  return s;
}

/// Scene from a key-value file. Keys: width height fx fy cx cy;
/// room = x0 y0 z0 x1 y1 z1; box.N = x0 y0 z0 x1 y1 z1 r g b;
/// sphere.N = cx cy cz radius r g b; trajectory.poses, trajectory.radius,
/// trajectory.center = x y z, trajectory.target = x y z, trajectory.arc (radians).
inline SyntheticScene load_scene(KeyValueFile kv, const std::string& origin) {
  SyntheticScene s;
  const auto def = desk_intrinsics();
  s.intrinsics.width = static_cast<int>(kv.get_int("width", def.width));
  s.intrinsics.height = static_cast<int>(kv.get_int("height", def.height));
  s.intrinsics.fx = kv.get_double("fx", def.fx);
  s.intrinsics.fy = kv.get_double("fy", def.fy);
  s.intrinsics.cx = kv.get_double("cx", (s.intrinsics.width - 1) / 2.0);
  s.intrinsics.cy = kv.get_double("cy", (s.intrinsics.height - 1) / 2.0);
  if (!s.intrinsics.valid()) throw ConfigError(origin + ": invalid intrinsics");

  auto need = [&](const std::string& key, std::size_t n) {
    auto v = kv.get_doubles(key, {});
    if (v.size() != n)
      throw ConfigError(origin + ": key `" + key + "` needs " + std::to_string(n) + " numbers");
    return v;
  };
  if (kv.has("room")) {
    auto v = need("room", 6);
    BoxPrimitive room;
    room.lo = Vec3(v[0], v[1], v[2]);
    room.hi = Vec3(v[3], v[4], v[5]);
    room.inward = true;
    room.face_albedo = make_default_scene(1).boxes[0].face_albedo;
    s.boxes.push_back(room);
  }
  auto check_albedo = [&](const Vec3& a, const std::string& key) {
    if ((a.array() < 0.0).any() || (a.array() > 1.0).any())
      throw ConfigError(origin + ": albedo of `" + key + "` outside [0,1]");
  };
  for (int n = 0; kv.has("box." + std::to_string(n)); ++n) {
    const std::string key = "box." + std::to_string(n);
    auto v = need(key, 9);
    BoxPrimitive b;
    b.lo = Vec3(v[0], v[1], v[2]);
    b.hi = Vec3(v[3], v[4], v[5]);
    const Vec3 a(v[6], v[7], v[8]);
    check_albedo(a, key);
    b.face_albedo.fill(a);
    s.boxes.push_back(b);
  }
  for (int n = 0; kv.has("sphere." + std::to_string(n)); ++n) {
    const std::string key = "sphere." + std::to_string(n);
    auto v = need(key, 7);
    const Vec3 a(v[4], v[5], v[6]);
    check_albedo(a, key);
    s.spheres.push_back({Vec3(v[0], v[1], v[2]), v[3], a});
  }
  const int poses = static_cast<int>(kv.get_int("trajectory.poses", 24));
  const double radius = kv.get_double("trajectory.radius", 1.2);
  const double arc = kv.get_double("trajectory.arc", 2.0 * M_PI);
  auto center = kv.get_doubles("trajectory.center", {0.0, -0.1, 0.0});
  auto target = kv.get_doubles("trajectory.target", {0.0, 0.5, 0.0});
  if (center.size() != 3 || target.size() != 3)
    throw ConfigError(origin + ": trajectory.center/target need 3 numbers");
  if (poses < 0) throw ConfigError(origin + ": trajectory.poses must be >= 0");
  s.trajectory = circle_trajectory(Vec3(center[0], center[1], center[2]), radius, poses,
                                   Vec3(target[0], target[1], target[2]), arc);
  kv.reject_unknown(origin);
  return s;
}

inline SyntheticScene load_scene_file(const std::string& path) {
  return load_scene(KeyValueFile::load(path), path);
}

}  // namespace dspo
