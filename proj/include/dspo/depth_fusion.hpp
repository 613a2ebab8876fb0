#pragma once

// Multi-view consistency filtering of tracker depth, the fused point cloud,
// scale/shift alignment of the monocular prior and proxy depth composition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dspo/errors.hpp"
#include "dspo/factor_graph.hpp"
#include "dspo/geometry.hpp"

namespace dspo {

/// Tracker depth of a keyframe: the reciprocal of its disparity.
inline DepthMap tracker_depth(const Keyframe& kf) { return disparity_to_depth(kf.disparity); }

/// Per-pixel two-view test of c against j. A pixel is consistent when its
/// unprojection and the unprojection of j's depth at the corresponding
/// location are closer than eta times the mean depth of c.
///
/// j's depth at the hit location is taken from bilinear interpolation of j's
/// disparity (exact on planar patches) and from each of the four surrounding
/// pixels along the same ray. Any candidate within the threshold counts, so
/// pixels next to silhouettes and creases are not rejected by the blend.
inline Mask two_view_check(const Keyframe& c, const Keyframe& j, const Intrinsics& k, double eta) {
  const int w = c.width(), h = c.height();
  Mask out(w, h, 0);
  const DepthMap depth_c = tracker_depth(c);
  double mean = 0.0;
  for (double z : depth_c.data()) mean += z;
  mean /= static_cast<double>(depth_c.size());
  const double threshold = eta * mean;
  const SE3Pose j_from_c = j.pose.inverse() * c.pose;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const Vec3 pc_cam = depth_c(u, v) * k.ray(u, v);
      const Vec3 in_j = j_from_c * pc_cam;
      auto px = project_camera(in_j, k);
      if (!px) continue;
      auto dj = bilinear(j.disparity, px->x(), px->y());
      if (!dj) continue;
      // Compare in j's camera frame; the rigid transform preserves distances.
      const Vec3 ray = k.ray(*px);
      auto close = [&](double d) { return d > 0.0 && (in_j - (1.0 / d) * ray).norm() < threshold; };
      bool ok = close(*dj);
      const int u0 = std::clamp(static_cast<int>(std::floor(px->x())), 0, w - 1);
      const int v0 = std::clamp(static_cast<int>(std::floor(px->y())), 0, h - 1);
      for (int dv = 0; dv < 2 && !ok; ++dv)
        for (int du = 0; du < 2 && !ok; ++du) ok = close(j.disparity(std::min(u0 + du, w - 1), std::min(v0 + dv, h - 1)));
      out(u, v) = ok;
    }
  return out;
}

struct ConsistencyResult {
  Raster<int> count;
  Mask valid;
};

/// n_c over every other keyframe, and the mask n_c >= n_min.
inline ConsistencyResult multi_view_validity(int c, std::span<const Keyframe> keyframes,
                                             const Intrinsics& k, double eta, int n_min) {
  const auto& kc = keyframes[static_cast<std::size_t>(c)];
  ConsistencyResult out{Raster<int>(kc.width(), kc.height(), 0), Mask(kc.width(), kc.height(), 0)};
  for (std::size_t j = 0; j < keyframes.size(); ++j) {
    if (static_cast<int>(j) == c) continue;
    const Mask m = two_view_check(kc, keyframes[j], k, eta);
    for (std::size_t p = 0; p < m.size(); ++p) out.count[p] += m[p];
  }
  for (std::size_t p = 0; p < out.count.size(); ++p) out.valid[p] = out.count[p] >= n_min;
  return out;
}

/// Recomputes validity masks and counts of every keyframe in the graph.
inline void update_validity(Graph& g, double eta, int n_min) {
  std::vector<ConsistencyResult> results;
  for (int c = 0; c < g.size(); ++c)
    results.push_back(multi_view_validity(c, g.keyframes, g.intrinsics, eta, n_min));
  for (int c = 0; c < g.size(); ++c) {
    g.keyframes[static_cast<std::size_t>(c)].consistency_count = std::move(results[static_cast<std::size_t>(c)].count);
    g.keyframes[static_cast<std::size_t>(c)].validity_mask = std::move(results[static_cast<std::size_t>(c)].valid);
  }
}

struct FusedPoint {
  Vec3 position;
  double depth;  // z-depth in the source keyframe
  int keyframe;
  int u, v;
};

struct FusedCloud {
  std::vector<FusedPoint> points;
};

/// Unprojects every valid depth of every keyframe.
inline FusedCloud build_fused_cloud(std::span<const Keyframe> keyframes, const Intrinsics& k) {
  FusedCloud cloud;
  for (const auto& kf : keyframes) {
    if (kf.validity_mask.empty()) continue;
    const DepthMap depth = tracker_depth(kf);
    for (int v = 0; v < kf.height(); ++v)
      for (int u = 0; u < kf.width(); ++u) {
        if (!kf.validity_mask(u, v)) continue;
        const double z = depth(u, v);
        cloud.points.push_back({kf.pose * (z * k.ray(u, v)), z, kf.index, u, v});
      }
  }
  return cloud;
}

struct FusedDepth {
  DepthMap depth;
  Mask has_value;
};

/// Nearest-depth z-buffer splat of the cloud into a view, one pixel per point.
/// Ties keep the point from the lower keyframe index. Points that originate
/// from the target keyframe reuse their stored depth verbatim.
inline FusedDepth project_fused(const FusedCloud& cloud, int target_index, const SE3Pose& pose,
                                const Intrinsics& k) {
  FusedDepth out{DepthMap(k.width, k.height, 0.0), Mask(k.width, k.height, 0)};
  Raster<int> owner(k.width, k.height, std::numeric_limits<int>::max());
  const SE3Pose world_to_cam = pose.inverse();
  for (const auto& p : cloud.points) {
    int u, v;
    double z;
    if (p.keyframe == target_index) {
      u = p.u;
      v = p.v;
      z = p.depth;
    } else {
      const Vec3 pc = world_to_cam * p.position;
      auto px = project_camera(pc, k);
      if (!px) continue;
      u = static_cast<int>(std::lround(px->x()));
      v = static_cast<int>(std::lround(px->y()));
      z = pc.z();
      if (!out.depth.contains(u, v)) continue;
    }
    const bool closer = !out.has_value(u, v) || z < out.depth(u, v) ||
                        (z == out.depth(u, v) && p.keyframe < owner(u, v));
    if (!closer) continue;
    out.depth(u, v) = z;
    out.has_value(u, v) = 1;
    owner(u, v) = p.keyframe;
  }
  return out;
}

struct ScaleShift {
  double scale = 1.0;
  double shift = 0.0;
};

/// Least squares for y ~ scale * x + shift over pixels where both masks are
/// set. Throws DegeneratePrior when fewer than two samples or x is constant.
inline ScaleShift fit_scale_shift(const ScalarMap& x, const Mask& x_valid, const ScalarMap& y,
                                  const Mask& y_valid) {
  // Centered accumulation keeps the 2x2 system well conditioned.
  double n = 0.0, mx = 0.0, my = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) {
    if (!x_valid[p] || !y_valid[p]) continue;
    n += 1.0;
    mx += x[p];
    my += y[p];
  }
  if (n < 2.0) throw DegeneratePrior();
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) {
    if (!x_valid[p] || !y_valid[p]) continue;
    const double dx = x[p] - mx;
    sxx += dx * dx;
    sxy += dx * (y[p] - my);
  }
  if (!(sxx > 1e-12 * n * std::max(mx * mx, 1e-12))) throw DegeneratePrior();
  const double scale = sxy / sxx;
  return {scale, my - scale * mx};
}

enum class ProxySource : std::uint8_t { kMissing = 0, kFused = 1, kMono = 2 };

struct ProxyDepth {
  DepthMap depth;
  Raster<std::uint8_t> source;

  bool has(int u, int v) const { return source(u, v) != static_cast<std::uint8_t>(ProxySource::kMissing); }
  Mask defined() const {
    Mask m(source.width(), source.height(), 0);
    for (std::size_t p = 0; p < source.size(); ++p) m[p] = source[p] != 0;
    return m;
  }
};

/// Fused depth where present, otherwise the aligned monocular depth.
inline ProxyDepth compose_proxy(const FusedDepth& fused, const DepthMap& mono, const Mask& mono_valid,
                                const ScaleShift& fit) {
  const int w = fused.depth.width(), h = fused.depth.height();
  ProxyDepth out{DepthMap(w, h, 0.0), Raster<std::uint8_t>(w, h, 0)};
  for (std::size_t p = 0; p < fused.depth.size(); ++p) {
    if (fused.has_value[p]) {
      out.depth[p] = fused.depth[p];
      out.source[p] = static_cast<std::uint8_t>(ProxySource::kFused);
    } else if (mono_valid[p]) {
      const double z = fit.scale * mono[p] + fit.shift;
      if (!(z > 0.0)) continue;
      out.depth[p] = z;
      out.source[p] = static_cast<std::uint8_t>(ProxySource::kMono);
    }
  }
  return out;
}

/// Full proxy construction for keyframe c from an already fused cloud. Falls
/// back to the identity alignment when the fit is degenerate.
inline ProxyDepth build_proxy(const FusedCloud& cloud, const Keyframe& kf, const Intrinsics& k) {
  const FusedDepth fused = project_fused(cloud, kf.index, kf.pose, k);
  ScaleShift fit;
  try {
    fit = fit_scale_shift(kf.mono_depth, kf.mono_valid, fused.depth, fused.has_value);
  } catch (const DegeneratePrior&) {
    fit = ScaleShift{};
  }
  return compose_proxy(fused, kf.mono_depth, kf.mono_valid, fit);
}

}  // namespace dspo
