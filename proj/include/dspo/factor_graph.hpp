#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "dspo/errors.hpp"
#include "dspo/flow.hpp"
#include "dspo/geometry.hpp"

namespace dspo {

/// Graph node. `scale`/`shift` align the monocular prior in disparity space:
/// d ~ scale * (1 / mono_depth) + shift.
struct Keyframe {
  int index = 0;
  int timestamp = 0;
  SE3Pose pose;
  DisparityMap disparity;
  Image image;
  DepthMap mono_depth;
  Mask mono_valid;
  double scale = 1.0;
  double shift = 0.0;
  Mask validity_mask;                // multi-view consistent (low error) pixels
  Raster<int> consistency_count;     // n_c

  int width() const { return disparity.width(); }
  int height() const { return disparity.height(); }
};

struct Graph {
  Intrinsics intrinsics;
  std::vector<Keyframe> keyframes;
  std::vector<FlowEdge> edges;
  int window_begin = 0;  // active window is [window_begin, keyframes.size())
  int gauge_fixed = 2;   // leading keyframes whose poses never move

  int size() const { return static_cast<int>(keyframes.size()); }
  bool pose_fixed(int k) const { return k < gauge_fixed; }

  bool has_edge(int src, int dst) const {
    return std::any_of(edges.begin(), edges.end(),
                       [&](const FlowEdge& e) { return e.src == src && e.dst == dst; });
  }
};

/// Keyframe admission on the flow against the last keyframe. Throws EmptyFlow
/// when no pixel is valid; callers treat that as "tracking lost, add".
inline bool should_add_keyframe(const FlowEdge& flow, double tau) {
  const double mean = mean_flow_magnitude(flow);
  if (std::isnan(mean)) throw EmptyFlow();
  return mean > tau;
}

/// Mean |reprojected - pixel| of `src` into `dst` under the current estimates,
/// over pixels that land in view. Infinity when nothing lands.
inline double reprojection_flow_distance(const Graph& g, int src, int dst) {
  const auto& a = g.keyframes[static_cast<std::size_t>(src)];
  const auto& b = g.keyframes[static_cast<std::size_t>(dst)];
  const auto corr = reproject(a.disparity, a.pose, b.pose, g.intrinsics);
  double sum = 0.0;
  std::size_t n = 0;
  for (int v = 0; v < a.height(); ++v)
    for (int u = 0; u < a.width(); ++u) {
      if (!corr.valid(u, v)) continue;
      sum += (corr.field(u, v) - Vec2(u, v)).norm();
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

/// Supplies the correspondence field for a keyframe pair (src, dst).
using FlowSource = std::function<FlowEdge(int src, int dst, EdgeKind kind)>;

struct LoopClosureConfig {
  double tau_loop = 25.0;  // pixels
  int tau_t = 20;          // timestamp gap
};

/// Appends one unidirectional loop edge active -> past for every pair that is
/// close in flow but far apart in time. Returns the new edges.
inline std::vector<FlowEdge> add_loop_edges(Graph& g, const LoopClosureConfig& cfg,
                                            const FlowSource& flow) {
  std::vector<FlowEdge> added;
  for (int a = std::max(g.window_begin, 0); a < g.size(); ++a) {
    for (int p = 0; p < g.window_begin; ++p) {
      const auto& ka = g.keyframes[static_cast<std::size_t>(a)];
      const auto& kp = g.keyframes[static_cast<std::size_t>(p)];
      if (std::abs(ka.timestamp - kp.timestamp) <= cfg.tau_t) continue;
      if (g.has_edge(a, p)) continue;
      if (!(reprojection_flow_distance(g, a, p) < cfg.tau_loop)) continue;
      FlowEdge e = flow(a, p, EdgeKind::kLoop);
      e.src = a;
      e.dst = p;
      e.kind = EdgeKind::kLoop;
      g.edges.push_back(e);
      added.push_back(std::move(e));
    }
  }
  return added;
}

struct GlobalGraphConfig {
  int temporal_radius = 2;
  double spatial_radius = 25.0;  // pixels; defaults to tau_loop
};

/// Graph over all keyframes. Pairs within `temporal_radius` indices or with
/// reprojection distance below `spatial_radius` are connected in both
/// directions. Existing flow fields are reused.
inline Graph build_global_graph(const Graph& g, const GlobalGraphConfig& cfg,
                                const FlowSource& flow) {
  Graph out;
  out.intrinsics = g.intrinsics;
  out.keyframes = g.keyframes;
  out.gauge_fixed = g.gauge_fixed;
  out.window_begin = 0;
  const int n = g.size();
  std::set<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const bool temporal = j - i <= cfg.temporal_radius;
      const bool spatial = !temporal && (reprojection_flow_distance(g, i, j) < cfg.spatial_radius ||
                                         reprojection_flow_distance(g, j, i) < cfg.spatial_radius);
      if (temporal || spatial) pairs.insert({i, j});
    }
  auto fetch = [&](int s, int d) {
    for (const auto& e : g.edges)
      if (e.src == s && e.dst == d) {
        FlowEdge copy = e;
        copy.kind = EdgeKind::kGlobal;
        return copy;
      }
    FlowEdge e = flow(s, d, EdgeKind::kGlobal);
    e.src = s;
    e.dst = d;
    e.kind = EdgeKind::kGlobal;
    return e;
  };
  for (const auto& [i, j] : pairs) {
    out.edges.push_back(fetch(i, j));
    out.edges.push_back(fetch(j, i));
  }
  return out;
}

/// Rescales disparities to unit mean and translations by the same factor.
/// Returns the mean disparity before rescaling. The disparity-space prior
/// alignment is rescaled along with the disparities.
inline double normalize_scale(Graph& g) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& kf : g.keyframes)
    for (double d : kf.disparity.data())
      if (std::isfinite(d)) {
        sum += d;
        ++n;
      }
  const double mean = n ? sum / static_cast<double>(n) : 0.0;
  if (!(mean > kMinDisparity)) throw DegenerateScale(mean);
  for (auto& kf : g.keyframes) {
    for (double& d : kf.disparity.data()) d /= mean;
    kf.pose.translation() *= mean;
    kf.scale /= mean;
    kf.shift /= mean;
  }
  return mean;
}

}  // namespace dspo
