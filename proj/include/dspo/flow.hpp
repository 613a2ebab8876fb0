#pragma once

#include <cmath>
#include <string>

#include "dspo/raster.hpp"

namespace dspo {

enum class EdgeKind { kLocal, kLoop, kGlobal };

inline const char* to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::kLocal: return "local";
    case EdgeKind::kLoop: return "loop";
    case EdgeKind::kGlobal: return "global";
  }
  return "?";
}

inline EdgeKind edge_kind_from_string(const std::string& s) {
  if (s == "loop") return EdgeKind::kLoop;
  if (s == "global") return EdgeKind::kGlobal;
  return EdgeKind::kLocal;
}

/// Predicted correspondences from keyframe `src` into keyframe `dst`, with the
/// per-pixel, per-axis confidence used as the diagonal of the weight matrix.
struct FlowEdge {
  int src = 0;
  int dst = 0;
  Raster<Vec2> target;
  Raster<Vec2> weight;
  EdgeKind kind = EdgeKind::kLocal;

  int width() const { return target.width(); }
  int height() const { return target.height(); }
};

/// Mean displacement |target - pixel| over pixels with positive weight.
/// Returns NaN when no pixel carries weight.
inline double mean_flow_magnitude(const FlowEdge& e) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int v = 0; v < e.height(); ++v)
    for (int u = 0; u < e.width(); ++u) {
      const Vec2& w = e.weight(u, v);
      if (!(w.x() > 0.0 && w.y() > 0.0)) continue;
      sum += (e.target(u, v) - Vec2(u, v)).norm();
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

}  // namespace dspo
