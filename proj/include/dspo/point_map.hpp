#pragma once

// Deformable neural point cloud: anchoring from proxy depth, radius-based
// density control, rigid re-anchoring and neighbor feature interpolation.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dspo/depth_fusion.hpp"
#include "dspo/errors.hpp"
#include "dspo/geometry.hpp"
#include "dspo/rng.hpp"

namespace dspo {

inline constexpr int kFeatureDim = 32;
using Feature = Eigen::Matrix<double, kFeatureDim, 1>;

enum class RaySlot : std::uint8_t { kNear = 0, kCenter = 1, kFar = 2 };

inline double slot_factor(RaySlot s, double rho) {
  switch (s) {
    case RaySlot::kNear: return 1.0 - rho;
    case RaySlot::kCenter: return 1.0;
    case RaySlot::kFar: return 1.0 + rho;
  }
  return 1.0;
}

struct NeuralPoint {
  Vec3 p = Vec3::Zero();
  Feature f_g = Feature::Zero();
  Feature f_c = Feature::Zero();
  int anchor_frame = 0;
  int u = 0, v = 0;
  double anchor_depth = 0.0;  // center depth D of the triple
  RaySlot slot = RaySlot::kCenter;
  std::uint64_t id = 0;
};

struct MapConfig {
  double rho = 0.05;
  double beta1 = -0.4;
  double beta2 = 0.0;
  double r_u = 0.027;
  double r_l = 0.007;
  int samples_uniform = 100;   // X
  int samples_gradient = 50;   // Y
  double feature_sigma = 0.01;

  void validate() const {
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("map: rho must lie in (0, 1)");
    if (!(r_l > 0.0 && r_l <= r_u)) throw ConfigError("map: need 0 < r_l <= r_u");
    if (samples_uniform < 0 || samples_gradient < 0) throw ConfigError("map: negative sample count");
    if (!(feature_sigma >= 0.0)) throw ConfigError("map: feature_sigma must be >= 0");
  }
};

/// r = D * max(min(beta1 * grad + beta2, r_u), r_l).
inline double search_radius(double depth, double grad_mag, const MapConfig& cfg) {
  return depth * std::max(std::min(cfg.beta1 * grad_mag + cfg.beta2, cfg.r_u), cfg.r_l);
}

inline double luminance(const Vec3& c) { return 0.299 * c.x() + 0.587 * c.y() + 0.114 * c.z(); }

/// Central-difference luminance gradient magnitude. Border pixels use the
/// one-sided difference.
inline ScalarMap gradient_magnitude(const Image& img) {
  const int w = img.width(), h = img.height();
  ScalarMap out(w, h, 0.0);
  auto lum = [&](int u, int v) { return luminance(img(u, v)); };
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const int ua = std::max(u - 1, 0), ub = std::min(u + 1, w - 1);
      const int va = std::max(v - 1, 0), vb = std::min(v + 1, h - 1);
      const double gx = ub > ua ? (lum(ub, v) - lum(ua, v)) / (ub - ua) : 0.0;
      const double gy = vb > va ? (lum(u, vb) - lum(u, va)) / (vb - va) : 0.0;
      out(u, v) = std::hypot(gx, gy);
    }
  return out;
}

/// Per-frame anchoring state used to re-anchor points after updates.
struct AnchorFrame {
  SE3Pose pose;
  DepthMap proxy;
  Mask proxy_valid;
};

struct NeighborWeights {
  bool found = false;
  std::vector<std::pair<std::size_t, double>> weights;  // (point index, normalized weight)
};

struct QueryResult {
  Feature f_g = Feature::Zero();
  Feature f_c = Feature::Zero();
  bool found = false;
};

class NeuralPointCloud {
 public:
  NeuralPointCloud() = default;
  explicit NeuralPointCloud(MapConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const MapConfig& config() const { return cfg_; }
  const std::vector<NeuralPoint>& points() const { return points_; }
  std::vector<NeuralPoint>& mutable_points() { return points_; }  // features only; positions via deform
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const std::map<int, AnchorFrame>& anchor_frames() const { return frames_; }
  double cell_size() const { return cell_; }

  /// Appends an anchored triple and returns the index of its first point.
  std::size_t add_triple(int frame, int u, int v, double depth, const SE3Pose& pose, const Intrinsics& k,
                         const Feature* f_g = nullptr, const Feature* f_c = nullptr) {
    const std::size_t first = points_.size();
    const Vec3 ray = k.ray(u, v);
    for (RaySlot s : {RaySlot::kNear, RaySlot::kCenter, RaySlot::kFar}) {
      NeuralPoint pt;
      pt.anchor_frame = frame;
      pt.u = u;
      pt.v = v;
      pt.anchor_depth = depth;
      pt.slot = s;
      pt.p = pose * ((slot_factor(s, cfg_.rho) * depth) * ray);
      pt.id = next_id_++;
      if (f_g) pt.f_g = f_g[static_cast<int>(s)];
      if (f_c) pt.f_c = f_c[static_cast<int>(s)];
      points_.push_back(pt);
    }
    if (grid_.empty() || cfg_.r_u * depth * (1.0 + cfg_.rho) > cell_) {
      rebuild_index();
    } else {
      for (std::size_t i = first; i < points_.size(); ++i) {
        const auto c = cell_of(points_[i].p);
        grid_[key(c[0], c[1], c[2])].push_back(i);
      }
    }
    return first;
  }

  void set_anchor_frame(int frame, AnchorFrame state) { frames_[frame] = std::move(state); }

  /// Indices of points within `radius` of x, sorted by (distance, id).
  std::vector<std::size_t> neighbors(const Vec3& x, double radius) const {
    std::vector<std::size_t> out;
    if (points_.empty() || !(radius > 0.0)) return out;
    const auto lo = cell_of(x - Vec3::Constant(radius));
    const auto hi = cell_of(x + Vec3::Constant(radius));
    const double r2 = radius * radius;
    const auto span = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    if (span > static_cast<std::int64_t>(grid_.size()) * 4 + 64) {
      // Radius much larger than a cell: a linear scan is cheaper.
      for (std::size_t i = 0; i < points_.size(); ++i)
        if ((points_[i].p - x).squaredNorm() <= r2) out.push_back(i);
    } else {
      for (std::int64_t a = lo[0]; a <= hi[0]; ++a)
        for (std::int64_t b = lo[1]; b <= hi[1]; ++b)
          for (std::int64_t c = lo[2]; c <= hi[2]; ++c) {
            auto it = grid_.find(key(a, b, c));
            if (it == grid_.end()) continue;
            for (std::size_t i : it->second)
              if ((points_[i].p - x).squaredNorm() <= r2) out.push_back(i);
          }
    }
    std::sort(out.begin(), out.end(), [&](std::size_t i, std::size_t j) {
      const double di = (points_[i].p - x).squaredNorm(), dj = (points_[j].p - x).squaredNorm();
      return di != dj ? di < dj : points_[i].id < points_[j].id;
    });
    return out;
  }

  /// Inverse-squared-distance weights of the 8 nearest points within 2r.
  /// Fewer than two neighbors yields found = false. A neighbor closer than
  /// 1e-9 takes the whole weight.
  NeighborWeights neighbor_weights(const Vec3& x, double r) const {
    NeighborWeights out;
    auto nb = neighbors(x, 2.0 * r);
    if (nb.size() < 2) return out;
    out.found = true;
    if (nb.size() > 8) nb.resize(8);
    if ((points_[nb[0]].p - x).norm() < 1e-9) {
      out.weights.emplace_back(nb[0], 1.0);
      return out;
    }
    double total = 0.0;
    for (std::size_t i : nb) total += 1.0 / (points_[i].p - x).squaredNorm();
    for (std::size_t i : nb) out.weights.emplace_back(i, (1.0 / (points_[i].p - x).squaredNorm()) / total);
    return out;
  }

  /// Feature blend for previously selected neighbors, using current features.
  QueryResult interpolate(const NeighborWeights& nw) const {
    QueryResult q;
    q.found = nw.found;
    if (!nw.found) return q;
    for (const auto& [i, w] : nw.weights) {
      q.f_g += w * points_[i].f_g;
      q.f_c += w * points_[i].f_c;
    }
    return q;
  }

  QueryResult query_features(const Vec3& x, double r) const { return interpolate(neighbor_weights(x, r)); }

  /// Rigidly re-anchors the triples of every updated frame. Frames absent from
  /// both maps are untouched. Pixels without an updated proxy depth use the
  /// least-squares scale between the old and new proxy.
  void deform(const std::map<int, SE3Pose>& poses, const std::map<int, ProxyDepth>& proxies,
              const Intrinsics& k) {
    std::map<int, std::pair<AnchorFrame, double>> updated;
    for (auto& [frame, state] : frames_) {
      const auto pit = poses.find(frame);
      const auto dit = proxies.find(frame);
      if (pit == poses.end() && dit == proxies.end()) continue;
      AnchorFrame next = state;
      if (pit != poses.end()) next.pose = pit->second;
      if (dit != proxies.end()) {
        next.proxy = dit->second.depth;
        next.proxy_valid = dit->second.defined();
      }
      const double s = dit == proxies.end() ? 1.0 : depth_rescale(state, next);
      updated.emplace(frame, std::make_pair(std::move(next), s));
    }
    if (updated.empty()) return;
    for (auto& pt : points_) {
      const auto it = updated.find(pt.anchor_frame);
      if (it == updated.end()) continue;
      const AnchorFrame& next = it->second.first;
      double depth;
      if (!next.proxy.empty() && next.proxy_valid(pt.u, pt.v))
        depth = next.proxy(pt.u, pt.v);
      else
        depth = it->second.second * pt.anchor_depth;
      pt.anchor_depth = depth;
      pt.p = next.pose * ((slot_factor(pt.slot, cfg_.rho) * depth) * k.ray(pt.u, pt.v));
    }
    for (auto& [frame, state] : updated) frames_[frame] = std::move(state.first);
    rebuild_index();
  }

  /// True when the frame's pose moved by more than `pose_tol` or its proxy
  /// differs from the one the points were last anchored with.
  bool needs_deform(int frame, const SE3Pose& pose, const ProxyDepth* proxy, double pose_tol = 1e-9) const {
    const auto it = frames_.find(frame);
    if (it == frames_.end()) return false;
    const double dp = (it->second.pose.matrix3x4() - pose.matrix3x4()).cwiseAbs().maxCoeff();
    if (dp > pose_tol) return true;
    if (proxy && !(proxy->depth == it->second.proxy && proxy->defined() == it->second.proxy_valid)) return true;
    return false;
  }

  void rebuild_index() {
    grid_.clear();
    double max_depth = 0.0;
    for (const auto& pt : points_) max_depth = std::max(max_depth, pt.anchor_depth * (1.0 + cfg_.rho));
    cell_ = std::max(cfg_.r_u * max_depth, 1e-6);
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const auto c = cell_of(points_[i].p);
      grid_[key(c[0], c[1], c[2])].push_back(i);
    }
  }

  std::uint64_t next_id() const { return next_id_; }
  void set_next_id(std::uint64_t id) { next_id_ = id; }

 private:
  /// Scale s minimising sum (new - s * old)^2 over co-valid pixels, or 1.
  static double depth_rescale(const AnchorFrame& old_state, const AnchorFrame& new_state) {
    if (old_state.proxy.empty() || new_state.proxy.empty()) return 1.0;
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < old_state.proxy.size(); ++p) {
      if (!old_state.proxy_valid[p] || !new_state.proxy_valid[p]) continue;
      num += old_state.proxy[p] * new_state.proxy[p];
      den += old_state.proxy[p] * old_state.proxy[p];
    }
    return den > 0.0 ? num / den : 1.0;
  }

  std::array<std::int64_t, 3> cell_of(const Vec3& x) const {
    return {static_cast<std::int64_t>(std::floor(x.x() / cell_)),
            static_cast<std::int64_t>(std::floor(x.y() / cell_)),
            static_cast<std::int64_t>(std::floor(x.z() / cell_))};
  }
  static std::uint64_t key(std::int64_t a, std::int64_t b, std::int64_t c) {
    auto h = [](std::int64_t x) { return static_cast<std::uint64_t>(x) & 0x1fffffULL; };
    return (h(a) << 42) | (h(b) << 21) | h(c);
  }

  MapConfig cfg_;
  std::vector<NeuralPoint> points_;
  std::map<int, AnchorFrame> frames_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid_;
  double cell_ = 1.0;
  std::uint64_t next_id_ = 0;
};

struct AnchorSelection {
  std::vector<std::size_t> uniform;   // pixel indices
  std::vector<std::size_t> gradient;  // pixel indices, all within the top 5Y
};

/// Chooses X pixels uniformly and Y pixels uniformly among the 5Y largest
/// gradient magnitudes, both restricted to pixels with a proxy depth and
/// drawn without replacement.
inline AnchorSelection select_anchor_pixels(const ScalarMap& grad, const Mask& candidates, int x, int y,
                                            const CounterRng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t p = 0; p < candidates.size(); ++p)
    if (candidates[p]) pool.push_back(p);
  auto draw = [&](std::vector<std::size_t> from, int count, std::uint64_t stream) {
    std::vector<std::size_t> out;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), from.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform(stream, i) * static_cast<double>(from.size() - i));
      std::swap(from[i], from[std::min(j, from.size() - 1)]);
      out.push_back(from[i]);
    }
    return out;
  };
  AnchorSelection sel;
  sel.uniform = draw(pool, x, 1);
  std::vector<std::size_t> ranked = pool;
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) { return grad[a] > grad[b]; });
  if (ranked.size() > static_cast<std::size_t>(5 * y)) ranked.resize(static_cast<std::size_t>(5 * y));
  sel.gradient = draw(ranked, y, 2);
  return sel;
}

/// Samples pixels of a keyframe and adds a triple at (1-rho)D, D, (1+rho)D
/// for each pixel whose center has no existing point within the search
/// radius. Records the frame's anchoring state. Returns the number of points
/// added.
inline std::size_t anchor_points(NeuralPointCloud& map, int frame, const SE3Pose& pose, const Image& image,
                                 const ProxyDepth& proxy, const Intrinsics& k, std::uint64_t seed) {
  const MapConfig& cfg = map.config();
  const ScalarMap grad = gradient_magnitude(image);
  const Mask defined = proxy.defined();
  const CounterRng rng = CounterRng(seed).substream(static_cast<std::uint64_t>(frame));
  const auto sel = select_anchor_pixels(grad, defined, cfg.samples_uniform, cfg.samples_gradient, rng);
  std::vector<std::size_t> pixels = sel.uniform;
  pixels.insert(pixels.end(), sel.gradient.begin(), sel.gradient.end());

  std::size_t added = 0;
  for (std::size_t p : pixels) {
    const int u = static_cast<int>(p % static_cast<std::size_t>(image.width()));
    const int v = static_cast<int>(p / static_cast<std::size_t>(image.width()));
    const double depth = proxy.depth[p];
    const Vec3 center = pose * (depth * k.ray(u, v));
    const double r = search_radius(depth, grad[p], cfg);
    if (!map.neighbors(center, r).empty()) continue;
    Feature fg[3], fc[3];
    const std::uint64_t id0 = map.next_id();
    for (int s = 0; s < 3; ++s)
      for (int c = 0; c < kFeatureDim; ++c) {
        fg[s][c] = cfg.feature_sigma * rng.normal(id0 + static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(c));
        fc[s][c] = cfg.feature_sigma *
                   rng.normal(id0 + static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(kFeatureDim + c));
      }
    map.add_triple(frame, u, v, depth, pose, k, fg, fc);
    added += 3;
  }
  map.set_anchor_frame(frame, {pose, proxy.depth, defined});
  return added;
}

namespace io_detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw ConfigError("snapshot: truncated record");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace io_detail

/// Writes header.txt and points.bin into `dir`. Records are little-endian:
/// position 3xf32, f_g 32xf32, f_c 32xf32, frame/u/v i32, depth f32, slot i32.
inline void save_map_snapshot(const NeuralPointCloud& map, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream h(dir / "header.txt");
    const auto& c = map.config();
    h.precision(17);
    h << "count = " << map.size() << "\n"
      << "feature_dim = " << kFeatureDim << "\n"
      << "rho = " << c.rho << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2 << "\nr_u = " << c.r_u
      << "\nr_l = " << c.r_l << "\nsamples_uniform = " << c.samples_uniform
      << "\nsamples_gradient = " << c.samples_gradient << "\nfeature_sigma = " << c.feature_sigma << "\n";
  }
  std::ofstream b(dir / "points.bin", std::ios::binary);
  for (const auto& pt : map.points()) {
    for (int i = 0; i < 3; ++i) io_detail::write_le(b, static_cast<float>(pt.p[i]));
    for (int i = 0; i < kFeatureDim; ++i) io_detail::write_le(b, static_cast<float>(pt.f_g[i]));
    for (int i = 0; i < kFeatureDim; ++i) io_detail::write_le(b, static_cast<float>(pt.f_c[i]));
    io_detail::write_le(b, static_cast<std::int32_t>(pt.anchor_frame));
    io_detail::write_le(b, static_cast<std::int32_t>(pt.u));
    io_detail::write_le(b, static_cast<std::int32_t>(pt.v));
    io_detail::write_le(b, static_cast<float>(pt.anchor_depth));
    io_detail::write_le(b, static_cast<std::int32_t>(pt.slot));
  }
  if (!b) throw ConfigError("snapshot: cannot write " + (dir / "points.bin").string());
}

inline NeuralPointCloud load_map_snapshot(const std::filesystem::path& dir) {
  std::ifstream h(dir / "header.txt");
  if (!h) throw ConfigError("snapshot: missing " + (dir / "header.txt").string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(h, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto num = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(std::string("snapshot: header lacks ") + key);
    return std::stod(it->second);
  };
  if (static_cast<int>(num("feature_dim")) != kFeatureDim) throw ConfigError("snapshot: feature_dim mismatch");
  MapConfig cfg;
  cfg.rho = num("rho");
  cfg.beta1 = num("beta1");
  cfg.beta2 = num("beta2");
  cfg.r_u = num("r_u");
  cfg.r_l = num("r_l");
  cfg.samples_uniform = static_cast<int>(num("samples_uniform"));
  cfg.samples_gradient = static_cast<int>(num("samples_gradient"));
  cfg.feature_sigma = num("feature_sigma");
  NeuralPointCloud map(cfg);
  const auto count = static_cast<std::size_t>(num("count"));
  std::ifstream b(dir / "points.bin", std::ios::binary);
  if (!b) throw ConfigError("snapshot: missing points.bin");
  auto& pts = map.mutable_points();
  pts.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    NeuralPoint pt;
    for (int i = 0; i < 3; ++i) pt.p[i] = io_detail::read_le<float>(b);
    for (int i = 0; i < kFeatureDim; ++i) pt.f_g[i] = io_detail::read_le<float>(b);
    for (int i = 0; i < kFeatureDim; ++i) pt.f_c[i] = io_detail::read_le<float>(b);
    pt.anchor_frame = io_detail::read_le<std::int32_t>(b);
    pt.u = io_detail::read_le<std::int32_t>(b);
    pt.v = io_detail::read_le<std::int32_t>(b);
    pt.anchor_depth = io_detail::read_le<float>(b);
    pt.slot = static_cast<RaySlot>(io_detail::read_le<std::int32_t>(b));
    pt.id = n;
    pts.push_back(pt);
  }
  map.set_next_id(count);
  map.rebuild_index();
  return map;
}

}  // namespace dspo
