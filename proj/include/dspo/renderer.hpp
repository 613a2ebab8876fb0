#pragma once

// Depth-guided volume rendering through the point map, the mapping losses
// with hand-derived gradients and the gradient-descent map optimizer.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include <Eigen/Core>

#include "dspo/depth_fusion.hpp"
#include "dspo/errors.hpp"
#include "dspo/point_map.hpp"
#include "dspo/rng.hpp"
#include "dspo/synthetic_world.hpp"

namespace dspo {

inline constexpr int kRaySamples = 10;

using ColorParamJacobian = Eigen::Matrix<double, 3, Eigen::Dynamic>;
using ColorFeatureJacobian = Eigen::Matrix<double, 3, kFeatureDim>;

/// Occupancy and color heads. Implementations clamp outputs to [0, 1].
class Decoder {
 public:
  virtual ~Decoder() = default;
  /// False when outputs ignore the interpolated features.
  virtual bool needs_features() const = 0;
  virtual double occupancy(const Vec3& p, const Feature& pg, Feature* d_pg) const = 0;
  virtual Vec3 color(const Vec3& p, const Feature& pc, const Vec3& dir, ColorFeatureJacobian* d_pc,
                     ColorParamJacobian* d_xi) const = 0;
  virtual Eigen::VectorXd params() const { return {}; }
  virtual void set_params(const Eigen::VectorXd&) {}
  Eigen::Index param_count() const { return params().size(); }
};

/// Analytic occupancy from the synthetic scene: 1 within +-rho*z/4 of the true
/// surface along the viewing ray of the current camera, else 0. Color is the
/// shaded scene color at that surface.
class OracleDecoder : public Decoder {
 public:
  OracleDecoder(const SyntheticScene& scene, double rho) : scene_(&scene), rho_(rho) {}

  void set_view(const SE3Pose& pose) { pose_ = pose; }
  bool needs_features() const override { return false; }

  double occupancy(const Vec3& p, const Feature&, Feature* d_pg) const override {
    if (d_pg) d_pg->setZero();
    const auto hit = surface(p);
    return hit && std::abs(hit->second - hit->first) < rho_ * hit->second / 4.0 ? 1.0 : 0.0;
  }

  Vec3 color(const Vec3& p, const Feature&, const Vec3&, ColorFeatureJacobian* d_pc,
             ColorParamJacobian* d_xi) const override {
    if (d_pc) d_pc->setZero();
    if (d_xi) d_xi->resize(3, 0);
    const Vec3 pc = pose_.inverse() * p;
    if (!(pc.z() > kMinDepth)) return Vec3::Zero();
    const Vec3 dir = pose_.rotation() * (pc / pc.z());
    const auto hit = cast_ray(*scene_, pose_.translation(), dir);
    return hit ? shade(*hit, dir) : Vec3::Zero();
  }

 private:
  // (z of p, z of the surface) in the current camera.
  std::optional<std::pair<double, double>> surface(const Vec3& p) const {
    const Vec3 pc = pose_.inverse() * p;
    if (!(pc.z() > kMinDepth)) return std::nullopt;
    const auto hit = cast_ray(*scene_, pose_.translation(), pose_.rotation() * (pc / pc.z()));
    if (!hit) return std::nullopt;
    return std::make_pair(pc.z(), hit->t);
  }

  const SyntheticScene* scene_;
  double rho_;
  SE3Pose pose_;
};

/// occupancy = logistic(a . P_g + b) with fixed (a, b);
/// color = clamp(W [P_c; v] + c) with trainable xi = (W row-major, c).
class TrainableDecoder : public Decoder {
 public:
  static constexpr int kInputs = kFeatureDim + 3;
  static constexpr int kParams = 3 * kInputs + 3;

  TrainableDecoder() : a_(Feature::Constant(10.0)), w_(Eigen::Matrix<double, 3, kInputs>::Zero()), c_(Vec3::Constant(0.5)) {}

  bool needs_features() const override { return true; }

  double occupancy(const Vec3&, const Feature& pg, Feature* d_pg) const override {
    const double s = 1.0 / (1.0 + std::exp(-(a_.dot(pg) + b_)));
    if (d_pg) *d_pg = s * (1.0 - s) * a_;
    return s;
  }

  Vec3 color(const Vec3&, const Feature& pc, const Vec3& dir, ColorFeatureJacobian* d_pc,
             ColorParamJacobian* d_xi) const override {
    Eigen::Matrix<double, kInputs, 1> x;
    x << pc, dir;
    const Vec3 raw = w_ * x + c_;
    Vec3 out;
    if (d_pc) d_pc->setZero();
    if (d_xi) d_xi->setZero(3, kParams);
    for (int ch = 0; ch < 3; ++ch) {
      out[ch] = std::clamp(raw[ch], 0.0, 1.0);
      if (!(raw[ch] > 0.0 && raw[ch] < 1.0)) continue;
      if (d_pc) d_pc->row(ch) = w_.row(ch).head<kFeatureDim>();
      if (d_xi) {
        d_xi->block(ch, ch * kInputs, 1, kInputs) = x.transpose();
        (*d_xi)(ch, 3 * kInputs + ch) = 1.0;
      }
    }
    return out;
  }

  Eigen::VectorXd params() const override {
    Eigen::VectorXd xi(kParams);
    for (int ch = 0; ch < 3; ++ch) xi.segment<kInputs>(ch * kInputs) = w_.row(ch).transpose();
    xi.tail<3>() = c_;
    return xi;
  }

  void set_params(const Eigen::VectorXd& xi) override {
    if (xi.size() != kParams) throw ConfigError("decoder: parameter count mismatch");
    for (int ch = 0; ch < 3; ++ch) w_.row(ch) = xi.segment<kInputs>(ch * kInputs).transpose();
    c_ = xi.tail<3>();
  }

  const Feature& occupancy_weights() const { return a_; }
  void set_occupancy_head(const Feature& a, double b) {
    a_ = a;
    b_ = b;
  }
  double occupancy_bias() const { return b_; }

 private:
  Feature a_;
  double b_ = 0.0;
  Eigen::Matrix<double, 3, kInputs> w_;
  Vec3 c_;
};

inline void save_decoder(const TrainableDecoder& d, const std::filesystem::path& file) {
  std::ofstream os(file);
  os.precision(17);
  os << "occupancy_bias = " << d.occupancy_bias() << "\noccupancy_weights =";
  for (int i = 0; i < kFeatureDim; ++i) os << ' ' << d.occupancy_weights()[i];
  os << "\nparams =";
  const auto xi = d.params();
  for (Eigen::Index i = 0; i < xi.size(); ++i) os << ' ' << xi[i];
  os << "\n";
  if (!os) throw ConfigError("decoder: cannot write " + file.string());
}

inline TrainableDecoder load_decoder(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("decoder: missing " + file.string());
  TrainableDecoder d;
  double bias = 0.0;
  Feature a = d.occupancy_weights();
  Eigen::VectorXd xi = d.params();
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    key.erase(key.find_last_not_of(' ') + 1);
    std::istringstream vals(line.substr(eq + 1));
    if (key == "occupancy_bias") {
      vals >> bias;
    } else if (key == "occupancy_weights") {
      for (int i = 0; i < kFeatureDim; ++i) vals >> a[i];
    } else if (key == "params") {
      for (Eigen::Index i = 0; i < xi.size(); ++i) vals >> xi[i];
    }
    if (vals.fail()) throw ConfigError("decoder: malformed " + key);
  }
  d.set_occupancy_head(a, bias);
  d.set_params(xi);
  return d;
}

struct RaySample {
  Vec3 position = Vec3::Zero();
  double depth = 0.0;  // z-depth in the rendering camera
  Vec3 direction = Vec3::Zero();
  double occupancy = 0.0;
  Vec3 color = Vec3::Zero();
  double weight = 0.0;  // alpha
};

/// Ten samples at z_i = (1 - rho) D + (i / 9) 2 rho D along o + z * dir, with
/// `dir` the world-space ray whose camera z-component is 1.
inline std::array<RaySample, kRaySamples> sample_ray(const Vec3& origin, const Vec3& dir, double proxy_depth,
                                                     double rho) {
  if (!(proxy_depth > 0.0)) throw MissingProxy();
  std::array<RaySample, kRaySamples> out;
  const Vec3 unit = dir.normalized();
  for (int i = 0; i < kRaySamples; ++i) {
    auto& s = out[static_cast<std::size_t>(i)];
    s.depth = i == kRaySamples - 1 ? (1.0 + rho) * proxy_depth
                                   : (1.0 - rho) * proxy_depth + (i / 9.0) * 2.0 * rho * proxy_depth;
    s.position = origin + s.depth * dir;
    s.direction = unit;
  }
  return out;
}

/// alpha_i = s_i prod_{j<i} (1 - s_j). Fills the weights in place.
inline void composite_weights(std::span<RaySample> samples) {
  double transmittance = 1.0;
  for (auto& s : samples) {
    s.weight = s.occupancy * transmittance;
    transmittance *= 1.0 - s.occupancy;
  }
}

struct PixelRender {
  double depth = 0.0;
  Vec3 color = Vec3::Zero();
  std::array<RaySample, kRaySamples> samples{};
  bool rendered() const {
    return std::any_of(samples.begin(), samples.end(), [](const RaySample& s) { return s.weight > 0.0; });
  }
};

/// Per-sample cached derivatives used for back-propagation.
struct SampleCache {
  const NeighborWeights* neighbors = nullptr;
  Feature d_occupancy = Feature::Zero();
  ColorFeatureJacobian d_color = ColorFeatureJacobian::Zero();
  ColorParamJacobian d_xi;
};

using RayNeighbors = std::array<NeighborWeights, kRaySamples>;

inline double point_radius(const NeuralPointCloud& map, double depth) {
  return search_radius(depth, 0.0, map.config());
}

/// Neighbor selections for the ten samples of a ray. They depend on point
/// positions only, so they stay valid while features change.
inline RayNeighbors ray_neighbors(const NeuralPointCloud& map, const Vec3& origin, const Vec3& dir,
                                  double proxy_depth) {
  RayNeighbors out;
  const auto samples = sample_ray(origin, dir, proxy_depth, map.config().rho);
  const double radius = point_radius(map, proxy_depth);
  for (int i = 0; i < kRaySamples; ++i)
    out[static_cast<std::size_t>(i)] = map.neighbor_weights(samples[static_cast<std::size_t>(i)].position, radius);
  return out;
}

/// Renders one pixel ray. Samples whose query finds fewer than two neighbors
/// get zero occupancy. `neighbors` may carry a precomputed selection; `cache`,
/// when given, receives derivative data that refers into `neighbors`, so pass
/// both together.
inline PixelRender render_ray(const NeuralPointCloud& map, const Decoder& decoder, const Vec3& origin,
                              const Vec3& dir, double proxy_depth, const RayNeighbors* neighbors = nullptr,
                              std::array<SampleCache, kRaySamples>* cache = nullptr) {
  PixelRender out;
  out.samples = sample_ray(origin, dir, proxy_depth, map.config().rho);
  RayNeighbors local;
  if (decoder.needs_features() && !neighbors) {
    local = ray_neighbors(map, origin, dir, proxy_depth);
    neighbors = &local;
  }
  for (int i = 0; i < kRaySamples; ++i) {
    auto& s = out.samples[static_cast<std::size_t>(i)];
    SampleCache* c = cache ? &(*cache)[static_cast<std::size_t>(i)] : nullptr;
    QueryResult q;
    if (c) c->neighbors = nullptr;
    if (decoder.needs_features()) {
      const auto& nw = (*neighbors)[static_cast<std::size_t>(i)];
      if (!nw.found) continue;
      q = map.interpolate(nw);
      if (c) c->neighbors = &nw;
    }
    s.occupancy = decoder.occupancy(s.position, q.f_g, c ? &c->d_occupancy : nullptr);
    s.color = decoder.color(s.position, q.f_c, s.direction, c ? &c->d_color : nullptr, c ? &c->d_xi : nullptr);
  }
  composite_weights(out.samples);
  for (const auto& s : out.samples) {
    out.depth += s.weight * s.depth;
    out.color += s.weight * s.color;
  }
  return out;
}

struct RenderedView {
  DepthMap depth;
  Image color;
  Mask rendered;
};

/// Renders every pixel that has a proxy depth.
inline RenderedView render_map_view(const NeuralPointCloud& map, const Decoder& decoder, const SE3Pose& pose,
                                    const Intrinsics& k, const DepthMap& proxy, const Mask& proxy_valid) {
  RenderedView out{DepthMap(k.width, k.height, 0.0), Image(k.width, k.height, Vec3::Zero()),
                   Mask(k.width, k.height, 0)};
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) {
      if (!proxy_valid(u, v) || !(proxy(u, v) > 0.0)) continue;
      const auto px = render_ray(map, decoder, pose.translation(), pose.rotation() * k.ray(u, v), proxy(u, v));
      out.depth(u, v) = px.depth;
      out.color(u, v) = px.color;
      out.rendered(u, v) = px.rendered();
    }
  return out;
}

struct LossWeights {
  double geo = 1.0;
  double pix = 1000.0;
  double color = 0.1;
  double stage1_fraction = 0.3;

  void validate() const {
    if (!(geo >= 0.0 && pix >= 0.0 && color >= 0.0)) throw ConfigError("loss weights must be >= 0");
    if (!(stage1_fraction >= 0.0 && stage1_fraction <= 1.0)) throw ConfigError("stage1_fraction outside [0, 1]");
  }
};

/// A keyframe as seen by the mapper.
struct MapFrame {
  int index = 0;
  SE3Pose pose;
  const Image* image = nullptr;
  const ProxyDepth* proxy = nullptr;
};

struct PixelSample {
  int frame = 0;  // position in the frame list
  int u = 0, v = 0;
};

/// M pixels per frame drawn without replacement among pixels with a proxy.
inline std::vector<PixelSample> sample_pixel_batch(std::span<const MapFrame> frames, int m, std::uint64_t seed) {
  std::vector<PixelSample> out;
  const CounterRng rng(seed, 0x6d61707069ULL);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& proxy = *frames[f].proxy;
    std::vector<std::size_t> pool;
    for (std::size_t p = 0; p < proxy.depth.size(); ++p)
      if (proxy.source[p] != 0 && proxy.depth[p] > 0.0) pool.push_back(p);
    const std::size_t n = std::min(pool.size(), static_cast<std::size_t>(std::max(m, 0)));
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform(static_cast<std::uint64_t>(frames[f].index), i) *
                                                  static_cast<double>(pool.size() - i));
      std::swap(pool[i], pool[std::min(j, pool.size() - 1)]);
      const int w = proxy.depth.width();
      out.push_back({static_cast<int>(f), static_cast<int>(pool[i] % static_cast<std::size_t>(w)),
                     static_cast<int>(pool[i] / static_cast<std::size_t>(w))});
    }
  }
  return out;
}

struct MapGradient {
  Eigen::MatrixXd f_g;  // kFeatureDim x points
  Eigen::MatrixXd f_c;
  Eigen::VectorXd xi;

  void reset(std::size_t points, Eigen::Index params) {
    f_g.setZero(kFeatureDim, static_cast<Eigen::Index>(points));
    f_c.setZero(kFeatureDim, static_cast<Eigen::Index>(points));
    xi.setZero(params);
  }
};

struct LossValue {
  double total = 0.0;
  double geo = 0.0;
  double pix = 0.0;
  double color = 0.0;
  long rays = 0;
};

namespace detail {

inline double sign(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace detail

/// L = w_geo L_geo + w_pix L_pix + w_color L_color, each summed over the
/// batch. Stage 1 drops the color term. When `grad` is given it receives dL
/// with respect to every point feature and the decoder parameters.
inline LossValue mapping_loss(const NeuralPointCloud& map, const Decoder& decoder, std::span<const MapFrame> frames,
                              std::span<const PixelSample> batch, const LossWeights& weights, int stage,
                              const Intrinsics& k, MapGradient* grad = nullptr,
                              const std::vector<RayNeighbors>* neighbors = nullptr) {
  LossValue out;
  const double w_color = stage == 1 ? 0.0 : weights.color;
  const Eigen::Index np = decoder.param_count();
  if (grad) grad->reset(map.size(), np);
  if (batch.empty()) return out;
  std::array<SampleCache, kRaySamples> cache;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PixelSample& px = batch[b];
    const MapFrame& fr = frames[static_cast<std::size_t>(px.frame)];
    const double proxy_d = fr.proxy->depth(px.u, px.v);
    const Vec3 dir = fr.pose.rotation() * k.ray(px.u, px.v);
    const Vec3& origin = fr.pose.translation();
    // The cache points into the neighbor selection, so it must outlive render_ray.
    RayNeighbors own;
    const RayNeighbors* nb = neighbors ? &(*neighbors)[b] : nullptr;
    if (!nb && decoder.needs_features()) {
      own = ray_neighbors(map, origin, dir, proxy_d);
      nb = &own;
    }
    const PixelRender r = render_ray(map, decoder, origin, dir, proxy_d, nb, grad ? &cache : nullptr);
    ++out.rays;

    // Geometry: |D_m - D_render|.
    const double geo_res = proxy_d - r.depth;
    out.geo += std::abs(geo_res);
    double d_depth = -weights.geo * detail::sign(geo_res);  // dL/dD_render

    // Color: sum over channels |I_m - I_render|.
    const Vec3& target = (*fr.image)(px.u, px.v);
    Vec3 d_color = Vec3::Zero();  // dL/dI_render
    if (stage != 1)
      for (int ch = 0; ch < 3; ++ch) {
        const double res = target[ch] - r.color[ch];
        out.color += std::abs(res);
        d_color[ch] = -w_color * detail::sign(res);
      }

    // Pixel warp into the other frames at the rendered depth.
    if (r.depth > 0.0) {
      const Vec3 x = origin + r.depth * dir;
      for (std::size_t f = 0; f < frames.size(); ++f) {
        if (static_cast<int>(f) == px.frame) continue;
        const auto& other = frames[f];
        const Mat3 rt = other.pose.rotation().transpose();
        const Vec3 pc = rt * (x - other.pose.translation());
        if (!(pc.z() > kMinDepth)) continue;
        const Vec2 uv(k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy);
        Vec3 du, dv;
        const auto sampled = bilinear(*other.image, uv.x(), uv.y(), nullptr, &du, &dv);
        if (!sampled) continue;
        const Vec3 res = target - *sampled;
        out.pix += res.cwiseAbs().sum();
        if (!grad) continue;
        const Vec3 dpc = rt * dir;
        const double iz = 1.0 / pc.z();
        const Vec2 duv(k.fx * (dpc.x() * iz - pc.x() * dpc.z() * iz * iz),
                       k.fy * (dpc.y() * iz - pc.y() * dpc.z() * iz * iz));
        for (int ch = 0; ch < 3; ++ch)
          d_depth += weights.pix * -detail::sign(res[ch]) * (du[ch] * duv.x() + dv[ch] * duv.y());
      }
    }
    if (!grad) continue;

    // Back-propagate through alpha compositing. With T_i the transmittance
    // before sample i and R_i the remainder rendered behind it,
    // dD/ds_i = T_i (z_i - R_i) and dI/ds_i = T_i (t_i - R^c_i).
    double rest_d = 0.0;
    Vec3 rest_c = Vec3::Zero();
    std::array<double, kRaySamples> ds{};
    for (int i = kRaySamples - 1; i >= 0; --i) {
      const auto& s = r.samples[static_cast<std::size_t>(i)];
      double t = 1.0;
      for (int j = 0; j < i; ++j) t *= 1.0 - r.samples[static_cast<std::size_t>(j)].occupancy;
      ds[static_cast<std::size_t>(i)] = d_depth * t * (s.depth - rest_d) + d_color.dot(t * (s.color - rest_c));
      rest_d = s.occupancy * s.depth + (1.0 - s.occupancy) * rest_d;
      rest_c = s.occupancy * s.color + (1.0 - s.occupancy) * rest_c;
    }
    for (int i = 0; i < kRaySamples; ++i) {
      const auto& s = r.samples[static_cast<std::size_t>(i)];
      const auto& c = cache[static_cast<std::size_t>(i)];
      if (!c.neighbors) continue;
      const Feature g_pg = ds[static_cast<std::size_t>(i)] * c.d_occupancy;
      const Vec3 g_t = s.weight * d_color;
      const Feature g_pc = c.d_color.transpose() * g_t;
      for (const auto& [idx, w] : c.neighbors->weights) {
        grad->f_g.col(static_cast<Eigen::Index>(idx)) += w * g_pg;
        grad->f_c.col(static_cast<Eigen::Index>(idx)) += w * g_pc;
      }
      if (np > 0 && c.d_xi.cols() == np) grad->xi += c.d_xi.transpose() * g_t;
    }
  }
  out.total = weights.geo * out.geo + weights.pix * out.pix + w_color * out.color;
  return out;
}

struct MapOptimizerConfig {
  int iters = 200;
  double feature_step = 0.05;
  double decoder_step = 0.005;
  double clip_norm = 1.0;
  int max_halvings = 5;
  int pixels_per_frame = 2000;  // M
};

struct MapOptimizeLog {
  double loss_start = 0.0;  // full (stage-2) objective
  double loss_end = 0.0;
  std::vector<double> stage_loss;  // per iteration, after the step, in that iteration's stage
  std::vector<bool> accepted;
  int stage1_iters = 0;
};

namespace detail {

inline void clip_columns(Eigen::MatrixXd& g, double max_norm) {
  for (Eigen::Index c = 0; c < g.cols(); ++c) {
    const double n = g.col(c).norm();
    if (n > max_norm) g.col(c) *= max_norm / n;
  }
}

}  // namespace detail

/// Gradient descent with per-vector norm clipping. Stage 1 (the first
/// stage1_fraction of iterations) moves f_g only with the color term off;
/// stage 2 moves f_g, f_c and the decoder parameters. A step that raises the
/// stage objective is halved up to max_halvings times and otherwise dropped.
inline MapOptimizeLog optimize_map(NeuralPointCloud& map, Decoder& decoder, std::span<const MapFrame> frames,
                                   const Intrinsics& k, const LossWeights& weights, const MapOptimizerConfig& cfg,
                                   std::uint64_t seed) {
  MapOptimizeLog log;
  const auto batch = sample_pixel_batch(frames, cfg.pixels_per_frame, seed);
  // Point positions are fixed here, so neighbor selections are computed once.
  std::vector<RayNeighbors> nb;
  if (decoder.needs_features()) {
    nb.reserve(batch.size());
    for (const auto& px : batch) {
      const auto& fr = frames[static_cast<std::size_t>(px.frame)];
      nb.push_back(ray_neighbors(map, fr.pose.translation(), fr.pose.rotation() * k.ray(px.u, px.v),
                                 fr.proxy->depth(px.u, px.v)));
    }
  }
  const std::vector<RayNeighbors>* pre = decoder.needs_features() ? &nb : nullptr;
  log.loss_start = mapping_loss(map, decoder, frames, batch, weights, 2, k, nullptr, pre).total;
  log.loss_end = log.loss_start;
  if (cfg.iters <= 0 || map.empty()) return log;
  log.stage1_iters = static_cast<int>(std::ceil(weights.stage1_fraction * cfg.iters));
  MapGradient grad;
  auto& pts = map.mutable_points();
  for (int it = 0; it < cfg.iters; ++it) {
    const int stage = it < log.stage1_iters ? 1 : 2;
    const double before = mapping_loss(map, decoder, frames, batch, weights, stage, k, &grad, pre).total;
    detail::clip_columns(grad.f_g, cfg.clip_norm);
    detail::clip_columns(grad.f_c, cfg.clip_norm);
    if (grad.xi.size() && grad.xi.norm() > cfg.clip_norm) grad.xi *= cfg.clip_norm / grad.xi.norm();

    std::vector<Feature> fg0(pts.size()), fc0(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      fg0[i] = pts[i].f_g;
      fc0[i] = pts[i].f_c;
    }
    const Eigen::VectorXd xi0 = decoder.params();
    double scale = 1.0;
    bool ok = false;
    double after = before;
    for (int h = 0; h <= cfg.max_halvings; ++h, scale *= 0.5) {
      for (std::size_t i = 0; i < pts.size(); ++i) {
        pts[i].f_g = fg0[i] - scale * cfg.feature_step * grad.f_g.col(static_cast<Eigen::Index>(i));
        if (stage == 2) pts[i].f_c = fc0[i] - scale * cfg.feature_step * grad.f_c.col(static_cast<Eigen::Index>(i));
      }
      if (stage == 2 && xi0.size()) decoder.set_params(xi0 - scale * cfg.decoder_step * grad.xi);
      after = mapping_loss(map, decoder, frames, batch, weights, stage, k, nullptr, pre).total;
      if (after <= before) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      for (std::size_t i = 0; i < pts.size(); ++i) {
        pts[i].f_g = fg0[i];
        pts[i].f_c = fc0[i];
      }
      if (xi0.size()) decoder.set_params(xi0);
      after = before;
    }
    log.accepted.push_back(ok);
    log.stage_loss.push_back(after);
  }
  log.loss_end = mapping_loss(map, decoder, frames, batch, weights, 2, k, nullptr, pre).total;
  return log;
}

/// Fraction of the current frame's proxy points that land inside `candidate`
/// with positive depth.
inline double frustum_overlap(const MapFrame& current, const SE3Pose& candidate, const Intrinsics& k) {
  const auto& proxy = *current.proxy;
  const SE3Pose to_cand = candidate.inverse() * current.pose;
  std::size_t total = 0, inside = 0;
  for (int v = 0; v < proxy.depth.height(); ++v)
    for (int u = 0; u < proxy.depth.width(); ++u) {
      if (!proxy.has(u, v)) continue;
      ++total;
      const auto px = project_camera(to_cand * (proxy.depth(u, v) * k.ray(u, v)), k);
      if (px && px->x() >= 0.0 && px->y() >= 0.0 && px->x() <= k.width - 1 && px->y() <= k.height - 1) ++inside;
    }
  return total ? static_cast<double>(inside) / static_cast<double>(total) : 0.0;
}

/// The current frame plus kappa others drawn at random among the 2*kappa with
/// the highest overlap. Returns positions into `frames`, ascending.
inline std::vector<int> select_mapping_frames(std::span<const MapFrame> frames, int current, int kappa,
                                              const Intrinsics& k, std::uint64_t seed) {
  std::vector<std::pair<double, int>> ranked;
  for (int f = 0; f < static_cast<int>(frames.size()); ++f)
    if (f != current)
      ranked.emplace_back(
          frustum_overlap(frames[static_cast<std::size_t>(current)], frames[static_cast<std::size_t>(f)].pose, k), f);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (ranked.size() > static_cast<std::size_t>(2 * kappa)) ranked.resize(static_cast<std::size_t>(2 * kappa));
  const CounterRng rng(seed, 0x73656cULL);
  std::vector<int> chosen{current};
  for (std::size_t i = 0; i < ranked.size() && static_cast<int>(chosen.size()) <= kappa; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform(static_cast<std::uint64_t>(current), i) *
                                                static_cast<double>(ranked.size() - i));
    std::swap(ranked[i], ranked[std::min(j, ranked.size() - 1)]);
    chosen.push_back(ranked[i].second);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace dspo
