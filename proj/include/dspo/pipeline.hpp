#pragma once

// End-to-end run: keyframe tracking with local, loop and global optimization,
// depth fusion, map deformation and mapping, then evaluation and outputs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <json.hpp>

#include "dspo/dba.hpp"
#include "dspo/depth_fusion.hpp"
#include "dspo/dspo.hpp"
#include "dspo/errors.hpp"
#include "dspo/factor_graph.hpp"
#include "dspo/io.hpp"
#include "dspo/keyvalue.hpp"
#include "dspo/metrics.hpp"
#include "dspo/point_map.hpp"
#include "dspo/renderer.hpp"
#include "dspo/synthetic_world.hpp"

namespace dspo {

struct PipelineConfig {
  std::string scene = "default";  // "default", "plane" or a scene file path
  int frames = -1;                // trajectory prefix length; -1 keeps all
  std::uint64_t seed = 1;

  // Tracking.
  double tau = 2.25;  // keyframe admission, mean flow in pixels
  int local_neighbors = 2;
  int window = 4;
  int local_rounds = 6;
  double flow_noise = 0.0;
  double flow_conf_floor = 0.0;
  SolverConfig solver;

  bool loop_closure = true;
  LoopClosureConfig loop;
  int loop_rounds = 4;

  bool global_ba = true;
  int global_every = 20;
  int global_rounds = 6;
  bool final_global = true;
  int global_temporal_radius = 2;

  // Monocular prior corruption, depth space: D_mono = (D - gamma) / theta.
  double mono_theta = 1.5;
  double mono_gamma = 0.0;
  double mono_noise = 0.0;
  double mono_outlier_frac = 0.0;

  // Depth fusion.
  double eta = 0.01;
  int n_min = 2;

  // Mapping.
  bool mapping = true;
  MapConfig map;
  LossWeights loss;
  MapOptimizerConfig optimizer;
  int kappa = 3;

  PipelineConfig() {
    map.r_u = 0.1;
    map.r_l = 0.06;
    optimizer.iters = 8;
    optimizer.pixels_per_frame = 150;
  }

  void validate() const {
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
    if (local_neighbors < 1) throw ConfigError("local_neighbors must be >= 1");
    if (window < 2) throw ConfigError("window must be >= 2");
    if (local_rounds < 0 || loop_rounds < 0 || global_rounds < 0) throw ConfigError("rounds must be >= 0");
    if (global_every < 1) throw ConfigError("global_every must be >= 1");
    if (!(flow_noise >= 0.0) || !(flow_conf_floor >= 0.0)) throw ConfigError("flow noise/floor must be >= 0");
    if (!(mono_theta > 0.0)) throw ConfigError("mono_theta must be > 0");
    if (!(mono_outlier_frac >= 0.0 && mono_outlier_frac <= 1.0)) throw ConfigError("mono_outlier_frac outside [0, 1]");
    if (!(eta > 0.0) || n_min < 1) throw ConfigError("need eta > 0 and n_min >= 1");
    if (kappa < 0) throw ConfigError("kappa must be >= 0");
    if (!(solver.alpha1 >= 0.0 && solver.alpha2 >= 0.0)) throw ConfigError("alpha weights must be >= 0");
    if (optimizer.iters < 0 || optimizer.pixels_per_frame < 0) throw ConfigError("optimizer counts must be >= 0");
    map.validate();
    loss.validate();
  }

  /// Reads every recognised key and rejects the rest.
  static PipelineConfig from_kv(KeyValueFile kv, const std::string& origin) {
    PipelineConfig c;
    c.scene = kv.get_string("scene", c.scene);
    c.frames = static_cast<int>(kv.get_int("frames", c.frames));
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    c.tau = kv.get_double("tracking.tau", c.tau);
    c.local_neighbors = static_cast<int>(kv.get_int("tracking.local_neighbors", c.local_neighbors));
    c.window = static_cast<int>(kv.get_int("tracking.window", c.window));
    c.local_rounds = static_cast<int>(kv.get_int("tracking.local_rounds", c.local_rounds));
    c.flow_noise = kv.get_double("flow.noise_sigma", c.flow_noise);
    c.flow_conf_floor = kv.get_double("flow.conf_floor", c.flow_conf_floor);
    c.solver.alpha1 = kv.get_double("solver.alpha1", c.solver.alpha1);
    c.solver.alpha2 = kv.get_double("solver.alpha2", c.solver.alpha2);
    c.solver.lambda_init = kv.get_double("solver.lambda_init", c.solver.lambda_init);
    c.solver.max_retries = static_cast<int>(kv.get_int("solver.max_retries", c.solver.max_retries));
    c.loop_closure = kv.get_bool("loop.enabled", c.loop_closure);
    c.loop.tau_loop = kv.get_double("loop.tau_loop", c.loop.tau_loop);
    c.loop.tau_t = static_cast<int>(kv.get_int("loop.tau_t", c.loop.tau_t));
    c.loop_rounds = static_cast<int>(kv.get_int("loop.rounds", c.loop_rounds));
    c.global_ba = kv.get_bool("global.enabled", c.global_ba);
    c.global_every = static_cast<int>(kv.get_int("global.every", c.global_every));
    c.global_rounds = static_cast<int>(kv.get_int("global.rounds", c.global_rounds));
    c.final_global = kv.get_bool("global.final", c.final_global);
    c.global_temporal_radius = static_cast<int>(kv.get_int("global.temporal_radius", c.global_temporal_radius));
    c.mono_theta = kv.get_double("mono.theta", c.mono_theta);
    c.mono_gamma = kv.get_double("mono.gamma", c.mono_gamma);
    c.mono_noise = kv.get_double("mono.noise_sigma", c.mono_noise);
    c.mono_outlier_frac = kv.get_double("mono.outlier_frac", c.mono_outlier_frac);
    c.eta = kv.get_double("fusion.eta", c.eta);
    c.n_min = static_cast<int>(kv.get_int("fusion.n_min", c.n_min));
    c.mapping = kv.get_bool("map.enabled", c.mapping);
    c.map.rho = kv.get_double("map.rho", c.map.rho);
    c.map.beta1 = kv.get_double("map.beta1", c.map.beta1);
    c.map.beta2 = kv.get_double("map.beta2", c.map.beta2);
    c.map.r_u = kv.get_double("map.r_u", c.map.r_u);
    c.map.r_l = kv.get_double("map.r_l", c.map.r_l);
    c.map.samples_uniform = static_cast<int>(kv.get_int("map.samples_uniform", c.map.samples_uniform));
    c.map.samples_gradient = static_cast<int>(kv.get_int("map.samples_gradient", c.map.samples_gradient));
    c.loss.geo = kv.get_double("loss.geo", c.loss.geo);
    c.loss.pix = kv.get_double("loss.pix", c.loss.pix);
    c.loss.color = kv.get_double("loss.color", c.loss.color);
    c.loss.stage1_fraction = kv.get_double("loss.stage1_fraction", c.loss.stage1_fraction);
    c.optimizer.iters = static_cast<int>(kv.get_int("mapper.iters", c.optimizer.iters));
    c.optimizer.pixels_per_frame = static_cast<int>(kv.get_int("mapper.pixels_per_frame", c.optimizer.pixels_per_frame));
    c.optimizer.feature_step = kv.get_double("mapper.feature_step", c.optimizer.feature_step);
    c.optimizer.decoder_step = kv.get_double("mapper.decoder_step", c.optimizer.decoder_step);
    c.kappa = static_cast<int>(kv.get_int("mapper.kappa", c.kappa));
    kv.reject_unknown(origin);
    c.validate();
    return c;
  }

  static PipelineConfig load(const std::string& path) {
    auto c = from_kv(KeyValueFile::load(path), path);
    // Scene paths are relative to the config file.
    if (c.scene != "default" && c.scene != "plane") {
      const std::filesystem::path p(c.scene);
      if (p.is_relative()) c.scene = (std::filesystem::path(path).parent_path() / p).string();
    }
    return c;
  }
};

inline SyntheticScene make_scene(const PipelineConfig& cfg) {
  SyntheticScene s;
  if (cfg.scene == "default")
    s = make_default_scene(cfg.frames >= 0 ? cfg.frames : 24);
  else if (cfg.scene == "plane")
    s = make_plane_scene(cfg.frames >= 0 ? cfg.frames : 3);
  else
    s = load_scene_file(cfg.scene);
  if (cfg.frames >= 0 && static_cast<int>(s.trajectory.size()) > cfg.frames)
    s.trajectory.resize(static_cast<std::size_t>(cfg.frames));
  return s;
}

struct KeyframeLog {
  int keyframe = 0;
  int timestamp = 0;
  int local_rounds = 0;
  double local_cost = 0.0;
  int loop_edges = 0;
  bool global_run = false;
  std::size_t map_points = 0;
  double map_loss_start = 0.0;
  double map_loss_end = 0.0;
};

struct RunReport {
  int frames = 0;
  int keyframes = 0;
  std::optional<double> ate_rmse_m;
  std::optional<double> depth_l1_m;
  std::optional<double> psnr_db;
  int loop_edges = 0;
  int global_runs = 0;
  std::size_t map_points = 0;
  std::vector<KeyframeLog> log;
  std::map<std::string, double> timings;  // seconds per phase; not part of the report text

  /// `key = value` metrics followed by a JSON section.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "frames = " << frames << "\nkeyframes = " << keyframes << "\n";
    if (ate_rmse_m) os << "ate_rmse_m = " << *ate_rmse_m << "\n";
    if (depth_l1_m) os << "depth_l1_m = " << *depth_l1_m << "\n";
    if (psnr_db) os << "psnr_db = " << *psnr_db << "\n";
    os << "loop_edges = " << loop_edges << "\nglobal_runs = " << global_runs << "\nmap_points = " << map_points
       << "\n";
    os << "[json]\n" << to_json().dump(2) << "\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["frames"] = frames;
    j["keyframes"] = keyframes;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j["metrics"] = {{"ate_rmse_m", opt(ate_rmse_m)}, {"depth_l1_m", opt(depth_l1_m)}, {"psnr_db", opt(psnr_db)}};
    j["loop_edges"] = loop_edges;
    j["global_runs"] = global_runs;
    j["map_points"] = map_points;
    auto& kfs = j["iterations"] = nlohmann::json::array();
    for (const auto& l : log)
      kfs.push_back({{"keyframe", l.keyframe},
                     {"timestamp", l.timestamp},
                     {"local_rounds", l.local_rounds},
                     {"local_cost", l.local_cost},
                     {"loop_edges", l.loop_edges},
                     {"global", l.global_run},
                     {"map_points", l.map_points},
                     {"map_loss_start", l.map_loss_start},
                     {"map_loss_end", l.map_loss_end}});
    return j;
  }

  std::string timings_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : timings) os << k << " = " << v << "\n";
    return os.str();
  }
};

/// Everything a run produces in memory.
struct RunResult {
  RunReport report;
  Graph graph;
  std::vector<SE3Pose> gt_poses;  // per keyframe
  NeuralPointCloud map;
  TrainableDecoder decoder;
  std::vector<ProxyDepth> proxies;  // per keyframe, final
};

namespace detail {

class PhaseTimer {
 public:
  PhaseTimer(std::map<std::string, double>& sink, std::string name)
      : sink_(sink), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
  ~PhaseTimer() {
    sink_[name_] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::map<std::string, double>& sink_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

/// Runs `fn`, prefixing any error with the frame and phase.
template <typename Fn>
void in_phase(int frame, const char* phase, std::map<std::string, double>& timings, Fn&& fn) {
  PhaseTimer t(timings, phase);
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError("frame " + std::to_string(frame) + ", phase " + phase + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("frame " + std::to_string(frame) + ", phase " + phase + ": " + e.what());
  }
}

/// Sim(3) aligning the estimated keyframe positions onto ground truth.
inline Eigen::Matrix4d align_sim3(const std::vector<SE3Pose>& est, const std::vector<SE3Pose>& gt) {
  Eigen::Matrix3Xd a(3, static_cast<Eigen::Index>(est.size())), b(3, static_cast<Eigen::Index>(gt.size()));
  for (std::size_t i = 0; i < est.size(); ++i) {
    a.col(static_cast<Eigen::Index>(i)) = est[i].translation();
    b.col(static_cast<Eigen::Index>(i)) = gt[i].translation();
  }
  return Eigen::umeyama(a, b, true);
}

}  // namespace detail

/// Runs the full system on the synthetic scene described by `cfg`.
inline RunResult run_slam(const PipelineConfig& cfg) {
  cfg.validate();
  RunResult res;
  auto& rep = res.report;
  const SyntheticScene scene = make_scene(cfg);
  const Intrinsics& k = scene.intrinsics;
  rep.frames = static_cast<int>(scene.trajectory.size());
  Graph& g = res.graph;
  g.intrinsics = k;
  res.map = NeuralPointCloud(cfg.map);
  if (scene.trajectory.empty()) return res;

  std::map<int, OracleObservation> obs_cache;
  auto observe = [&](int frame) -> const OracleObservation& {
    auto it = obs_cache.find(frame);
    if (it == obs_cache.end()) it = obs_cache.emplace(frame, render_observation(scene, static_cast<std::size_t>(frame))).first;
    return it->second;
  };
  const FlowOracleConfig flow_cfg{cfg.flow_noise, cfg.flow_conf_floor, cfg.seed};
  const FlowSource flow = [&](int src, int dst, EdgeKind kind) {
    FlowEdge e = oracle_flow(scene, g.keyframes[static_cast<std::size_t>(src)].timestamp,
                             g.keyframes[static_cast<std::size_t>(dst)].timestamp, flow_cfg);
    e.src = src;
    e.dst = dst;
    e.kind = kind;
    return e;
  };

  auto run_global = [&](int frame) {
    detail::in_phase(frame, "global", rep.timings, [&] {
      normalize_scale(g);
      Graph global = build_global_graph(g, {cfg.global_temporal_radius, cfg.loop.tau_loop}, flow);
      dspo_optimize(global, full_problem(global), cfg.solver, cfg.global_rounds);
      g.keyframes = std::move(global.keyframes);
      ++rep.global_runs;
    });
  };

  for (int frame = 0; frame < static_cast<int>(scene.trajectory.size()); ++frame) {
    // Admission against the last keyframe.
    if (!g.keyframes.empty()) {
      bool admit = true;
      detail::in_phase(frame, "admission", rep.timings, [&] {
        const auto e = oracle_flow(scene, g.keyframes.back().timestamp, frame, flow_cfg);
        try {
          admit = should_add_keyframe(e, cfg.tau);
        } catch (const EmptyFlow&) {
          admit = true;
        }
      });
      if (!admit) continue;
    }

    const int n = g.size();
    KeyframeLog log;
    log.keyframe = n;
    log.timestamp = frame;
    detail::in_phase(frame, "keyframe", rep.timings, [&] {
      const auto& o = observe(frame);
      Keyframe kf;
      kf.index = n;
      kf.timestamp = frame;
      kf.image = o.image;
      const MonoDepth mono = corrupt_mono_depth(
          o.gt_depth, o.valid, {cfg.mono_theta, cfg.mono_gamma, cfg.mono_noise, cfg.mono_outlier_frac, cfg.seed, frame});
      kf.mono_depth = mono.depth;
      kf.mono_valid = mono.valid;
      // Bootstrap: the first two keyframes take their true poses and anchor the gauge.
      if (n < g.gauge_fixed)
        kf.pose = scene.trajectory[static_cast<std::size_t>(frame)];
      else
        kf.pose = g.keyframes.back().pose;
      if (n > 0) {
        kf.scale = g.keyframes.back().scale;
        kf.shift = g.keyframes.back().shift;
      }
      kf.disparity = DisparityMap(k.width, k.height, 0.0);
      double sum = 0.0;
      std::size_t cnt = 0;
      for (std::size_t p = 0; p < kf.disparity.size(); ++p) {
        if (!kf.mono_valid[p]) continue;
        kf.disparity[p] = std::max(kf.scale / kf.mono_depth[p] + kf.shift, kMinDisparity);
        sum += kf.disparity[p];
        ++cnt;
      }
      const double fill = cnt ? sum / static_cast<double>(cnt) : 1.0;
      for (std::size_t p = 0; p < kf.disparity.size(); ++p)
        if (!kf.mono_valid[p]) kf.disparity[p] = fill;
      g.keyframes.push_back(std::move(kf));
      res.gt_poses.push_back(scene.trajectory[static_cast<std::size_t>(frame)]);
      for (int prev = std::max(0, n - cfg.local_neighbors); prev < n; ++prev) {
        g.edges.push_back(flow(n, prev, EdgeKind::kLocal));
        g.edges.push_back(flow(prev, n, EdgeKind::kLocal));
      }
      g.window_begin = std::max(0, g.size() - cfg.window);
    });

    if (n > 0) {
      detail::in_phase(frame, "local", rep.timings, [&] {
        const BaProblem p = local_problem(g);
        const auto rounds = dspo_optimize(g, p, cfg.solver, cfg.local_rounds);
        log.local_rounds = static_cast<int>(rounds.size());
        log.local_cost = rounds.empty() ? 0.0 : rounds.back().dba.cost_after;
      });
    }

    if (cfg.loop_closure) {
      detail::in_phase(frame, "loop", rep.timings, [&] {
        const auto added = add_loop_edges(g, cfg.loop, flow);
        log.loop_edges = static_cast<int>(added.size());
        rep.loop_edges += log.loop_edges;
        if (added.empty()) return;
        std::vector<char> partner(static_cast<std::size_t>(g.size()), 0);
        for (const auto& e : added) partner[static_cast<std::size_t>(e.dst)] = 1;
        std::vector<int> edges;
        for (std::size_t i = 0; i < g.edges.size(); ++i) {
          const auto& e = g.edges[i];
          if (std::max(e.src, e.dst) >= g.window_begin || partner[static_cast<std::size_t>(e.src)] ||
              partner[static_cast<std::size_t>(e.dst)])
            edges.push_back(static_cast<int>(i));
        }
        const int begin = g.window_begin;
        const BaProblem p = make_problem(
            g, std::move(edges), [&](int kf) { return kf >= begin || partner[static_cast<std::size_t>(kf)]; });
        dspo_optimize(g, p, cfg.solver, cfg.loop_rounds);
      });
    }

    if (cfg.global_ba && g.size() % cfg.global_every == 0) {
      run_global(frame);
      log.global_run = true;
    }

    if (cfg.mapping) {
      detail::in_phase(frame, "mapping", rep.timings, [&] {
        update_validity(g, cfg.eta, cfg.n_min);
        const FusedCloud cloud = build_fused_cloud(g.keyframes, k);
        res.proxies.clear();
        for (const auto& kf : g.keyframes) res.proxies.push_back(build_proxy(cloud, kf, k));
        std::map<int, SE3Pose> poses;
        std::map<int, ProxyDepth> proxies;
        for (const auto& [f, state] : res.map.anchor_frames()) {
          const auto& kf = g.keyframes[static_cast<std::size_t>(f)];
          if (!res.map.needs_deform(f, kf.pose, &res.proxies[static_cast<std::size_t>(f)])) continue;
          poses.emplace(f, kf.pose);
          proxies.emplace(f, res.proxies[static_cast<std::size_t>(f)]);
        }
        if (!poses.empty()) res.map.deform(poses, proxies, k);
        const auto& cur = g.keyframes.back();
        anchor_points(res.map, n, cur.pose, cur.image, res.proxies.back(), k, cfg.seed);

        std::vector<MapFrame> all;
        for (std::size_t i = 0; i < g.keyframes.size(); ++i)
          all.push_back({g.keyframes[i].index, g.keyframes[i].pose, &g.keyframes[i].image, &res.proxies[i]});
        const auto chosen = select_mapping_frames(all, n, cfg.kappa, k, cfg.seed);
        std::vector<MapFrame> frames;
        for (int c : chosen) frames.push_back(all[static_cast<std::size_t>(c)]);
        const auto mlog = optimize_map(res.map, res.decoder, frames, k, cfg.loss, cfg.optimizer,
                                       cfg.seed ^ (static_cast<std::uint64_t>(n) << 20));
        log.map_points = res.map.size();
        log.map_loss_start = mlog.loss_start;
        log.map_loss_end = mlog.loss_end;
      });
    }
    rep.log.push_back(log);
  }

  if (cfg.global_ba && cfg.final_global && g.size() >= 3 && rep.log.back().global_run == false)
    run_global(g.keyframes.back().timestamp);

  rep.keyframes = g.size();
  std::vector<SE3Pose> est;
  for (const auto& kf : g.keyframes) est.push_back(kf.pose);
  if (g.size() >= 3) rep.ate_rmse_m = ate_rmse(est, res.gt_poses);

  if (cfg.mapping && !res.map.empty() && g.size() >= 3) {
    detail::in_phase(g.keyframes.back().timestamp, "evaluation", rep.timings, [&] {
      // Bring the map and proxies up to date with the final poses.
      update_validity(g, cfg.eta, cfg.n_min);
      const FusedCloud cloud = build_fused_cloud(g.keyframes, k);
      res.proxies.clear();
      for (const auto& kf : g.keyframes) res.proxies.push_back(build_proxy(cloud, kf, k));
      std::map<int, SE3Pose> poses;
      std::map<int, ProxyDepth> proxies;
      for (const auto& [f, state] : res.map.anchor_frames()) {
        const auto& kf = g.keyframes[static_cast<std::size_t>(f)];
        if (!res.map.needs_deform(f, kf.pose, &res.proxies[static_cast<std::size_t>(f)])) continue;
        poses.emplace(f, kf.pose);
        proxies.emplace(f, res.proxies[static_cast<std::size_t>(f)]);
      }
      if (!poses.empty()) res.map.deform(poses, proxies, k);

      // Rendered depth is in the estimate's scale; bring it to metres.
      const double scale = detail::align_sim3(est, res.gt_poses).topLeftCorner<3, 3>().determinant();
      const double s = std::cbrt(scale);
      double l1 = 0.0, ps = 0.0;
      int n_l1 = 0, n_ps = 0;
      for (std::size_t i = 0; i < g.keyframes.size(); ++i) {
        const auto& kf = g.keyframes[i];
        const auto view = render_map_view(res.map, res.decoder, kf.pose, k, res.proxies[i].depth,
                                          res.proxies[i].defined());
        const auto& o = observe(kf.timestamp);
        DepthMap metric = view.depth;
        for (double& d : metric.data()) d *= s;
        try {
          l1 += depth_l1(metric, view.rendered, o.gt_depth, o.valid);
          ++n_l1;
          ps += psnr(view.color, o.image, &view.rendered);
          ++n_ps;
        } catch (const NoOverlap&) {
        }
      }
      if (n_l1) rep.depth_l1_m = l1 / n_l1;
      if (n_ps) rep.psnr_db = ps / n_ps;
    });
  }
  rep.map_points = res.map.size();
  return res;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw ConfigError("cannot write `" + path.string() + "`");
}

inline void write_depth_bin(const std::filesystem::path& path, const DepthMap& d) {
  std::ofstream os(path, std::ios::binary);
  io_detail::write_le(os, static_cast<std::int32_t>(d.width()));
  io_detail::write_le(os, static_cast<std::int32_t>(d.height()));
  for (double x : d.data()) io_detail::write_le(os, x);
  if (!os) throw ConfigError("cannot write `" + path.string() + "`");
}

}  // namespace detail

inline DepthMap read_depth_bin(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open `" + path.string() + "`");
  const int w = io_detail::read_le<std::int32_t>(is);
  const int h = io_detail::read_le<std::int32_t>(is);
  if (w <= 0 || h <= 0) throw ConfigError("bad raster size in `" + path.string() + "`");
  DepthMap d(w, h, 0.0);
  for (double& x : d.data()) x = io_detail::read_le<double>(is);
  return d;
}

inline std::string frame_name(const char* stem, int index, const char* ext) {
  std::ostringstream os;
  os << stem << '_' << std::setw(4) << std::setfill('0') << index << ext;
  return os.str();
}

/// Writes trajectories, the map snapshot, renders and the report into `out`.
inline void write_outputs(const RunResult& res, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  fs::create_directories(out);
  std::vector<TrajectoryEntry> est, gt;
  for (std::size_t i = 0; i < res.graph.keyframes.size(); ++i) {
    const auto& kf = res.graph.keyframes[i];
    est.push_back(TrajectoryEntry::from_pose(kf.timestamp, kf.pose));
    gt.push_back(TrajectoryEntry::from_pose(kf.timestamp, res.gt_poses[i]));
  }
  save_trajectory((out / "trajectory_est.txt").string(), est);
  save_trajectory((out / "trajectory_gt.txt").string(), gt);

  const fs::path map_dir = out / "map";
  save_map_snapshot(res.map, map_dir);
  save_decoder(res.decoder, map_dir / "decoder.txt");
  save_trajectory((map_dir / "keyframes.txt").string(), est);
  {
    const auto& k = res.graph.intrinsics;
    std::ostringstream os;
    os << std::setprecision(17) << "fx = " << k.fx << "\nfy = " << k.fy << "\ncx = " << k.cx << "\ncy = " << k.cy
       << "\nwidth = " << k.width << "\nheight = " << k.height << "\n";
    detail::write_text(map_dir / "intrinsics.txt", os.str());
  }
  const fs::path render_dir = out / "renders";
  fs::create_directories(render_dir);
  for (std::size_t i = 0; i < res.proxies.size(); ++i) {
    DepthMap d = res.proxies[i].depth;
    detail::write_depth_bin(map_dir / frame_name("proxy", static_cast<int>(i), ".bin"), d);
    const auto& kf = res.graph.keyframes[i];
    const auto view =
        render_map_view(res.map, res.decoder, kf.pose, res.graph.intrinsics, d, res.proxies[i].defined());
    write_pfm((render_dir / frame_name("depth", static_cast<int>(i), ".pfm")).string(), view.depth);
    write_ppm((render_dir / frame_name("color", static_cast<int>(i), ".ppm")).string(), view.color);
  }
  detail::write_text(out / "report.txt", res.report.to_text());
  detail::write_text(out / "timings.txt", res.report.timings_text());
}

}  // namespace dspo
