// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Tolerances are fixed here and never read from the environment.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "dspo/depth_fusion.hpp"
#include "dspo/metrics.hpp"
#include "dspo/pipeline.hpp"
#include "test_support.hpp"

using namespace dspo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: Jacobians

constexpr double kJacobianTol = 1e-5;
constexpr double kJacobianSeconds = 10.0;

Outcome jacobians() {
  std::mt19937 rng(101);
  SolverConfig cfg;
  double worst = 0.0;
  std::size_t rows = 0, skipped = 0;
  const int graphs = 20;
  for (int n = 0; n < graphs; ++n) {
    fixtures::RandomGraphOptions o;
    o.keyframes = 3 + n % 2;
    o.with_prior = true;
    Graph g = fixtures::random_graph(rng, o);
    const auto p = full_problem(g);
    // Rows whose in-view test flips within +-eps are excluded and counted.
    fixtures::RowFlags dba_flips, dspo_flips;
    const auto fp = fixtures::fd_dba_pose(g, p, 1e-6, &dba_flips);
    const auto fd = fixtures::fd_dba_disparity(g, p, 1e-6, &dba_flips);
    const auto [fs_, fd_] = fixtures::fd_dspo(g, p, cfg, 1e-6, &dspo_flips);
    const auto jd = dba_jacobians(g, p);
    const auto js = dspo_jacobians(g, p);
    worst = std::max(worst, fixtures::relative_error(Eigen::MatrixXd(jd.pose), fp, dba_flips));
    worst = std::max(worst, fixtures::relative_error(Eigen::MatrixXd(jd.disparity), fd, dba_flips));
    worst = std::max(worst, fixtures::relative_error(Eigen::MatrixXd(js.scale_shift), fs_, dspo_flips));
    worst = std::max(worst, fixtures::relative_error(Eigen::MatrixXd(js.disparity), fd_, dspo_flips));
    rows += dba_flips.size() + dspo_flips.size();
    skipped += static_cast<std::size_t>(std::count(dba_flips.begin(), dba_flips.end(), 1) +
                                        std::count(dspo_flips.begin(), dspo_flips.end(), 1));
  }
  return {worst < kJacobianTol, fmt("%d graphs, max relative error %.3e (tol %.0e), %zu/%zu rows at a visibility step",
                                    graphs, worst, kJacobianTol, skipped, rows)};
}

// ---- 2: Schur complement

constexpr double kSchurTol = 1e-9;

Outcome schur() {
  std::mt19937 rng(202);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> nd(1, 4), md(1, 100);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int n = nd(rng), m = md(rng);
    const int rows = 2 * (6 * n + m);
    Eigen::MatrixXd jp(rows, 6 * n), jd = Eigen::MatrixXd::Zero(rows, m);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < 6 * n; ++j) jp(i, j) = g(rng);
    for (int k = 0; k < m; ++k) {
      jd(2 * k, k) = g(rng) + 2.0;
      jd(2 * k + 1, k) = g(rng);
    }
    LinearSystem s;
    s.B = jp.transpose() * jp;
    s.E = (jp.transpose() * jd).sparseView();
    s.C = (jd.transpose() * jd).diagonal();
    s.v = Eigen::VectorXd::NullaryExpr(6 * n, [&] { return g(rng); });
    s.w = Eigen::VectorXd::NullaryExpr(m, [&] { return g(rng); });
    const auto sol = schur_solve(s);
    Eigen::MatrixXd h(6 * n + m, 6 * n + m);
    h << s.B, Eigen::MatrixXd(s.E), Eigen::MatrixXd(s.E).transpose(), Eigen::MatrixXd(s.C.asDiagonal());
    Eigen::VectorXd rhs(6 * n + m), x(6 * n + m);
    rhs << s.v, s.w;
    x << sol.dx, sol.dy;
    const Eigen::VectorXd dense = h.ldlt().solve(rhs);
    worst = std::max(worst, (x - dense).norm() / dense.norm());
  }
  return {worst < kSchurTol, fmt("100 systems, max relative difference %.3e (tol %.0e)", worst, kSchurTol)};
}

// ---- 3: DBA convergence

constexpr double kRmseTol = 1e-6;
constexpr double kAteFraction = 1e-3;

Outcome dba_convergence() {
  const auto scene = fixtures::arc_scene(8);
  Graph g = fixtures::oracle_graph(scene, 2);
  g.gauge_fixed = 2;
  std::mt19937 rng(303);
  std::uniform_real_distribution<double> u(0.8, 1.2);
  for (int k = 0; k < g.size(); ++k) {
    auto& kf = g.keyframes[static_cast<std::size_t>(k)];
    if (k >= 2) kf.pose = se3_exp(fixtures::random_tangent(rng, 0.05, 0.05)) * kf.pose;
    for (double& d : kf.disparity.data()) d *= u(rng);
  }
  const auto p = full_problem(g);
  const double before = reprojection_rmse(g, p);
  const auto log = dba_optimize(g, p, {}, 20);
  const double rmse = reprojection_rmse(g, p);
  std::vector<SE3Pose> est;
  for (const auto& kf : g.keyframes) est.push_back(kf.pose);
  const double ate = ate_rmse(est, scene.trajectory);
  const double limit = kAteFraction * scene.diameter();
  return {rmse < kRmseTol && ate < limit && log.size() <= 20,
          fmt("rmse %.3e -> %.3e px in %zu iterations, ATE %.3e m (limit %.3e)", before, rmse, log.size(), ate,
              limit)};
}

// ---- 4: DSPO recovery

constexpr double kPriorRelTol = 0.01;
constexpr double kMedianGain = 10.0;

Outcome dspo_recovery() {
  const double theta = 2.0, gamma = 0.1;
  Graph g = fixtures::oracle_graph(fixtures::arc_scene(4), 2);
  g.gauge_fixed = 2;
  for (auto& kf : g.keyframes) {
    kf.mono_depth = DepthMap(kf.width(), kf.height(), 0.0);
    kf.mono_valid = Mask(kf.width(), kf.height(), 0);
    for (std::size_t q = 0; q < kf.disparity.size(); ++q) {
      const double m = (kf.disparity[q] - gamma) / theta;
      if (m > 0.0) {
        kf.mono_depth[q] = 1.0 / m;
        kf.mono_valid[q] = 1;
      }
    }
  }
  const Graph truth = g;
  std::mt19937 rng(404);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& kf : g.keyframes) {
    kf.validity_mask = Mask(kf.width(), kf.height(), 1);
    for (std::size_t q = 0; q < kf.disparity.size(); ++q)
      if (kf.mono_valid[q] && u(rng) < 0.3) {
        kf.disparity[q] *= 1.5;
        kf.validity_mask[q] = 0;
      }
  }
  auto median_error = [&](const Graph& cur) {
    std::vector<double> e;
    for (std::size_t k = 0; k < cur.keyframes.size(); ++k)
      for (std::size_t q = 0; q < cur.keyframes[k].disparity.size(); ++q)
        if (!cur.keyframes[k].validity_mask[q])
          e.push_back(std::abs(cur.keyframes[k].disparity[q] - truth.keyframes[k].disparity[q]));
    std::nth_element(e.begin(), e.begin() + static_cast<long>(e.size() / 2), e.end());
    return e[e.size() / 2];
  };
  const auto p = full_problem(g);

  // d^l must be untouched by a single prior step.
  bool low_unchanged = true;
  {
    Graph probe = g;
    Damping d;
    dspo_step(probe, p, {}, d);
    for (std::size_t k = 0; k < g.keyframes.size(); ++k)
      for (std::size_t q = 0; q < g.keyframes[k].disparity.size(); ++q)
        if (g.keyframes[k].validity_mask[q] && probe.keyframes[k].disparity[q] != g.keyframes[k].disparity[q])
          low_unchanged = false;
  }

  const double before = median_error(g);
  dspo_optimize(g, p, {}, 10);
  const double after = median_error(g);
  double worst_theta = 0.0, worst_gamma = 0.0;
  for (const auto& kf : g.keyframes) {
    worst_theta = std::max(worst_theta, std::abs(kf.scale - theta) / theta);
    worst_gamma = std::max(worst_gamma, std::abs(kf.shift - gamma) / gamma);
  }
  return {worst_theta <= kPriorRelTol && worst_gamma <= kPriorRelTol && before >= kMedianGain * after && low_unchanged,
          fmt("scale err %.2e, shift err %.2e (tol %.0e), median d^h err %.3e -> %.3e, d^l %s", worst_theta,
              worst_gamma, kPriorRelTol, before, after, low_unchanged ? "bit-identical" : "CHANGED")};
}

// ---- 5: multi-view filter

constexpr double kFilterTol = 0.99;

Outcome multi_view_filter() {
  const auto scene = fixtures::arc_scene(6, M_PI / 36.0);
  const Graph clean = fixtures::oracle_graph(scene, 0);
  std::mt19937 rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t tp = 0, fp = 0, fn = 0;
  // Outliers go into one keyframe at a time so the others stay clean witnesses.
  std::size_t judged = 0, total = 0;
  for (int target = 0; target < clean.size(); ++target) {
    // Pixels without n_min co-visible witnesses on clean data carry no
    // evidence either way and are left out of the score.
    const Mask supported = multi_view_validity(target, clean.keyframes, clean.intrinsics, 0.01, 2).valid;
    judged += count_true(supported);
    total += supported.size();
    Graph g = clean;
    auto& kf = g.keyframes[static_cast<std::size_t>(target)];
    Mask outlier(kf.width(), kf.height(), 0);
    for (std::size_t q = 0; q < kf.disparity.size(); ++q)
      if (u(rng) < 0.2) {
        kf.disparity[q] /= 1.5;
        outlier[q] = 1;
      }
    update_validity(g, 0.01, 2);
    for (std::size_t q = 0; q < outlier.size(); ++q) {
      if (!supported[q]) continue;
      const bool flagged = !kf.validity_mask[q];
      tp += flagged && outlier[q];
      fp += flagged && !outlier[q];
      fn += !flagged && outlier[q];
    }
  }
  const double precision = static_cast<double>(tp) / static_cast<double>(std::max<std::size_t>(tp + fp, 1));
  const double recall = static_cast<double>(tp) / static_cast<double>(std::max<std::size_t>(tp + fn, 1));
  return {precision >= kFilterTol && recall >= kFilterTol,
          fmt("precision %.4f, recall %.4f (min %.2f), %zu outliers, %zu/%zu pixels co-visible", precision, recall,
              kFilterTol, tp + fn, judged, total)};
}

// ---- 6: deformation

constexpr double kCenterTol = 1e-12;
constexpr double kBandTol = 1e-10;

Outcome deformation() {
  const auto scene = make_default_scene(6);
  const auto& k = scene.intrinsics;
  std::mt19937 rng(606);
  std::uniform_real_distribution<double> a(-0.2, 0.2), s(0.7, 1.4);
  NeuralPointCloud map(PipelineConfig{}.map);
  std::map<int, SE3Pose> poses;
  std::map<int, ProxyDepth> proxies;
  for (int f = 0; f < 6; ++f) {
    const auto o = render_observation(scene, static_cast<std::size_t>(f));
    ProxyDepth proxy{o.gt_depth, Raster<std::uint8_t>(k.width, k.height, 1)};
    anchor_points(map, f, scene.trajectory[static_cast<std::size_t>(f)], o.image, proxy, k, 6);
    // Random global update: new pose and a per-pixel rescaled depth.
    for (double& z : proxy.depth.data()) z *= s(rng);
    poses[f] = se3_exp((Vec6() << a(rng), a(rng), a(rng), a(rng), a(rng), a(rng)).finished()) *
               scene.trajectory[static_cast<std::size_t>(f)];
    proxies[f] = proxy;
  }
  map.deform(poses, proxies, k);
  const double rho = map.config().rho;
  double center = 0.0, band = 0.0;
  for (const auto& pt : map.points()) {
    const double z = proxies[pt.anchor_frame].depth(pt.u, pt.v);
    const SE3Pose& pose = poses[pt.anchor_frame];
    if (pt.slot == RaySlot::kCenter) {
      const Vec3 c = pose * (z * k.ray(pt.u, pt.v));
      center = std::max(center, (pt.p - c).norm() / c.norm());
    } else {
      const double f = pt.slot == RaySlot::kNear ? 1.0 - rho : 1.0 + rho;
      const Vec3 cam = pose.inverse() * pt.p;
      band = std::max(band, (cam - f * z * k.ray(pt.u, pt.v)).norm() / (f * z));
    }
  }
  return {center <= kCenterTol && band <= kBandTol && map.size() > 0,
          fmt("%zu points, center rel err %.2e (tol %.0e), band rel err %.2e (tol %.0e)", map.size(), center,
              kCenterTol, band, kBandTol)};
}

// ---- 7: rendering oracle

constexpr double kAlphaTol = 1e-12;

Outcome rendering_oracle() {
  const auto scene = make_default_scene(24);
  const double rho = 0.05;
  OracleDecoder dec(scene, rho);
  const NeuralPointCloud empty;
  std::size_t pixels = 0, bad = 0;
  double worst_ratio = 0.0;
  for (std::size_t f = 0; f < scene.trajectory.size(); ++f) {
    const auto o = render_observation(scene, f);
    dec.set_view(scene.trajectory[f]);
    const auto view = render_map_view(empty, dec, scene.trajectory[f], scene.intrinsics, o.gt_depth, o.valid);
    for (std::size_t q = 0; q < o.gt_depth.size(); ++q) {
      if (!o.valid[q]) continue;
      ++pixels;
      const double spacing = 2.0 * rho * o.gt_depth[q] / 9.0;
      const double err = std::abs(view.depth[q] - o.gt_depth[q]);
      worst_ratio = std::max(worst_ratio, err / spacing);
      if (!view.rendered[q] || err > spacing) ++bad;
    }
  }
  std::mt19937 rng(707);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double alpha_err = 0.0;
  bool in_range = true;
  for (int t = 0; t < 10000; ++t) {
    std::array<RaySample, kRaySamples> s{};
    double transmit = 1.0;
    for (auto& x : s) {
      x.occupancy = t % 10 == 0 ? std::round(u(rng)) : u(rng);
      transmit *= 1.0 - x.occupancy;
    }
    composite_weights(s);
    double sum = 0.0;
    for (const auto& x : s) {
      in_range = in_range && x.weight >= 0.0 && x.weight <= 1.0;
      sum += x.weight;
    }
    alpha_err = std::max(alpha_err, std::abs(sum - (1.0 - transmit)));
  }
  return {bad == 0 && in_range && alpha_err <= kAlphaTol,
          fmt("%zu/%zu pixels outside spacing (worst %.3f of spacing), alpha sum err %.2e (tol %.0e)", bad, pixels,
              worst_ratio, alpha_err, kAlphaTol)};
}

// ---- 8: mapping optimization

constexpr double kDepthGain = 5.0;
constexpr double kMappingSeconds = 120.0;

Outcome mapping() {
  const auto scene = make_plane_scene(3);
  const auto& k = scene.intrinsics;
  NeuralPointCloud map(PipelineConfig{}.map);
  std::vector<OracleObservation> obs;
  std::vector<ProxyDepth> proxies;
  for (std::size_t i = 0; i < scene.trajectory.size(); ++i) obs.push_back(render_observation(scene, i));
  for (const auto& o : obs) proxies.push_back({o.gt_depth, Raster<std::uint8_t>(k.width, k.height, 1)});
  for (std::size_t i = 0; i < obs.size(); ++i)
    anchor_points(map, static_cast<int>(i), scene.trajectory[i], obs[i].image, proxies[i], k, 7);
  TrainableDecoder dec;
  std::vector<MapFrame> frames;
  for (std::size_t i = 0; i < obs.size(); ++i)
    frames.push_back({static_cast<int>(i), scene.trajectory[i], &obs[i].image, &proxies[i]});
  // Unrendered pixels count with depth 0 against the ground truth.
  const Mask all(k.width, k.height, 1);
  auto evaluate = [&] {
    double l1 = 0.0, ps = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const auto v = render_map_view(map, dec, scene.trajectory[i], k, proxies[i].depth, all);
      l1 += depth_l1(v.depth, all, obs[i].gt_depth, obs[i].valid);
      ps += psnr(v.color, obs[i].image);
    }
    const double n = static_cast<double>(obs.size());
    return std::make_pair(l1 / n, ps / n);
  };
  const auto [l1_0, psnr_0] = evaluate();
  MapOptimizerConfig cfg;
  cfg.iters = 200;
  cfg.pixels_per_frame = 2000;
  const auto t0 = std::chrono::steady_clock::now();
  const auto log = optimize_map(map, dec, frames, k, {}, cfg, 3);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto [l1_1, psnr_1] = evaluate();
  // Within a stage the recorded loss may only go down.
  bool monotone = true;
  for (std::size_t i = 1; i < log.stage_loss.size(); ++i) {
    if (static_cast<int>(i) == log.stage1_iters) continue;
    if (log.stage_loss[i] > log.stage_loss[i - 1]) monotone = false;
  }
  const double gain = l1_0 / l1_1;
  return {gain >= kDepthGain && psnr_1 > psnr_0 && monotone && secs < kMappingSeconds,
          fmt("depth L1 %.4f -> %.4f m (x%.2f, min x%.0f), PSNR %.3f -> %.3f dB, loss %s, %.1f s", l1_0, l1_1, gain,
              kDepthGain, psnr_0, psnr_1, monotone ? "monotone" : "NOT monotone", secs)};
}

// ---- 9: normalization invariance

constexpr double kNormalizeTol = 1e-10;

Outcome normalization() {
  std::mt19937 rng(909);
  std::uniform_real_distribution<double> f(0.2, 5.0);
  double worst = 0.0;
  for (int n = 0; n < 20; ++n) {
    fixtures::RandomGraphOptions o;
    o.keyframes = 3 + n % 2;
    Graph g = fixtures::random_graph(rng, o);
    const double factor = f(rng);
    for (auto& kf : g.keyframes)
      for (double& d : kf.disparity.data()) d *= factor;
    const auto p = full_problem(g);
    const auto before = dba_residuals(g, p);
    normalize_scale(g);
    const auto after = dba_residuals(g, p);
    worst = std::max(worst, (before.r - after.r).lpNorm<Eigen::Infinity>());
  }
  return {worst < kNormalizeTol, fmt("20 graphs, max residual change %.2e px (tol %.0e)", worst, kNormalizeTol)};
}

// ---- 10: loop closure benefit

Outcome loop_benefit() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PipelineConfig cfg;
    cfg.frames = 24;
    cfg.tau = 0.0;  // every frame becomes a keyframe
    cfg.flow_noise = 0.3;
    cfg.seed = seed;
    cfg.mapping = false;
    PipelineConfig off = cfg;
    off.loop_closure = false;
    off.global_ba = false;
    off.final_global = false;
    const auto with = run_slam(cfg).report;
    const auto without = run_slam(off).report;
    const double a = with.ate_rmse_m.value_or(1e9), b = without.ate_rmse_m.value_or(0.0);
    pass = pass && a <= b && with.keyframes == 24;
    detail += fmt("%sseed %d: %.4f vs %.4f", seed == 1 ? "" : ", ", static_cast<int>(seed), a, b);
  }
  return {pass, "ATE on vs off (m): " + detail};
}

// ---- 11: determinism

std::map<std::string, std::string> snapshot_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "timings.txt") continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    out[fs::relative(e.path(), dir).string()] = os.str();
  }
  return out;
}

Outcome determinism() {
  PipelineConfig cfg;
  cfg.frames = 12;
  cfg.seed = 11;
  cfg.flow_noise = 0.2;
  cfg.mono_noise = 0.02;
  const fs::path root = fs::temp_directory_path() / "dspo_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> reports;
  for (int run = 0; run < 2; ++run) {
    const auto res = run_slam(cfg);
    write_outputs(res, root / std::to_string(run));
    reports.push_back(res.report.to_text());
  }
  const auto a = snapshot_files(root / "0"), b = snapshot_files(root / "1");
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differing;
  }
  const bool pass = a.size() == b.size() && differing == 0 && reports[0] == reports[1] && a.size() > 5;
  fs::remove_all(root);
  return {pass, fmt("%zu output files compared, %zu differ, reports %s", a.size(), differing,
                    reports[0] == reports[1] ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  double seconds_limit;  // <= 0: no limit
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "jacobians", jacobians, kJacobianSeconds},
      {2, "schur", schur, 5.0},
      {3, "dba-convergence", dba_convergence, 30.0},
      {4, "dspo-recovery", dspo_recovery, 30.0},
      {5, "multi-view-filter", multi_view_filter, 5.0},
      {6, "deformation", deformation, 0.0},
      {7, "rendering-oracle", rendering_oracle, 0.0},
      {8, "mapping", mapping, kMappingSeconds},
      {9, "normalization", normalization, 0.0},
      {10, "loop-closure", loop_benefit, 0.0},
      {11, "determinism", determinism, 0.0},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.seconds_limit > 0.0 && secs >= c.seconds_limit) {
      o.pass = false;
      o.detail += fmt(" [over time limit %.0f s]", c.seconds_limit);
    }
    std::printf("criterion %2d %-18s %s  %.2f s  %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
