#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dspo/metrics.hpp"
#include "dspo/pipeline.hpp"

using namespace dspo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dspo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DSPO_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

KeyValueFile kv(const std::string& text) {
  std::istringstream is(text);
  return KeyValueFile::parse(is);
}

std::vector<Vec3> line_points(int n) {
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.emplace_back(0.3 * i, std::sin(i), 0.1 * i * i);
  return out;
}

}  // namespace

TEST(Ate, IdenticalTrajectoriesGiveZero) {
  const auto a = line_points(10);
  EXPECT_NEAR(ate_rmse(a, a), 0.0, 1e-12);
  EXPECT_EQ(ate_rmse(a, a, false), 0.0);
}

TEST(Ate, ScaledCopyAlignsToZero) {
  const auto gt = line_points(10);
  auto est = gt;
  for (auto& p : est) p *= 2.0;
  EXPECT_NEAR(ate_rmse(est, gt), 0.0, 1e-10);
  EXPECT_GT(ate_rmse(est, gt, false), 0.1);
}

TEST(Ate, SingleOffsetWithoutAlignment) {
  const auto gt = line_points(10);
  auto est = gt;
  est[4].x() += 0.1;
  EXPECT_NEAR(ate_rmse(est, gt, false), 0.1 / std::sqrt(10.0), 1e-12);
}

TEST(Ate, TooFewPoses) {
  const auto a = line_points(2);
  EXPECT_THROW(ate_rmse(a, a), TooFewPoses);
}

TEST(DepthL1, Examples) {
  DepthMap gt(4, 3, 2.0), est(4, 3, 2.05);
  Mask all(4, 3, 1);
  EXPECT_EQ(depth_l1(gt, all, gt, all), 0.0);
  EXPECT_NEAR(depth_l1(est, all, gt, all), 0.05, 1e-12);
  EXPECT_THROW(depth_l1(est, Mask(4, 3, 0), gt, all), NoOverlap);
}

TEST(Psnr, Examples) {
  Image gt(4, 3, Vec3(0.2, 0.5, 0.7));
  EXPECT_EQ(psnr(gt, gt), kPsnrCap);
  Image off = gt;
  for (auto& c : off.data()) c += Vec3::Constant(std::sqrt(1e-3));
  EXPECT_NEAR(psnr(off, gt), 30.0, 1e-9);
}

TEST(Trajectory, RoundTripIsExact) {
  std::vector<TrajectoryEntry> entries;
  for (int i = 0; i < 5; ++i)
    entries.push_back(TrajectoryEntry::from_pose(i, SE3Pose(so3_exp(Vec3(0.1 * i, -0.2, 0.3)), Vec3(i, 0.5, -1.0 / 3.0))));
  const auto dir = scratch("traj");
  save_trajectory((dir / "t.txt").string(), entries);
  EXPECT_EQ(load_trajectory((dir / "t.txt").string()), entries);
  write_file(dir / "bad.txt", "0 1 2 3\n");
  EXPECT_THROW(load_trajectory((dir / "bad.txt").string()), ConfigError);
}

TEST(PipelineConfig, UnknownKeyIsRejected) {
  EXPECT_THROW(PipelineConfig::from_kv(kv("tracking.tau = 2\nbogus = 1\n"), "x"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_kv(kv("fusion.eta = -1\n"), "x"), ConfigError);
  const auto c = PipelineConfig::from_kv(kv("tracking.tau = 3.5\nmap.enabled = false\n"), "x");
  EXPECT_EQ(c.tau, 3.5);
  EXPECT_FALSE(c.mapping);
}

TEST(Pipeline, ZeroFramesIsANoOp) {
  PipelineConfig cfg;
  cfg.frames = 0;
  const auto res = run_slam(cfg);
  EXPECT_EQ(res.report.frames, 0);
  EXPECT_EQ(res.report.keyframes, 0);
  EXPECT_FALSE(res.report.ate_rmse_m);
  EXPECT_TRUE(res.map.empty());
}

TEST(Pipeline, ShortRunTracksAndMaps) {
  PipelineConfig cfg;
  cfg.frames = 8;
  cfg.optimizer.iters = 4;
  const auto res = run_slam(cfg);
  EXPECT_EQ(res.report.frames, 8);
  EXPECT_GE(res.report.keyframes, 3);
  ASSERT_TRUE(res.report.ate_rmse_m);
  EXPECT_LT(*res.report.ate_rmse_m, 0.05 * std::sqrt(41.0));
  EXPECT_GT(res.report.map_points, 0u);
  EXPECT_EQ(res.proxies.size(), static_cast<std::size_t>(res.report.keyframes));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  write_file(dir / "ok.cfg", "frames = 5\nmapper.iters = 2\n");
  write_file(dir / "bad.cfg", "frames = 5\nnot_a_key = 1\n");
  EXPECT_EQ(run_cli("run --config " + (dir / "ok.cfg").string() + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "trajectory_est.txt"));
  EXPECT_TRUE(fs::exists(dir / "out" / "map" / "header.txt"));
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.cfg").string() + " --out " + (dir / "bad").string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "missing.cfg").string()), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  const auto est = (dir / "out" / "trajectory_est.txt").string();
  const auto gt = (dir / "out" / "trajectory_gt.txt").string();
  EXPECT_EQ(run_cli("eval --est " + est + " --gt " + gt), 0);
  // Two poses cannot be aligned.
  write_file(dir / "two.txt", "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n");
  EXPECT_EQ(run_cli("eval --est " + (dir / "two.txt").string() + " --gt " + (dir / "two.txt").string()), 3);

  EXPECT_EQ(run_cli("render --map " + (dir / "out" / "map").string() + " --pose 0 --out " + (dir / "r").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "r" / "render_depth_0000.pfm"));
  EXPECT_EQ(run_cli("render --map " + (dir / "out" / "map").string() + " --pose 99"), 2);
}

TEST(Cli, EvalMatchesLibrary) {
  const auto dir = scratch("cli_eval");
  std::vector<TrajectoryEntry> a, b;
  const auto pts = line_points(6);
  for (int i = 0; i < 6; ++i) {
    a.push_back({static_cast<double>(i), pts[static_cast<std::size_t>(i)] * 1.5 + Vec3(0.01 * (i % 2), 0, 0), Eigen::Quaterniond::Identity()});
    b.push_back({static_cast<double>(i), pts[static_cast<std::size_t>(i)], Eigen::Quaterniond::Identity()});
  }
  save_trajectory((dir / "a.txt").string(), a);
  save_trajectory((dir / "b.txt").string(), b);
  const std::string cmd = std::string(DSPO_CLI_PATH) + " eval --est " + (dir / "a.txt").string() + " --gt " +
                          (dir / "b.txt").string() + " > " + (dir / "o.txt").string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  std::vector<Vec3> pa, pb;
  for (int i = 0; i < 6; ++i) {
    pa.push_back(a[static_cast<std::size_t>(i)].t);
    pb.push_back(b[static_cast<std::size_t>(i)].t);
  }
  const std::string text = read_file(dir / "o.txt");
  const auto pos = text.find("ate_rmse_m = ");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_EQ(std::stod(text.substr(pos + 13)), ate_rmse(pa, pb));
}
