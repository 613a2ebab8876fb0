#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dspo/keyvalue.hpp"
#include "dspo/metrics.hpp"
#include "dspo/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_run(const std::string& config, const std::string& out) {
  const auto cfg = dspo::PipelineConfig::load(config);
  const auto res = dspo::run_slam(cfg);
  dspo::write_outputs(res, out);
  std::cout << res.report.to_text();
  return 0;
}

int cmd_eval(const std::string& est_path, const std::string& gt_path, bool align) {
  const auto est = dspo::load_trajectory(est_path);
  const auto gt = dspo::load_trajectory(gt_path);
  std::vector<dspo::Vec3> a, b;
  std::size_t j = 0;
  // Pair entries by timestamp; both files are sorted.
  for (const auto& e : est) {
    while (j < gt.size() && gt[j].timestamp < e.timestamp) ++j;
    if (j < gt.size() && gt[j].timestamp == e.timestamp) {
      a.push_back(e.t);
      b.push_back(gt[j].t);
    }
  }
  if (a.size() != est.size()) throw dspo::ConfigError("eval: estimate has timestamps missing from ground truth");
  std::printf("poses = %zu\nate_rmse_m = %.17g\n", a.size(), dspo::ate_rmse(a, b, align));
  return 0;
}

int cmd_render(const std::string& map_dir, int index, const std::string& out) {
  const fs::path dir(map_dir);
  const auto map = dspo::load_map_snapshot(dir);
  const auto decoder = dspo::load_decoder(dir / "decoder.txt");
  const auto poses = dspo::load_trajectory((dir / "keyframes.txt").string());
  if (index < 0 || index >= static_cast<int>(poses.size()))
    throw dspo::ConfigError("render: pose index " + std::to_string(index) + " outside [0, " +
                            std::to_string(poses.size()) + ")");
  auto kv = dspo::KeyValueFile::load((dir / "intrinsics.txt").string());
  dspo::Intrinsics k;
  k.fx = kv.get_double("fx", 0.0);
  k.fy = kv.get_double("fy", 0.0);
  k.cx = kv.get_double("cx", 0.0);
  k.cy = kv.get_double("cy", 0.0);
  k.width = static_cast<int>(kv.get_int("width", 0));
  k.height = static_cast<int>(kv.get_int("height", 0));
  kv.reject_unknown((dir / "intrinsics.txt").string());
  if (!k.valid()) throw dspo::ConfigError("render: invalid intrinsics in snapshot");
  const auto proxy = dspo::read_depth_bin(dir / dspo::frame_name("proxy", index, ".bin"));
  dspo::Mask valid(proxy.width(), proxy.height(), 0);
  for (std::size_t p = 0; p < proxy.size(); ++p) valid[p] = proxy[p] > 0.0;
  const auto view = dspo::render_map_view(map, decoder, poses[static_cast<std::size_t>(index)].pose(), k, proxy, valid);
  fs::create_directories(out);
  dspo::write_pfm((fs::path(out) / dspo::frame_name("render_depth", index, ".pfm")).string(), view.depth);
  dspo::write_ppm((fs::path(out) / dspo::frame_name("render_color", index, ".ppm")).string(), view.color);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < view.depth.size(); ++p)
    if (view.rendered[p]) {
      sum += view.depth[p];
      ++n;
    }
  std::printf("rendered_pixels = %zu\nmean_depth = %.17g\n", n, n ? sum / n : 0.0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense RGB SLAM kernel on synthetic scenes"};
  app.require_subcommand(1);

  std::string config, out = "out";
  auto* run = app.add_subcommand("run", "Run the full pipeline");
  run->add_option("--config", config, "Pipeline config file")->required();
  run->add_option("--out", out, "Output directory");

  std::string est, gt;
  bool no_align = false;
  auto* eval = app.add_subcommand("eval", "ATE RMSE between two trajectory files");
  eval->add_option("--est", est, "Estimated trajectory")->required();
  eval->add_option("--gt", gt, "Ground-truth trajectory")->required();
  eval->add_flag("--no-align", no_align, "Skip Sim(3) alignment");

  std::string map_dir, render_out = ".";
  int pose = 0;
  auto* render = app.add_subcommand("render", "Render a keyframe view from a map snapshot");
  render->add_option("--map", map_dir, "Snapshot directory")->required();
  render->add_option("--pose", pose, "Keyframe index")->required();
  render->add_option("--out", render_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run) return cmd_run(config, out);
    if (*eval) return cmd_eval(est, gt, !no_align);
    if (*render) return cmd_render(map_dir, pose, render_out);
  } catch (const dspo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dspo::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
