#pragma once

// Trajectory and rendering metrics plus the timestamped trajectory format.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "dspo/errors.hpp"
#include "dspo/geometry.hpp"

namespace dspo {

/// Translation RMSE after closed-form Sim(3) alignment of the estimate onto
/// the ground truth. With `align` off the raw translations are compared.
inline double ate_rmse(const std::vector<Vec3>& estimated, const std::vector<Vec3>& ground_truth,
                       bool align = true) {
  if (estimated.size() != ground_truth.size())
    throw ConfigError("ate: trajectories differ in length");
  if (estimated.size() < 3) throw TooFewPoses(estimated.size());
  const auto n = static_cast<Eigen::Index>(estimated.size());
  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    src.col(i) = estimated[static_cast<std::size_t>(i)];
    dst.col(i) = ground_truth[static_cast<std::size_t>(i)];
  }
  if (align) {
    const Eigen::Matrix4d t = Eigen::umeyama(src, dst, true);
    src = (t.topLeftCorner<3, 3>() * src).colwise() + t.topRightCorner<3, 1>();
  }
  return std::sqrt((src - dst).colwise().squaredNorm().mean());
}

inline double ate_rmse(const std::vector<SE3Pose>& estimated, const std::vector<SE3Pose>& ground_truth,
                       bool align = true) {
  std::vector<Vec3> a, b;
  for (const auto& p : estimated) a.push_back(p.translation());
  for (const auto& p : ground_truth) b.push_back(p.translation());
  return ate_rmse(a, b, align);
}

/// Mean absolute depth difference over pixels valid in both maps.
inline double depth_l1(const DepthMap& rendered, const Mask& rendered_valid, const DepthMap& gt,
                       const Mask& gt_valid) {
  if (!rendered.same_shape(gt)) throw ConfigError("depth_l1: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (!rendered_valid[p] || !gt_valid[p]) continue;
    sum += std::abs(rendered[p] - gt[p]);
    ++n;
  }
  if (!n) throw NoOverlap();
  return sum / static_cast<double>(n);
}

inline constexpr double kPsnrCap = 99.0;

/// -10 log10(MSE) over all channels of the masked pixels, capped at 99 dB.
inline double psnr(const Image& rendered, const Image& gt, const Mask* mask = nullptr) {
  if (!rendered.same_shape(gt)) throw ConfigError("psnr: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (mask && !(*mask)[p]) continue;
    sum += (rendered[p] - gt[p]).squaredNorm();
    n += 3;
  }
  if (!n) throw NoOverlap();
  const double mse = sum / static_cast<double>(n);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

/// One line of the trajectory file: `timestamp tx ty tz qx qy qz qw`.
struct TrajectoryEntry {
  double timestamp = 0.0;
  Vec3 t = Vec3::Zero();
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();

  static TrajectoryEntry from_pose(double timestamp, const SE3Pose& pose) {
    Eigen::Quaterniond q(pose.rotation());
    q.normalize();
    if (q.w() < 0.0) q.coeffs() *= -1.0;
    return {timestamp, pose.translation(), q};
  }
  SE3Pose pose() const { return {q.normalized().toRotationMatrix(), t}; }

  friend bool operator==(const TrajectoryEntry& a, const TrajectoryEntry& b) {
    return a.timestamp == b.timestamp && a.t == b.t && a.q.coeffs() == b.q.coeffs();
  }
};

inline std::string format_trajectory(const std::vector<TrajectoryEntry>& entries) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& e : entries)
    os << e.timestamp << ' ' << e.t.x() << ' ' << e.t.y() << ' ' << e.t.z() << ' ' << e.q.x() << ' '
       << e.q.y() << ' ' << e.q.z() << ' ' << e.q.w() << '\n';
  return os.str();
}

inline std::vector<TrajectoryEntry> parse_trajectory(std::istream& in, const std::string& origin = "<input>") {
  std::vector<TrajectoryEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    TrajectoryEntry e;
    double qx, qy, qz, qw;
    if (!(ls >> e.timestamp >> e.t.x() >> e.t.y() >> e.t.z() >> qx >> qy >> qz >> qw))
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 8 numbers");
    e.q = Eigen::Quaterniond(qw, qx, qy, qz);
    out.push_back(e);
  }
  return out;
}

inline void save_trajectory(const std::string& path, const std::vector<TrajectoryEntry>& entries) {
  std::ofstream os(path);
  os << format_trajectory(entries);
  if (!os) throw ConfigError("cannot write trajectory `" + path + "`");
}

inline std::vector<TrajectoryEntry> load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trajectory `" + path + "`");
  return parse_trajectory(in, path);
}

}  // namespace dspo
