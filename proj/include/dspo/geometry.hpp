#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "dspo/errors.hpp"
#include "dspo/raster.hpp"

namespace dspo {

using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat34 = Eigen::Matrix<double, 3, 4>;

/// se(3) tangent vector laid out as (rho_translation, phi_rotation).
using Se3Tangent = Vec6;

inline constexpr double kMinDepth = 1e-6;      // z clamp, meters
inline constexpr double kMinDisparity = 1e-3;  // d clamp, 1/meters

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

/// Rigid camera-to-world transform.
class SE3Pose {
 public:
  SE3Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  SE3Pose(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {}

  static SE3Pose identity() { return {}; }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Vec3& translation() { return translation_; }

  SE3Pose inverse() const {
    Mat3 rt = rotation_.transpose();
    return {rt, -(rt * translation_)};
  }

  Vec3 operator*(const Vec3& p) const { return rotation_ * p + translation_; }
  SE3Pose operator*(const SE3Pose& o) const {
    return {rotation_ * o.rotation_, rotation_ * o.translation_ + translation_};
  }

  Mat34 matrix3x4() const {
    Mat34 m;
    m.leftCols<3>() = rotation_;
    m.col(3) = translation_;
    return m;
  }

  friend bool operator==(const SE3Pose& a, const SE3Pose& b) {
    return a.rotation_ == b.rotation_ && a.translation_ == b.translation_;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

namespace detail {

// Coefficients A = sin t / t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3 with
// Taylor fallbacks below 1e-6.
struct ExpCoefficients {
  double a, b, c;
};

inline ExpCoefficients exp_coefficients(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-6) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0};
  }
  const double s = std::sin(theta);
  const double c = std::cos(theta);
  return {s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)};
}

}  // namespace detail

inline Mat3 so3_exp(const Vec3& phi) {
  const auto k = detail::exp_coefficients(phi.norm());
  const Mat3 w = hat(phi);
  return Mat3::Identity() + k.a * w + k.b * w * w;
}

inline Vec3 so3_log(const Mat3& r) {
  const Vec3 axis_sin = 0.5 * vee(r - r.transpose());  // sin(t) * n
  const double s = axis_sin.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(s, c);
  if (theta < 1e-6) {
    // t / sin t ~ 1 + t^2/6 + 7 t^4 / 360
    const double t2 = theta * theta;
    return (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * axis_sin;
  }
  if (theta > M_PI - 1e-4) {
    // sin t -> 0 loses the axis; recover it from the quaternion instead.
    Eigen::AngleAxisd aa(Eigen::Quaterniond(r).normalized());
    return aa.angle() * aa.axis();
  }
  return (theta / s) * axis_sin;
}

inline SE3Pose se3_exp(const Se3Tangent& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 phi = xi.tail<3>();
  const auto k = detail::exp_coefficients(phi.norm());
  const Mat3 w = hat(phi);
  const Mat3 w2 = w * w;
  const Mat3 r = Mat3::Identity() + k.a * w + k.b * w2;
  const Mat3 v = Mat3::Identity() + k.b * w + k.c * w2;
  return {r, v * rho};
}

inline Se3Tangent se3_log(const SE3Pose& pose) {
  const Vec3 phi = so3_log(pose.rotation());
  const double theta = phi.norm();
  const Mat3 w = hat(phi);
  double coeff;  // (1 - A/(2B)) / t^2
  if (theta < 1e-6) {
    const double t2 = theta * theta;
    coeff = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    const auto k = detail::exp_coefficients(theta);
    coeff = (1.0 - k.a / (2.0 * k.b)) / (theta * theta);
  }
  const Mat3 v_inv = Mat3::Identity() - 0.5 * w + coeff * w * w;
  Se3Tangent xi;
  xi.head<3>() = v_inv * pose.translation();
  xi.tail<3>() = phi;
  return xi;
}

/// Pinhole intrinsics. Pixel (u, v) = (column, row).
struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && cx > 0.0 && cx < width && cy > 0.0 && cy < height;
  }

  /// K^-1 [u, v, 1]^T, i.e. the camera-frame ray with unit z.
  Vec3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
  Vec3 ray(const Vec2& px) const { return ray(px.x(), px.y()); }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// Projects a camera-frame point; nullopt when z <= kMinDepth.
inline std::optional<Vec2> project_camera(const Vec3& pc, const Intrinsics& k) {
  if (!(pc.z() > kMinDepth)) return std::nullopt;
  return Vec2{k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy};
}

/// World point into the image of a camera-to-world pose. Throws NonPositiveDepth.
inline Vec2 project(const Vec3& point_world, const SE3Pose& pose, const Intrinsics& k) {
  auto px = project_camera(pose.inverse() * point_world, k);
  if (!px) throw NonPositiveDepth();
  return *px;
}

/// Pixel at z-depth into world coordinates. Throws NonPositiveDepth.
inline Vec3 unproject(const Vec2& pixel, double depth, const Intrinsics& k, const SE3Pose& pose) {
  if (!(depth > 0.0)) throw NonPositiveDepth();
  return pose * (depth * k.ray(pixel));
}

/// Dense correspondence field from frame i to frame j.
struct Correspondence {
  Raster<Vec2> field;
  Mask valid;
};

/// Predicted location in j of every pixel of i, given i's disparity.
/// Invalid where the point lands behind j or more than one pixel outside j.
inline Correspondence reproject(const DisparityMap& disparity_i, const SE3Pose& pose_i,
                                const SE3Pose& pose_j, const Intrinsics& k) {
  const int w = disparity_i.width();
  const int h = disparity_i.height();
  Correspondence out{Raster<Vec2>(w, h, Vec2::Zero()), Mask(w, h, 0)};
  const SE3Pose rel = pose_j.inverse() * pose_i;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double d = std::max(disparity_i(u, v), kMinDisparity);
      auto px = project_camera(rel * (k.ray(u, v) / d), k);
      if (!px) continue;
      out.field(u, v) = *px;
      out.valid(u, v) = px->x() >= -1.0 && px->x() <= w && px->y() >= -1.0 && px->y() <= h;
    }
  }
  return out;
}

inline DisparityMap depth_to_disparity(const DepthMap& depth, const Mask* valid = nullptr,
                                       double fill = kMinDisparity) {
  DisparityMap out(depth.width(), depth.height(), fill);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (valid && !(*valid)[i]) continue;
    if (depth[i] > 0.0) out[i] = std::max(1.0 / depth[i], kMinDisparity);
  }
  return out;
}

inline DepthMap disparity_to_depth(const DisparityMap& disparity) {
  DepthMap out(disparity.width(), disparity.height(), 0.0);
  for (std::size_t i = 0; i < disparity.size(); ++i)
    out[i] = 1.0 / std::max(disparity[i], kMinDisparity);
  return out;
}

}  // namespace dspo
