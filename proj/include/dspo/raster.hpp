#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

namespace dspo {

/// Row-major image buffer with top-left origin. u indexes columns, v rows.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, const T& fill = T{})
      : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool contains(int u, int v) const { return u >= 0 && v >= 0 && u < width_ && v < height_; }
  std::size_t index(int u, int v) const {
    assert(contains(u, v));
    return static_cast<std::size_t>(v) * width_ + u;
  }

  T& operator()(int u, int v) { return data_[index(u, v)]; }
  const T& operator()(int u, int v) const { return data_[index(u, v)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Raster<auto>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

using Mask = Raster<std::uint8_t>;
using ScalarMap = Raster<double>;
using DepthMap = ScalarMap;      // meters
using DisparityMap = ScalarMap;  // 1/meters
using Image = Raster<Vec3>;      // RGB in [0,1]

inline std::size_t count_true(const Mask& m) {
  std::size_t n = 0;
  for (auto b : m.data()) n += b ? 1 : 0;
  return n;
}

/// Bilinear lookup at a continuous pixel position. Returns nullopt when any of
/// the four supporting pixels is outside the raster (or masked out, if a mask
/// is supplied). Optionally writes the gradient with respect to (u, v).
template <typename T>
std::optional<T> bilinear(const Raster<T>& r, double u, double v, const Mask* mask = nullptr,
                          T* du = nullptr, T* dv = nullptr) {
  if (!(u >= 0.0 && v >= 0.0)) return std::nullopt;
  const int u0 = static_cast<int>(std::floor(u));
  const int v0 = static_cast<int>(std::floor(v));
  int u1 = u0 + 1;
  int v1 = v0 + 1;
  // Exactly on the last row/column: collapse onto the edge sample.
  if (u0 == r.width() - 1 && u == static_cast<double>(u0)) u1 = u0;
  if (v0 == r.height() - 1 && v == static_cast<double>(v0)) v1 = v0;
  if (!r.contains(u0, v0) || !r.contains(u1, v1)) return std::nullopt;
  if (mask && !((*mask)(u0, v0) && (*mask)(u1, v0) && (*mask)(u0, v1) && (*mask)(u1, v1)))
    return std::nullopt;
  const double a = u - u0;
  const double b = v - v0;
  const T& p00 = r(u0, v0);
  const T& p10 = r(u1, v0);
  const T& p01 = r(u0, v1);
  const T& p11 = r(u1, v1);
  if (du) *du = (1.0 - b) * (p10 - p00) + b * (p11 - p01);
  if (dv) *dv = (1.0 - a) * (p01 - p00) + a * (p11 - p10);
  return (1.0 - a) * (1.0 - b) * p00 + a * (1.0 - b) * p10 + (1.0 - a) * b * p01 + a * b * p11;
}

}  // namespace dspo
