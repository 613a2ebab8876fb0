#pragma once

// Raster dumps: PFM for float data, binary PPM/PGM for 8-bit previews.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "dspo/errors.hpp"
#include "dspo/raster.hpp"

namespace dspo {

namespace detail {

inline void require(const std::ostream& os, const std::string& path) {
  if (!os) throw ConfigError("cannot write `" + path + "`");
}

inline std::uint8_t to_byte(double x) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Single-channel PFM; rows are stored bottom to top per the format.
inline void write_pfm(const std::string& path, const ScalarMap& r) {
  std::ofstream os(path, std::ios::binary);
  const bool little = std::endian::native == std::endian::little;
  os << "Pf\n" << r.width() << ' ' << r.height() << '\n' << (little ? "-1.0" : "1.0") << '\n';
  for (int v = r.height() - 1; v >= 0; --v)
    for (int u = 0; u < r.width(); ++u) {
      const float f = static_cast<float>(r(u, v));
      os.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  detail::require(os, path);
}

inline void write_pfm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  const bool little = std::endian::native == std::endian::little;
  os << "PF\n" << img.width() << ' ' << img.height() << '\n' << (little ? "-1.0" : "1.0") << '\n';
  for (int v = img.height() - 1; v >= 0; --v)
    for (int u = 0; u < img.width(); ++u)
      for (int c = 0; c < 3; ++c) {
        const float f = static_cast<float>(img(u, v)[c]);
        os.write(reinterpret_cast<const char*>(&f), sizeof f);
      }
  detail::require(os, path);
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  os << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  for (const auto& px : img.data())
    for (int c = 0; c < 3; ++c) os.put(static_cast<char>(detail::to_byte(px[c])));
  detail::require(os, path);
}

/// Depth preview scaled so that `max_value` maps to white.
inline void write_pgm(const std::string& path, const ScalarMap& r, double max_value) {
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << r.width() << ' ' << r.height() << "\n255\n";
  const double s = max_value > 0.0 ? 1.0 / max_value : 0.0;
  for (double x : r.data()) os.put(static_cast<char>(detail::to_byte(x * s)));
  detail::require(os, path);
}

}  // namespace dspo
