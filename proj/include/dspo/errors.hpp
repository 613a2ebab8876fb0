#pragma once

#include <stdexcept>
#include <string>

namespace dspo {

/// Bad or incomplete configuration input. Maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Base for numerical failures. Maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonPositiveDepth : NumericalError {
  NonPositiveDepth() : NumericalError("point has non-positive depth") {}
};

struct NotPositiveDefinite : NumericalError {
  NotPositiveDefinite() : NumericalError("reduced system is not positive definite") {}
};

struct DegenerateScale : NumericalError {
  explicit DegenerateScale(double mean)
      : NumericalError("mean disparity " + std::to_string(mean) + " is below the clamp") {}
};

struct DegeneratePrior : NumericalError {
  DegeneratePrior() : NumericalError("scale/shift normal equations are singular") {}
};

struct EmptyFlow : NumericalError {
  EmptyFlow() : NumericalError("flow field has no valid pixels") {}
};

struct TooFewPoses : NumericalError {
  explicit TooFewPoses(std::size_t n)
      : NumericalError("trajectory alignment needs at least 3 poses, got " + std::to_string(n)) {}
};

struct NoOverlap : NumericalError {
  NoOverlap() : NumericalError("no co-valid pixels between the two rasters") {}
};

struct MissingProxy : NumericalError {
  MissingProxy() : NumericalError("pixel has no proxy depth") {}
};

}  // namespace dspo
