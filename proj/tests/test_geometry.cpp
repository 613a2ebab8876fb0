#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dspo/geometry.hpp"
#include "dspo/keyvalue.hpp"
#include "dspo/raster.hpp"
#include "dspo/rng.hpp"
#include "test_support.hpp"

using namespace dspo;

namespace {

// Independent Rodrigues rotation about a unit axis.
Mat3 rodrigues(const Vec3& axis, double angle) {
  const Vec3 k = axis.normalized();
  Mat3 kx;
  kx << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  return Mat3::Identity() + std::sin(angle) * kx + (1.0 - std::cos(angle)) * kx * kx;
}

const Intrinsics kK{100.0, 100.0, 50.0, 50.0, 100, 100};

}  // namespace

TEST(Se3Exp, ZeroIsIdentity) {
  const SE3Pose p = se3_exp(Vec6::Zero());
  EXPECT_EQ(p.rotation(), Mat3::Identity());
  EXPECT_EQ(p.translation(), Vec3::Zero());
}

TEST(Se3Exp, PureTranslation) {
  Vec6 xi;
  xi << 1, 2, 3, 0, 0, 0;
  const SE3Pose p = se3_exp(xi);
  EXPECT_TRUE(p.rotation().isApprox(Mat3::Identity(), 1e-15));
  EXPECT_TRUE(p.translation().isApprox(Vec3(1, 2, 3), 1e-15));
}

TEST(Se3Exp, QuarterTurnMatchesRodrigues) {
  Vec6 xi;
  xi << 0, 0, 0, 0, 0, M_PI / 2;
  const SE3Pose p = se3_exp(xi);
  EXPECT_LT((p.rotation() - rodrigues(Vec3::UnitZ(), M_PI / 2)).norm(), 1e-14);
  EXPECT_LT((p.rotation() * Vec3::UnitX() - Vec3::UnitY()).norm(), 1e-14);
}

TEST(Se3Exp, RandomRotationsMatchRodrigues) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int n = 0; n < 50; ++n) {
    const Vec3 w(u(rng), u(rng), u(rng));
    Vec6 xi;
    xi << 0, 0, 0, w;
    EXPECT_LT((se3_exp(xi).rotation() - rodrigues(w, w.norm())).norm(), 1e-13);
  }
}

TEST(Se3Exp, LogInvertsExp) {
  std::mt19937 rng(5);
  for (int n = 0; n < 50; ++n) {
    const Vec6 xi = fixtures::random_tangent(rng, 0.8, 1.0);
    EXPECT_LT((se3_log(se3_exp(xi)) - xi).norm(), 1e-10);
  }
  Vec6 tiny = Vec6::Constant(1e-9);
  EXPECT_LT((se3_log(se3_exp(tiny)) - tiny).norm(), 1e-18);
}

TEST(Se3Pose, InverseAndComposition) {
  std::mt19937 rng(7);
  const SE3Pose a = se3_exp(fixtures::random_tangent(rng, 0.5, 1.0));
  const SE3Pose b = se3_exp(fixtures::random_tangent(rng, 0.5, 1.0));
  const Vec3 x(0.3, -0.2, 1.5);
  EXPECT_LT(((a * b) * x - a * (b * x)).norm(), 1e-14);
  EXPECT_LT((a.inverse() * (a * x) - x).norm(), 1e-14);
}

TEST(Project, PrincipalPoint) {
  EXPECT_TRUE(project(Vec3(0, 0, 1), SE3Pose::identity(), kK).isApprox(Vec2(50, 50)));
}

TEST(Project, HandEvaluatedPinhole) {
  EXPECT_LT((project(Vec3(0.1, 0, 1), SE3Pose::identity(), kK) - Vec2(60, 50)).norm(), 1e-12);
}

TEST(Project, ZeroDepthThrows) {
  EXPECT_THROW(project(Vec3(0.1, 0.2, 0.0), SE3Pose::identity(), kK), NonPositiveDepth);
  EXPECT_THROW(project(Vec3(0.1, 0.2, -1.0), SE3Pose::identity(), kK), NonPositiveDepth);
}

TEST(Unproject, Examples) {
  EXPECT_TRUE(unproject(Vec2(50, 50), 1.0, kK, SE3Pose::identity()).isApprox(Vec3(0, 0, 1)));
  EXPECT_LT((unproject(Vec2(60, 50), 1.0, kK, SE3Pose::identity()) - Vec3(0.1, 0, 1)).norm(), 1e-15);
  EXPECT_THROW(unproject(Vec2(1, 1), 0.0, kK, SE3Pose::identity()), NonPositiveDepth);
}

TEST(Unproject, RoundTrip) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> px(0.0, 99.0), dz(0.2, 8.0);
  for (int n = 0; n < 100; ++n) {
    const SE3Pose pose = se3_exp(fixtures::random_tangent(rng, 0.7, 2.0));
    const Vec2 uv(px(rng), px(rng));
    const Vec3 x = unproject(uv, dz(rng), kK, pose);
    EXPECT_LT((project(x, pose, kK) - uv).norm(), 1e-9);
  }
}

TEST(Reproject, SamePoseIsIdentityField) {
  DisparityMap d(8, 6, 0.5);
  const auto k = fixtures::tiny_intrinsics();
  const auto c = reproject(d, SE3Pose::identity(), SE3Pose::identity(), k);
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 8; ++u) {
      EXPECT_TRUE(c.valid(u, v));
      EXPECT_LT((c.field(u, v) - Vec2(u, v)).norm(), 1e-12);
    }
}

TEST(Reproject, ForwardTranslationScalesAboutPrincipalPoint) {
  // Plane at z = 2 and camera j one half metre closer: scale 2 / 1.5.
  const auto k = fixtures::tiny_intrinsics();
  DisparityMap d(8, 6, 0.5);
  const SE3Pose pj(Mat3::Identity(), Vec3(0, 0, 0.5));
  const auto c = reproject(d, SE3Pose::identity(), pj, k);
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 8; ++u) {
      const Vec2 oracle = project(unproject(Vec2(u, v), 2.0, k, SE3Pose::identity()), pj, k);
      const Vec2 scaled = Vec2(k.cx, k.cy) + (4.0 / 3.0) * (Vec2(u, v) - Vec2(k.cx, k.cy));
      EXPECT_LT((c.field(u, v) - oracle).norm(), 1e-12);
      EXPECT_LT((c.field(u, v) - scaled).norm(), 1e-12);
    }
}

TEST(Reproject, BehindCameraIsInvalid) {
  const auto k = fixtures::tiny_intrinsics();
  DisparityMap d(8, 6, 0.5);
  const SE3Pose pj(Mat3::Identity(), Vec3(0, 0, 3.0));
  const auto c = reproject(d, SE3Pose::identity(), pj, k);
  EXPECT_EQ(count_true(c.valid), 0u);
}

TEST(Bilinear, InterpolatesAndDifferentiates) {
  ScalarMap r(3, 2);
  r(0, 0) = 1;
  r(1, 0) = 3;
  r(0, 1) = 5;
  r(1, 1) = 11;
  double du = 0, dv = 0;
  const auto x = bilinear(r, 0.25, 0.5, nullptr, &du, &dv);
  ASSERT_TRUE(x);
  EXPECT_DOUBLE_EQ(*x, 0.75 * 0.5 * 1 + 0.25 * 0.5 * 3 + 0.75 * 0.5 * 5 + 0.25 * 0.5 * 11);
  EXPECT_DOUBLE_EQ(du, 0.5 * 2 + 0.5 * 6);
  EXPECT_DOUBLE_EQ(dv, 0.75 * 4 + 0.25 * 8);
  EXPECT_FALSE(bilinear(r, -0.1, 0.0));
  EXPECT_FALSE(bilinear(r, 2.5, 0.0));
  EXPECT_TRUE(bilinear(r, 2.0, 1.0));
}

TEST(DepthDisparity, ReciprocalWithClamp) {
  DepthMap z(2, 1);
  z[0] = 4.0;
  z[1] = 0.0;
  const auto d = depth_to_disparity(z);
  EXPECT_DOUBLE_EQ(d[0], 0.25);
  EXPECT_DOUBLE_EQ(d[1], kMinDisparity);
  EXPECT_DOUBLE_EQ(disparity_to_depth(d)[0], 4.0);
}

TEST(CounterRng, PureFunctionOfCounters) {
  const CounterRng a(42), b(42), c(43);
  EXPECT_EQ(a.bits(5, 6), b.bits(5, 6));
  EXPECT_NE(a.bits(5, 6), c.bits(5, 6));
  EXPECT_NE(a.substream(1).bits(0), a.substream(2).bits(0));
  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = a.normal(static_cast<std::uint64_t>(i));
    mean += x;
    sq += x * x;
  }
  mean /= n;
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(KeyValueFile, ParsesAndRejectsUnknown) {
  std::istringstream in("a = 1.5  # comment\nb = x y\n\nflag = on\n");
  auto kv = KeyValueFile::parse(in);
  EXPECT_DOUBLE_EQ(kv.get_double("a", 0.0), 1.5);
  EXPECT_TRUE(kv.get_bool("flag", false));
  EXPECT_THROW(kv.reject_unknown("t"), ConfigError);
  EXPECT_EQ(kv.get_string("b", ""), "x y");
  EXPECT_NO_THROW(kv.reject_unknown("t"));
}

TEST(KeyValueFile, MalformedInput) {
  std::istringstream dup("a = 1\na = 2\n");
  EXPECT_THROW(KeyValueFile::parse(dup), ConfigError);
  std::istringstream noeq("just words\n");
  EXPECT_THROW(KeyValueFile::parse(noeq), ConfigError);
  std::istringstream bad("n = 1.5\n");
  auto kv = KeyValueFile::parse(bad);
  EXPECT_THROW(kv.get_int("n", 0), ConfigError);
}
