#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "oracles/oracles.hpp"
#include "rgbdyn/error.hpp"
#include "rgbdyn/metrics.hpp"
#include "test_util.hpp"

using namespace rgbdyn;
using namespace testutil;

TEST(Psnr, IdenticalImagesHitTheCap) {
  Rng rng(1, "test.psnr");
  const Image a = random_image(9, 9, 3, rng);
  const ImageMetrics m = image_metrics(a, a);
  EXPECT_EQ(m.psnr, 99.0);
  EXPECT_NEAR(m.ssim, 1.0, 1e-12);
}

TEST(Psnr, UniformMseGivesTwentyDecibels) {
  Image a(8, 8, 3, 0.3), b(8, 8, 3, 0.4);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, StrictlyDecreasesWithNoiseAmplitude) {
  Rng rng(2, "test.psnrmono");
  const Image gt = random_image(10, 10, 3, rng, 0.3, 0.7);
  Image noise = random_image(10, 10, 3, rng, -1, 1);
  double last = 1e9;
  for (double amp : {0.001, 0.01, 0.05, 0.1, 0.2}) {
    Image pred = gt;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += amp * noise[i];
    const double p = psnr(pred, gt);
    EXPECT_LT(p, last);
    last = p;
  }
}

TEST(Psnr, MaskRestrictsTheMean) {
  Image a(4, 4, 1, 0.0), b(4, 4, 1, 0.0);
  Mask valid(4, 4, 1, 0);
  for (int x = 0; x < 4; ++x) {
    b(3, x) = 1.0;      // large error, masked out
    valid(0, x) = 1;
    b(0, x) = 0.1;      // MSE 0.01 on the kept row
  }
  EXPECT_NEAR(psnr(a, b, &valid), 20.0, 1e-9);
}

TEST(Ssim, MatchesBruteForceWindows) {
  Rng rng(3, "test.ssim");
  for (int trial = 0; trial < 10; ++trial) {
    const Image x = random_image(12 + trial % 3, 11 + trial % 4, 3, rng);
    Image y = x;
    for (double& v : y.data()) v = std::clamp(v + rng.uniform(-0.2, 0.2), 0.0, 1.0);
    EXPECT_NEAR(ssim(x, y), oracle::ssim_brute(x, y), 1e-9);
  }
}

TEST(Ssim, StaysInRange) {
  Rng rng(4, "test.ssimrange");
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = random_image(9, 9, 1, rng), y = random_image(9, 9, 1, rng);
    const double s = ssim(x, y);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Metrics, DimensionMismatchThrows) {
  EXPECT_THROW(image_metrics(Image(4, 4, 3), Image(4, 5, 3)), ValidationError);
  EXPECT_THROW(depth_metrics(Image(4, 4, 1), Image(4, 4, 1), Mask(4, 4, 1, 0)), ValidationError);
}

TEST(Depth, ClosedForms) {
  Rng rng(5, "test.depth");
  const Image gt = random_image(6, 7, 1, rng, 0.5, 2.0);
  const Mask valid(6, 7, 1, 1);
  const DepthMetrics same = depth_metrics(gt, gt, valid);
  EXPECT_EQ(same.rmse, 0.0);
  EXPECT_EQ(same.absrel, 0.0);

  Image scaled = gt;
  for (double& v : scaled.data()) v *= 1.1;
  EXPECT_NEAR(depth_metrics(scaled, gt, valid).absrel, 0.1, 1e-12);

  Image shifted = gt;
  for (double& v : shifted.data()) v += 0.05;
  EXPECT_NEAR(depth_metrics(shifted, gt, valid).rmse, 0.05, 1e-12);
}

TEST(Depth, InvariantToValidPixelLayout) {
  // Same multiset of (pred, gt) pairs in a different arrangement.
  Rng rng(6, "test.depthlayout");
  Image p(5, 5, 1), g(5, 5, 1), p2(5, 5, 1), g2(5, 5, 1);
  Mask v(5, 5, 1, 0), v2(5, 5, 1, 0);
  for (int i = 0; i < 10; ++i) {
    const double a = rng.uniform(0.5, 2), b = rng.uniform(0.5, 2);
    p[i] = a, g[i] = b, v[i] = 1;
    p2[24 - 2 * i] = a, g2[24 - 2 * i] = b, v2[24 - 2 * i] = 1;
  }
  const DepthMetrics m1 = depth_metrics(p, g, v), m2 = depth_metrics(p2, g2, v2);
  EXPECT_NEAR(m1.rmse, m2.rmse, 1e-12);
  EXPECT_NEAR(m1.absrel, m2.absrel, 1e-12);
}

TEST(Depth, NoValidPixelsThrows) {
  EXPECT_THROW(depth_metrics(Image(3, 3, 1, 1.0), Image(3, 3, 1, 1.0), Mask(3, 3, 1, 0)), ValidationError);
}
