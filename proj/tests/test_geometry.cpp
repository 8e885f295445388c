#include <cmath>

#include <Eigen/LU>
#include <gtest/gtest.h>

#include "oracles/oracles.hpp"
#include "rgbdyn/error.hpp"
#include "rgbdyn/geometry.hpp"
#include "rgbdyn/sim.hpp"
#include "test_util.hpp"

using namespace rgbdyn;
using namespace testutil;

TEST(Camera, LiftsPixelWithPinholeAlgebra) {
  RgbdFrame f(5, 5);
  f.depth.fill(1.0);
  f.depth(3, 2) = 2.0;
  const PointCloud c = depth_to_pointcloud(f, {1, 1, 0, 0, 5, 5});
  const Vec3 p = c.at(3, 2);
  EXPECT_DOUBLE_EQ(p.x(), 4.0);
  EXPECT_DOUBLE_EQ(p.y(), 6.0);
  EXPECT_DOUBLE_EQ(p.z(), 2.0);
}

TEST(Camera, InvalidDepthStaysInvalid) {
  RgbdFrame f(4, 4);
  f.depth.fill(1.0);
  f.valid(1, 1) = 0;
  const PointCloud c = depth_to_pointcloud(f, intrinsics(4, 4, 4));
  EXPECT_EQ(c.valid(1, 1), 0);
  EXPECT_EQ(c.valid(0, 0), 1);
}

TEST(Camera, ProjectsOnKnownPixels) {
  const CameraIntrinsics intr{100, 100, 32, 32, 64, 64};
  const Vec2 a = project_point({0, 0, 1}, intr);
  EXPECT_DOUBLE_EQ(a.x(), 32);
  EXPECT_DOUBLE_EQ(a.y(), 32);
  const Vec2 b = project_point({0.1, 0, 1}, intr);
  EXPECT_NEAR(b.x(), 42, 1e-12);
  EXPECT_DOUBLE_EQ(b.y(), 32);
  EXPECT_THROW(project_point({0, 0, -1}, intr), BehindCameraError);
}

TEST(Camera, RoundTripRandomDepth) {
  Rng rng(1, "test.roundtrip");
  const CameraIntrinsics intr{50, 50, 4, 4, 8, 8};
  for (int trial = 0; trial < 20; ++trial) {
    RgbdFrame f = random_frame(8, 8, rng, 0.5, 3.0);
    f.valid(trial % 8, (trial * 3) % 8) = 0;
    const PointCloud c = depth_to_pointcloud(f, intr);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        if (!c.valid(y, x)) continue;
        const Vec2 uv = project_point(c.at(y, x), intr);
        EXPECT_NEAR(uv.x(), x, 1e-6);
        EXPECT_NEAR(uv.y(), y, 1e-6);
      }
    }
  }
}

TEST(Camera, ProjectionJacobianMatchesDifferences) {
  Rng rng(2, "test.projjac");
  const CameraIntrinsics intr{40, 45, 3.5, 4.0, 8, 8};
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 2.0));
    const auto j = projection_jacobian(p, intr);
    for (int i = 0; i < 3; ++i) {
      Vec3 up = p, dn = p;
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      const Vec2 d = (project_point(up, intr) - project_point(dn, intr)) / 2e-6;
      EXPECT_NEAR(j(0, i), d.x(), 1e-4 * std::max(1.0, std::abs(d.x())));
      EXPECT_NEAR(j(1, i), d.y(), 1e-4 * std::max(1.0, std::abs(d.y())));
    }
  }
}

TEST(Rotation, KnownQuarterTurn) {
  const Vec3 r = rotation_matrix({0, 0, M_PI / 2}) * Vec3(1, 0, 0);
  EXPECT_NEAR(r.x(), 0, 1e-9);
  EXPECT_NEAR(r.y(), 1, 1e-9);
  EXPECT_NEAR(r.z(), 0, 1e-9);
}

TEST(Rotation, OrthonormalForManyAngles) {
  Rng rng(3, "test.rotations");
  const double norms[] = {0.0, 1e-12, 1e-6, M_PI};
  for (int i = 0; i < 1000; ++i) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const double n = i < 400 ? norms[i % 4] : rng.uniform(0, M_PI);
    const Mat3 r = rotation_matrix(n * axis);
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
  }
}

TEST(Rotation, MatchesExponentialSeries) {
  Rng rng(4, "test.series");
  for (int i = 0; i < 50; ++i) {
    const Vec3 w = random_vec(rng, 2.0);
    EXPECT_LT((rotation_matrix(w) - oracle::rotation_series(w)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Rotation, InverseComposesToIdentity) {
  Rng rng(5, "test.compose");
  for (int i = 0; i < 100; ++i) {
    const Vec3 w = random_vec(rng, 3.0);
    EXPECT_LT((rotation_matrix(w) * rotation_matrix(-w) - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    const Se3 m{w, random_vec(rng, 1.0)};
    const Se3 id = se3_compose(m, se3_inverse(m));
    const Vec3 p = random_vec(rng, 1.0);
    EXPECT_LT((se3_apply(id, p) - p).norm(), 1e-9);
  }
}

TEST(Rotation, DerivativesMatchDifferences) {
  Rng rng(6, "test.drot");
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 w = trial == 0 ? Vec3::Zero() : random_vec(rng, 1.5);
    const auto d = rotation_derivatives(w);
    for (int i = 0; i < 3; ++i) {
      Vec3 up = w, dn = w;
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      const Mat3 fd = (rotation_matrix(up) - rotation_matrix(dn)) / 2e-6;
      EXPECT_LT((fd - d[i]).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Rotation, LogInvertsExp) {
  Rng rng(7, "test.log");
  for (int i = 0; i < 100; ++i) {
    Vec3 w = random_vec(rng, 1.0);
    if (w.norm() > 3.0) w *= 3.0 / w.norm();
    EXPECT_LT((rotation_log(rotation_matrix(w)) - w).norm(), 1e-8);
  }
}

namespace {

PointCloud random_cloud(int h, int w, Rng& rng) {
  return depth_to_pointcloud(random_frame(h, w, rng), intrinsics(h, w, 8));
}

}  // namespace

TEST(Transform, SingleObjectTranslation) {
  Rng rng(8, "test.t1");
  const PointCloud c = random_cloud(6, 6, rng);
  RigidMotionSet m = RigidMotionSet::identity(6, 6, 1);
  m.motions[0].trans = Vec3(0.1, 0, 0);
  const PointCloud t = transform_pointcloud(c, m);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) {
      EXPECT_NEAR((t.at(y, x) - c.at(y, x) - Vec3(0.1, 0, 0)).norm(), 0, 1e-12);
    }
  }
}

TEST(Transform, HalfMasksBlendMotions) {
  Rng rng(9, "test.t2");
  const PointCloud c = random_cloud(6, 6, rng);
  RigidMotionSet m = RigidMotionSet::identity(6, 6, 2);
  m.masks.masks.fill(0.5);
  m.motions[1].trans = Vec3(0.2, 0, 0);
  const PointCloud t = transform_pointcloud(c, m);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) EXPECT_NEAR((t.at(y, x) - c.at(y, x) - Vec3(0.1, 0, 0)).norm(), 0, 1e-12);
  }
}

TEST(Transform, IdentityIsExactFixedPoint) {
  Rng rng(10, "test.identity");
  const int h = 8, w = 8;
  const CameraIntrinsics intr = intrinsics(h, w, 8);
  const PointCloud c = depth_to_pointcloud(random_frame(h, w, rng), intr);
  RigidMotionSet m = RigidMotionSet::identity(h, w, 3);
  m.masks = random_masks(h, w, 3, rng);
  const PointCloud t = transform_pointcloud(c, m);
  EXPECT_EQ(t.points, c.points);
  const FlowFields f = compute_flow_fields(t, c, intr);
  for (double v : f.scene_flow.values.data()) EXPECT_EQ(v, 0.0);
  for (double v : f.optical_flow.values.data()) EXPECT_EQ(v, 0.0);
  for (auto o : f.occlusion.data()) EXPECT_EQ(o, 0);
}

TEST(Transform, StaysInConvexHullOfObjectMotions) {
  Rng rng(11, "test.hull");
  const int h = 6, w = 6, k = 3;
  const PointCloud c = random_cloud(h, w, rng);
  RigidMotionSet m;
  m.masks = random_masks(h, w, k, rng);
  for (int j = 0; j < k; ++j) m.motions.push_back({random_vec(rng, 0.3), random_vec(rng, 0.2)});
  const PointCloud t = transform_pointcloud(c, m);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Barycentric coordinates of the result against the K candidates must
      // reproduce the masks, which are non-negative and sum to one.
      Vec3 expect = Vec3::Zero();
      for (int j = 0; j < k; ++j) expect += m.masks.masks(y, x, j) * se3_apply(m.motions[j], c.at(y, x));
      EXPECT_LT((t.at(y, x) - expect).norm(), 1e-12);
    }
  }
}

TEST(Transform, BackwardMatchesFiniteDifferences) {
  Rng rng(12, "test.tback");
  const int h = 8, w = 8, k = 2;
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud c = random_cloud(h, w, rng);
    RigidMotionSet m;
    m.masks = random_masks(h, w, k, rng);
    for (int j = 0; j < k; ++j) m.motions.push_back({random_vec(rng, 0.4), random_vec(rng, 0.1)});
    const Image weights = random_image(h, w, 3, rng, -1, 1);
    auto loss = [&](const PointCloud& cc, const RigidMotionSet& mm) {
      const PointCloud t = transform_pointcloud(cc, mm);
      double s = 0;
      for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * t.points[i];
      return s;
    };
    const TransformGradient g = transform_pointcloud_backward(c, m, weights);

    std::vector<double> twist;
    for (const Se3& s : m.motions) for (int i = 0; i < 6; ++i) twist.push_back(s.twist()[i]);
    auto f_twist = [&](const std::vector<double>& v) {
      RigidMotionSet mm = m;
      for (int j = 0; j < k; ++j) {
        Vec6 xi;
        for (int i = 0; i < 6; ++i) xi[i] = v[j * 6 + i];
        mm.motions[j] = Se3::from_twist(xi);
      }
      return loss(c, mm);
    };
    std::vector<double> analytic;
    for (int j = 0; j < k; ++j) {
      for (int i = 0; i < 3; ++i) analytic.push_back(g.omega[j][i]);
      for (int i = 0; i < 3; ++i) analytic.push_back(g.trans[j][i]);
    }
    EXPECT_LT(oracle::max_relative_error(analytic, oracle::numeric_gradient(f_twist, twist)), 1e-4);

    auto f_mask = [&](const std::vector<double>& v) {
      RigidMotionSet mm = m;
      mm.masks.masks.data() = v;
      return loss(c, mm);
    };
    EXPECT_LT(oracle::max_relative_error(g.masks.data(),
                                         oracle::numeric_gradient(f_mask, m.masks.masks.data())),
              1e-4);

    auto f_points = [&](const std::vector<double>& v) {
      PointCloud cc = c;
      cc.points.data() = v;
      return loss(cc, m);
    };
    EXPECT_LT(oracle::max_relative_error(g.points.data(),
                                         oracle::numeric_gradient(f_points, c.points.data())),
              1e-4);
  }
}

TEST(Flow, SceneFlowOfTranslation) {
  Rng rng(13, "test.sf");
  const PointCloud c = random_cloud(5, 5, rng);
  EXPECT_EQ(scene_flow(c, c).values, Image(5, 5, 3));
  RigidMotionSet m = RigidMotionSet::identity(5, 5, 1);
  m.motions[0].trans = Vec3(0.1, 0, 0);
  const VectorField v = scene_flow(transform_pointcloud(c, m), c);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) {
      EXPECT_NEAR(v.values(y, x, 0), 0.1, 1e-12);
      EXPECT_NEAR(v.values(y, x, 1), 0.0, 1e-12);
      EXPECT_NEAR(v.values(y, x, 2), 0.0, 1e-12);
    }
  }
}

TEST(Flow, ApproachingPlaneExpandsRadially) {
  const int n = 9;
  RgbdFrame f(n, n);
  f.depth.fill(2.0);
  const CameraIntrinsics intr{10, 10, 4, 4, n, n};
  const PointCloud c = depth_to_pointcloud(f, intr);
  RigidMotionSet m = RigidMotionSet::identity(n, n, 1);
  m.motions[0].trans = Vec3(0, 0, -0.5);
  const VectorField u = optical_flow(scene_flow(transform_pointcloud(c, m), c), c, intr);
  EXPECT_NEAR(u.values(4, 4, 0), 0.0, 1e-12);
  EXPECT_NEAR(u.values(4, 4, 1), 0.0, 1e-12);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      // Flow points away from the principal point.
      EXPECT_GE(u.values(y, x, 0) * (x - 4), 0.0);
      EXPECT_GE(u.values(y, x, 1) * (y - 4), 0.0);
    }
  }
}

TEST(Flow, OpticalFlowIsProjectedSceneFlow) {
  Rng rng(14, "test.of");
  const int h = 8, w = 8;
  const CameraIntrinsics intr = intrinsics(h, w, 8);
  const PointCloud c = depth_to_pointcloud(random_frame(h, w, rng), intr);
  RigidMotionSet m = RigidMotionSet::identity(h, w, 1);
  m.motions[0] = {random_vec(rng, 0.1), random_vec(rng, 0.05)};
  const PointCloud t = transform_pointcloud(c, m);
  const VectorField u = optical_flow(scene_flow(t, c), c, intr);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 d = project_point(t.at(y, x), intr) - project_point(c.at(y, x), intr);
      EXPECT_NEAR(u.values(y, x, 0), d.x(), 1e-9);
      EXPECT_NEAR(u.values(y, x, 1), d.y(), 1e-9);
    }
  }
}

TEST(Flow, OpticalFlowBackwardMatchesFiniteDifferences) {
  Rng rng(15, "test.ofback");
  const int h = 8, w = 8;
  const CameraIntrinsics intr = intrinsics(h, w, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud c = depth_to_pointcloud(random_frame(h, w, rng), intr);
    VectorField v(h, w, 3);
    v.valid = c.valid;
    for (double& x : v.values.data()) x = rng.uniform(-0.05, 0.05);
    const Image weights = random_image(h, w, 2, rng, -1, 1);
    auto loss = [&](const VectorField& vv, const PointCloud& cc) {
      const VectorField u = optical_flow(vv, cc, intr);
      double s = 0;
      for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * u.values[i];
      return s;
    };
    const OpticalFlowGradient g = optical_flow_backward(v, c, intr, weights);
    auto f_v = [&](const std::vector<double>& x) {
      VectorField vv = v;
      vv.values.data() = x;
      return loss(vv, c);
    };
    EXPECT_LT(oracle::max_relative_error(g.scene.data(), oracle::numeric_gradient(f_v, v.values.data())),
              1e-4);
    auto f_p = [&](const std::vector<double>& x) {
      PointCloud cc = c;
      cc.points.data() = x;
      return loss(v, cc);
    };
    EXPECT_LT(oracle::max_relative_error(g.points.data(), oracle::numeric_gradient(f_p, c.points.data())),
              1e-4);
  }
}

TEST(Occlusion, IdentityHasNoHoles) {
  Rng rng(16, "test.occ");
  const CameraIntrinsics intr = intrinsics(8, 8, 8);
  const PointCloud c = depth_to_pointcloud(random_frame(8, 8, rng), intr);
  const Mask o = occlusion_mask(c, intr);
  for (auto v : o.data()) EXPECT_EQ(v, 0);
}

TEST(Occlusion, EverythingOutOfViewIsAHole) {
  Rng rng(17, "test.occ2");
  const CameraIntrinsics intr = intrinsics(8, 8, 8);
  const PointCloud c = depth_to_pointcloud(random_frame(8, 8, rng), intr);
  RigidMotionSet m = RigidMotionSet::identity(8, 8, 1);
  m.motions[0].trans = Vec3(50, 0, 0);
  const Mask o = occlusion_mask(transform_pointcloud(c, m), intr);
  for (auto v : o.data()) EXPECT_EQ(v, 1);
}

TEST(Occlusion, VacatedStripBehindShiftedSquare) {
  // 8 px square at depth 1 over a plane at depth 2, moved +5 px in u.
  const int n = 24;
  const CameraIntrinsics intr{20, 20, 11.5, 11.5, n, n};
  SceneSpec s;
  s.intr = intr;
  s.background_pose.trans = Vec3(0, 0, 2.0);
  ObjectSpec o;
  o.shape = Shape::kBox;
  o.size = Vec3(0.4, 0.4, 0.01);
  o.pose.trans = Vec3(0, 0, 1.0);
  s.objects.push_back(o);
  const Scene before(s);
  const RenderResult r0 = render(before);
  // 5 px at depth 1 with fx = 20 is 0.25 m; the box front face sits at 0.995.
  const double shift = 5.0 * 0.995 / 20.0;
  const Scene after = advance_scene(before, {Se3{Vec3::Zero(), Vec3(shift, 0, 0)}});
  const FlowFields gt = ground_truth_flow(before, after);
  for (int y = 0; y < n; ++y) {
    int first = -1, last = -1, count = 0;
    bool on_square = false;
    for (int x = 0; x < n; ++x) on_square = on_square || r0.labels(y, x) == 1;
    for (int x = 0; x < n; ++x) {
      if (gt.occlusion(y, x)) {
        if (first < 0) first = x;
        last = x;
        ++count;
      }
    }
    if (!on_square) {
      EXPECT_EQ(count, 0) << "row " << y;
      continue;
    }
    int left = n;
    for (int x = 0; x < n; ++x) if (r0.labels(y, x) == 1) left = std::min(left, x);
    EXPECT_EQ(count, 5) << "row " << y;
    EXPECT_EQ(first, left) << "row " << y;
    EXPECT_EQ(last, left + 4) << "row " << y;
  }
}
