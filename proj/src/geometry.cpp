#include "rgbdyn/geometry.hpp"

#include <algorithm>

#include <Eigen/Geometry>
#include <cmath>
#include <sstream>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

void CameraIntrinsics::validate() const {
  require(width > 0 && height > 0, "camera intrinsics: frame size must be positive");
  require(fx > 0.0 && fy > 0.0, "camera intrinsics: focal lengths must be positive");
  require(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height,
          "camera intrinsics: principal point outside the frame");
}

void RgbdFrame::validate() const {
  require(rgb.channels() == 3 && depth.channels() == 1 && valid.channels() == 1,
          "frame: unexpected channel count");
  require(rgb.same_extent(depth) && valid.same_extent(depth), "frame: planes differ in size");
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    if (!std::isfinite(rgb[i])) throw ValidationError("frame: non-finite rgb value");
  }
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (valid[i] && !(depth[i] > 0.0 && std::isfinite(depth[i]))) {
      throw ValidationError("frame: valid pixel with non-positive depth");
    }
  }
}

MaskStack MaskStack::uniform(int height, int width, int k) {
  require(k >= 1, "mask stack: K must be at least 1");
  return MaskStack(Image(height, width, k, 1.0 / k));
}

MaskStack MaskStack::one_hot(const Grid<int>& labels, int k) {
  Image m(labels.height(), labels.width(), k, 0.0);
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) {
      const int id = labels(y, x);
      require(id >= 0 && id < k, "mask stack: label out of range");
      m(y, x, id) = 1.0;
    }
  }
  return MaskStack(std::move(m));
}

void MaskStack::validate(double tol) const {
  require(count() >= 1, "mask stack: K must be at least 1");
  for (int y = 0; y < height(); ++y) {
    for (int x = 0; x < width(); ++x) {
      double sum = 0.0;
      for (int k = 0; k < count(); ++k) {
        const double v = masks(y, x, k);
        require(v >= 0.0, "mask stack: negative mask value");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= tol, "mask stack: masks do not sum to one");
    }
  }
}

RigidMotionSet RigidMotionSet::identity(int height, int width, int k) {
  return {MaskStack::uniform(height, width, k), std::vector<Se3>(static_cast<std::size_t>(k))};
}

void RigidMotionSet::validate() const {
  require(static_cast<int>(motions.size()) == masks.count(),
          "rigid motion set: motion count differs from mask count");
}

// ---------------------------------------------------------------------------

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

Mat3 rotation_matrix(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  if (theta < kRodriguesTaylorThreshold) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  // (1 - cos t) / t^2 written without cancellation
  const double h = std::sin(0.5 * theta) / (0.5 * theta);
  const double b = 0.5 * h * h;
  return Mat3::Identity() + a * k + b * k * k;
}

std::array<Mat3, 3> rotation_derivatives(const Vec3& omega) {
  std::array<Mat3, 3> d;
  const double theta2 = omega.squaredNorm();
  if (std::sqrt(theta2) < kRodriguesTaylorThreshold) {
    const Mat3 k = skew(omega);
    for (int i = 0; i < 3; ++i) {
      const Mat3 e = skew(Vec3::Unit(i));
      d[i] = e + 0.5 * (e * k + k * e);
    }
    return d;
  }
  // Gallego & Yezzi closed form.
  const Mat3 r = rotation_matrix(omega);
  const Mat3 k = skew(omega);
  const Mat3 i_minus_r = Mat3::Identity() - r;
  for (int i = 0; i < 3; ++i) {
    const Vec3 col = omega.cross(i_minus_r.col(i));
    d[i] = ((omega[i] * k + skew(col)) / theta2) * r;
  }
  return d;
}

Vec3 se3_apply(const Se3& m, const Vec3& p) { return rotation_matrix(m.omega) * p + m.trans; }

Se3 motion_about(const Vec3& center, const Vec3& omega, const Vec3& trans) {
  const Mat3 r = rotation_matrix(omega);
  return {omega, center + trans - r * center};
}

Vec6 twist_about(const Se3& m, const Vec3& center) {
  Vec6 xi;
  xi << m.omega, m.trans + rotation_matrix(m.omega) * center - center;
  return xi;
}

Se3 se3_compose(const Se3& a, const Se3& b) {
  const Mat3 ra = rotation_matrix(a.omega);
  const Mat3 rb = rotation_matrix(b.omega);
  return {rotation_log(ra * rb), ra * b.trans + a.trans};
}

Se3 se3_inverse(const Se3& m) {
  const Mat3 rt = rotation_matrix(m.omega).transpose();
  return {-m.omega, -(rt * m.trans)};
}

Vec3 rotation_log(const Mat3& r) {
  const double cos_theta = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  if (theta < 1e-6) return 0.5 * v;
  if (theta > 3.14159) {
    // near pi: axis from the symmetric part
    const Mat3 s = 0.5 * (r + Mat3::Identity());
    int i = 0;
    s.diagonal().maxCoeff(&i);
    Vec3 axis = s.col(i) / std::sqrt(std::max(s(i, i), 1e-300));
    axis.normalize();
    if (axis.dot(v) < 0.0) axis = -axis;
    return theta * axis;
  }
  return 0.5 * theta / std::sin(theta) * v;
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  return rotation_log(a.transpose() * b).norm();
}

// ---------------------------------------------------------------------------

PointCloud depth_to_pointcloud(const RgbdFrame& frame, const CameraIntrinsics& intr) {
  if (frame.height() != intr.height || frame.width() != intr.width) {
    std::ostringstream msg;
    msg << "depth_to_pointcloud: frame is " << frame.height() << "x" << frame.width()
        << " but intrinsics are " << intr.height << "x" << intr.width;
    throw ValidationError(msg.str());
  }
  PointCloud cloud{Image(intr.height, intr.width, 3), Mask(intr.height, intr.width, 1, 0), true};
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      const double z = frame.depth(y, x);
      if (!frame.valid(y, x) || !(z > 0.0) || !std::isfinite(z)) continue;
      double* p = cloud.points.pixel(y, x);
      p[0] = (x - intr.cx) * z / intr.fx;
      p[1] = (y - intr.cy) * z / intr.fy;
      p[2] = z;
      cloud.valid(y, x) = 1;
    }
  }
  return cloud;
}

Vec2 project_point(const Vec3& p, const CameraIntrinsics& intr) {
  if (!(p.z() > 0.0)) throw BehindCameraError("project_point: point is behind the camera");
  return {intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy};
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p, const CameraIntrinsics& intr) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << intr.fx * iz, 0.0, -intr.fx * p.x() * iz * iz,
       0.0, intr.fy * iz, -intr.fy * p.y() * iz * iz;
  return j;
}

// ---------------------------------------------------------------------------

namespace {

void check_motion_matches(const PointCloud& cloud, const RigidMotionSet& motion) {
  motion.validate();
  require(motion.masks.height() == cloud.height() && motion.masks.width() == cloud.width(),
          "transform_pointcloud: mask size differs from point cloud");
}

}  // namespace

// Evaluated in displacement form p + sum_k M_k((R_k - I)p + T_k), which equals
// sum_k M_k(R_k p + T_k) when the masks sum to one and keeps identity motions
// exact.
PointCloud transform_pointcloud(const PointCloud& cloud, const RigidMotionSet& motion) {
  check_motion_matches(cloud, motion);
  const int k_count = motion.masks.count();
  std::vector<Mat3> delta(static_cast<std::size_t>(k_count));
  for (int k = 0; k < k_count; ++k) {
    delta[k] = rotation_matrix(motion.motions[k].omega) - Mat3::Identity();
  }
  PointCloud out{Image(cloud.height(), cloud.width(), 3), cloud.valid, false};
  for (int y = 0; y < cloud.height(); ++y) {
    for (int x = 0; x < cloud.width(); ++x) {
      if (!cloud.valid(y, x)) continue;
      const Vec3 p = cloud.at(y, x);
      Vec3 disp = Vec3::Zero();
      for (int k = 0; k < k_count; ++k) {
        const double m = motion.masks.masks(y, x, k);
        if (m == 0.0) continue;
        disp += m * (delta[k] * p + motion.motions[k].trans);
      }
      out.set(y, x, p + disp);
    }
  }
  return out;
}

TransformGradient transform_pointcloud_backward(const PointCloud& cloud,
                                                const RigidMotionSet& motion,
                                                const Image& grad_out) {
  check_motion_matches(cloud, motion);
  require(grad_out.same_extent(cloud.points) && grad_out.channels() == 3,
          "transform_pointcloud_backward: gradient shape mismatch");
  const int k_count = motion.masks.count();
  std::vector<Mat3> rot(static_cast<std::size_t>(k_count));
  std::vector<Mat3> delta(static_cast<std::size_t>(k_count));
  for (int k = 0; k < k_count; ++k) {
    rot[k] = rotation_matrix(motion.motions[k].omega);
    delta[k] = rot[k] - Mat3::Identity();
  }
  TransformGradient g{Image(cloud.height(), cloud.width(), 3),
                      Image(cloud.height(), cloud.width(), k_count),
                      std::vector<Vec3>(k_count, Vec3::Zero()),
                      std::vector<Vec3>(k_count, Vec3::Zero())};
  std::vector<Mat3> grad_rot(static_cast<std::size_t>(k_count), Mat3::Zero());
  for (int y = 0; y < cloud.height(); ++y) {
    for (int x = 0; x < cloud.width(); ++x) {
      if (!cloud.valid(y, x)) continue;
      const double* gp = grad_out.pixel(y, x);
      const Vec3 go(gp[0], gp[1], gp[2]);
      const Vec3 p = cloud.at(y, x);
      Vec3 gin = go;
      for (int k = 0; k < k_count; ++k) {
        const double m = motion.masks.masks(y, x, k);
        g.masks(y, x, k) = go.dot(delta[k] * p + motion.motions[k].trans);
        gin += m * (delta[k].transpose() * go);
        grad_rot[k] += m * go * p.transpose();
        g.trans[k] += m * go;
      }
      double* gi = g.points.pixel(y, x);
      gi[0] = gin.x();
      gi[1] = gin.y();
      gi[2] = gin.z();
    }
  }
  for (int k = 0; k < k_count; ++k) {
    const auto d = rotation_derivatives(motion.motions[k].omega);
    for (int i = 0; i < 3; ++i) g.omega[k][i] = grad_rot[k].cwiseProduct(d[i]).sum();
  }
  return g;
}

// ---------------------------------------------------------------------------

VectorField scene_flow(const PointCloud& transformed, const PointCloud& source) {
  require(transformed.points.same_shape(source.points), "scene_flow: point cloud size mismatch");
  VectorField v(source.height(), source.width(), 3);
  for (int y = 0; y < source.height(); ++y) {
    for (int x = 0; x < source.width(); ++x) {
      if (!transformed.valid(y, x) || !source.valid(y, x)) continue;
      for (int c = 0; c < 3; ++c) v.values(y, x, c) = transformed.points(y, x, c) - source.points(y, x, c);
      v.valid(y, x) = 1;
    }
  }
  return v;
}

// U is evaluated as proj(P + V) - proj(P); for an ordered cloud proj(P) is the
// pixel itself, and this form makes V = 0 give U = 0 exactly.
VectorField optical_flow(const VectorField& scene, const PointCloud& source,
                         const CameraIntrinsics& intr) {
  require(scene.values.same_extent(source.points) && scene.values.channels() == 3,
          "optical_flow: scene flow size mismatch");
  require(source.height() == intr.height && source.width() == intr.width,
          "optical_flow: intrinsics size mismatch");
  VectorField u(source.height(), source.width(), 2);
  for (int y = 0; y < source.height(); ++y) {
    for (int x = 0; x < source.width(); ++x) {
      if (!scene.valid(y, x) || !source.valid(y, x)) continue;
      const Vec3 p = source.at(y, x);
      const double* vp = scene.values.pixel(y, x);
      const Vec3 q = p + Vec3(vp[0], vp[1], vp[2]);
      if (!(q.z() > kMinDepth) || !(p.z() > kMinDepth) || !q.allFinite()) continue;
      const Vec2 d = project_point(q, intr) - project_point(p, intr);
      u.values(y, x, 0) = d.x();
      u.values(y, x, 1) = d.y();
      u.valid(y, x) = 1;
    }
  }
  return u;
}

OpticalFlowGradient optical_flow_backward(const VectorField& scene, const PointCloud& source,
                                          const CameraIntrinsics& intr, const Image& grad_flow) {
  OpticalFlowGradient g{Image(source.height(), source.width(), 3),
                        Image(source.height(), source.width(), 3)};
  for (int y = 0; y < source.height(); ++y) {
    for (int x = 0; x < source.width(); ++x) {
      if (!scene.valid(y, x) || !source.valid(y, x)) continue;
      const Vec3 p = source.at(y, x);
      const double* vp = scene.values.pixel(y, x);
      const Vec3 q = p + Vec3(vp[0], vp[1], vp[2]);
      if (!(q.z() > kMinDepth) || !(p.z() > kMinDepth) || !q.allFinite()) continue;
      const Vec2 gu(grad_flow(y, x, 0), grad_flow(y, x, 1));
      const Vec3 gq = projection_jacobian(q, intr).transpose() * gu;
      const Vec3 gp = gq - projection_jacobian(p, intr).transpose() * gu;
      for (int c = 0; c < 3; ++c) {
        g.scene(y, x, c) = gq[c];
        g.points(y, x, c) = gp[c];
      }
    }
  }
  return g;
}

Mask occlusion_mask(const PointCloud& transformed, const CameraIntrinsics& intr) {
  require(transformed.height() == intr.height && transformed.width() == intr.width,
          "occlusion_mask: intrinsics size mismatch");
  Mask landed(intr.height, intr.width, 1, 0);
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      if (!transformed.valid(y, x)) continue;
      const Vec3 q = transformed.at(y, x);
      if (!(q.z() > kMinDepth) || !q.allFinite()) continue;
      const Vec2 uv = project_point(q, intr);
      const double ur = std::round(uv.x());
      const double vr = std::round(uv.y());
      if (ur < 0.0 || vr < 0.0 || ur >= intr.width || vr >= intr.height) continue;
      landed(static_cast<int>(vr), static_cast<int>(ur)) = 1;
    }
  }
  Mask occ(intr.height, intr.width, 1, 0);
  for (std::size_t i = 0; i < occ.size(); ++i) occ[i] = landed[i] ? 0 : 1;
  return occ;
}

FlowFields compute_flow_fields(const PointCloud& transformed, const PointCloud& source,
                               const CameraIntrinsics& intr) {
  FlowFields f;
  f.scene_flow = scene_flow(transformed, source);
  f.optical_flow = optical_flow(f.scene_flow, source, intr);
  f.occlusion = occlusion_mask(transformed, intr);
  return f;
}

}  // namespace rgbdyn
