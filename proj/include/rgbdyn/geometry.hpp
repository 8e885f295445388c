#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

#include "rgbdyn/image.hpp"

namespace rgbdyn {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// Guard for projective division (metres).
inline constexpr double kMinDepth = 1e-4;
// Below this rotation angle the Rodrigues terms use their Taylor expansions.
inline constexpr double kRodriguesTaylorThreshold = 1e-8;

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const;
};

struct RgbdFrame {
  Image rgb;    // H x W x 3, values in [0, 1]
  Image depth;  // H x W x 1, metres
  Mask valid;   // H x W x 1, 1 where depth is a measurement

  RgbdFrame() = default;
  RgbdFrame(int height, int width)
      : rgb(height, width, 3), depth(height, width, 1), valid(height, width, 1, 1) {}

  int height() const { return depth.height(); }
  int width() const { return depth.width(); }
  void validate() const;
};

struct PointCloud {
  Image points;  // H x W x 3 camera-frame coordinates
  Mask valid;
  bool ordered = true;

  int height() const { return points.height(); }
  int width() const { return points.width(); }
  Vec3 at(int y, int x) const {
    const double* p = points.pixel(y, x);
    return {p[0], p[1], p[2]};
  }
  void set(int y, int x, const Vec3& v) {
    double* p = points.pixel(y, x);
    p[0] = v.x();
    p[1] = v.y();
    p[2] = v.z();
  }
};

// Rigid motion: axis-angle rotation followed by translation.
struct Se3 {
  Vec3 omega = Vec3::Zero();
  Vec3 trans = Vec3::Zero();

  static Se3 identity() { return {}; }
  static Se3 from_twist(const Vec6& xi) { return {xi.head<3>(), xi.tail<3>()}; }
  Vec6 twist() const {
    Vec6 xi;
    xi << omega, trans;
    return xi;
  }
};

// Soft object masks, K channels that sum to one per pixel.
struct MaskStack {
  Image masks;  // H x W x K

  MaskStack() = default;
  explicit MaskStack(Image m) : masks(std::move(m)) {}
  static MaskStack uniform(int height, int width, int k);
  static MaskStack one_hot(const Grid<int>& labels, int k);

  int count() const { return masks.channels(); }
  int height() const { return masks.height(); }
  int width() const { return masks.width(); }
  void validate(double tol = 1e-6) const;
};

struct RigidMotionSet {
  MaskStack masks;
  std::vector<Se3> motions;

  static RigidMotionSet identity(int height, int width, int k);
  void validate() const;
};

// Per-pixel vector field with its own validity plane.
struct VectorField {
  Image values;
  Mask valid;

  VectorField() = default;
  VectorField(int height, int width, int channels)
      : values(height, width, channels), valid(height, width, 1, 0) {}
};

struct FlowFields {
  VectorField scene_flow;    // 3 channels, metres
  VectorField optical_flow;  // 2 channels, pixels
  Mask occlusion;            // 1 where a pixel must be inpainted
};

// ---- SE(3) algebra --------------------------------------------------------

Mat3 skew(const Vec3& v);
Mat3 rotation_matrix(const Vec3& omega);
// dR/d omega_i for i = 0..2.
std::array<Mat3, 3> rotation_derivatives(const Vec3& omega);
Vec3 se3_apply(const Se3& m, const Vec3& p);

// Rigid motion about `center` (camera coordinates): rotation omega about the
// centre followed by translation trans, expressed as a camera-frame Se3.
Se3 motion_about(const Vec3& center, const Vec3& omega, const Vec3& trans);
// Inverse of motion_about: (omega, trans) of `m` taken about `center`.
Vec6 twist_about(const Se3& m, const Vec3& center);
Se3 se3_compose(const Se3& a, const Se3& b);  // a after b
Se3 se3_inverse(const Se3& m);
Vec3 rotation_log(const Mat3& r);
double rotation_angle_between(const Mat3& a, const Mat3& b);

// ---- camera ------------------------------------------------------------

PointCloud depth_to_pointcloud(const RgbdFrame& frame, const CameraIntrinsics& intr);
Vec2 project_point(const Vec3& p, const CameraIntrinsics& intr);
// Jacobian of project_point at p (2 x 3, row-major in the returned array).
Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p, const CameraIntrinsics& intr);

// ---- transformation layer ----------------------------------------------

PointCloud transform_pointcloud(const PointCloud& cloud, const RigidMotionSet& motion);

struct TransformGradient {
  Image points;                 // dL/dP (H x W x 3)
  Image masks;                  // dL/dM (H x W x K)
  std::vector<Vec3> omega;      // dL/d omega_k
  std::vector<Vec3> trans;      // dL/d T_k
};

TransformGradient transform_pointcloud_backward(const PointCloud& cloud,
                                                const RigidMotionSet& motion,
                                                const Image& grad_out);

// ---- flows ----------------------------------------------------------------

VectorField scene_flow(const PointCloud& transformed, const PointCloud& source);
VectorField optical_flow(const VectorField& scene, const PointCloud& source,
                         const CameraIntrinsics& intr);

struct OpticalFlowGradient {
  Image scene;   // dL/dV
  Image points;  // dL/dP
};
OpticalFlowGradient optical_flow_backward(const VectorField& scene, const PointCloud& source,
                                          const CameraIntrinsics& intr, const Image& grad_flow);

// O = 1 on pixels into which no valid transformed point projects (nearest
// pixel rounding).
Mask occlusion_mask(const PointCloud& transformed, const CameraIntrinsics& intr);

FlowFields compute_flow_fields(const PointCloud& transformed, const PointCloud& source,
                               const CameraIntrinsics& intr);

}  // namespace rgbdyn
