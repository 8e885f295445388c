#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rgbdyn/geometry.hpp"

namespace rgbdyn {

enum class Shape { kPlane, kBox, kSphere };
enum class TextureKind { kUniform, kChecker, kNoise };

// Textures are evaluated in object-local coordinates so they move with the
// object. `cell` is the checker cell edge or the noise lattice spacing, in
// metres.
struct TextureSpec {
  TextureKind kind = TextureKind::kUniform;
  std::array<Vec3, 2> colors{Vec3(0.5, 0.5, 0.5), Vec3(0.5, 0.5, 0.5)};
  double cell = 0.02;
  std::uint64_t seed = 0;

  Vec3 color_at(const Vec3& local) const;
};

struct ObjectSpec {
  Shape shape = Shape::kBox;
  // Sphere: radius in size.x. Box: edge lengths. Plane: extent in local x, y
  // (the plane is local z = 0).
  Vec3 size = Vec3(0.1, 0.1, 0.1);
  Se3 pose;      // object-to-camera
  Se3 velocity;  // per-step motion about the object centre, camera axes
  TextureSpec texture;
};

// Linear map from an action to a twist (omega, T) on object 0, applied about
// the object centre in camera axes.
struct ActionSpec {
  int dim = 0;
  Eigen::MatrixXd map;  // 6 x dim
  double low = -1.0;
  double high = 1.0;
};

struct SceneSpec {
  CameraIntrinsics intr;
  // Infinite plane (local z = 0) behind the objects.
  Se3 background_pose;
  TextureSpec background_texture;
  std::vector<ObjectSpec> objects;
  double depth_noise_std = 0.0;
  ActionSpec action;

  void validate() const;
  int mask_count() const { return static_cast<int>(objects.size()) + 1; }
};

struct Scene {
  SceneSpec spec;
  std::vector<Se3> poses;  // current object poses

  explicit Scene(SceneSpec s);
};

struct RenderResult {
  RgbdFrame frame;
  Grid<int> labels;  // 0 = background, 1..N = objects, -1 = no hit
  MaskStack gt_masks;
  PointCloud cloud;
  Image local;  // hit point in the hit object's local frame
};

RenderResult render(const Scene& scene);

struct StepResult {
  Scene next;
  FlowFields gt_flow;
};

// Applies camera-frame motions (p' = R p + T) to every object pose.
StepResult step_scene(const Scene& scene, const std::vector<Se3>& motions);
// Action mode: object 0 moves by motion_about(centre, map * action); every
// other object stays in place.
StepResult step_scene(const Scene& scene, const Eigen::VectorXd& action);
// Camera-frame motions an action induces (object 0 moves, others stay).
std::vector<Se3> action_motions(const Scene& scene, const Eigen::VectorXd& action);
// Pose update alone, without rendering ground truth.
Scene advance_scene(const Scene& scene, const std::vector<Se3>& motions);
// Current camera-frame position of a material point given in an object's
// local frame (label 0 is the background).
Vec3 material_point(const Scene& scene, int label, const Vec3& local);
// Each object's constant velocity from its spec.
std::vector<Se3> velocity_motions(const Scene& scene);

// Ground-truth flow between two renders of the same scene.
FlowFields ground_truth_flow(const Scene& before, const Scene& after);

}  // namespace rgbdyn
