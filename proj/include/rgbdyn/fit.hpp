#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "rgbdyn/geometry.hpp"
#include "rgbdyn/losses.hpp"
#include "rgbdyn/warp.hpp"

namespace rgbdyn {

enum class MaskInit {
  kUniform,  // uniform logits plus N(0, 0.01^2) noise
  kSeeded,   // logits seeded from the frame difference, plus the same noise
};

struct FitOptions {
  int k = 3;
  int steps = 200;
  double lr = 0.05;
  MaskInit mask_init = MaskInit::kSeeded;
  std::uint64_t seed = 0;
  double convergence_tol = 1e-6;
  // Mask-logit gradients are multiplied by this before stepping; 0 means the
  // pixel count, which undoes the 1/N of the pixel-mean losses.
  double mask_step_scale = 0.0;
  double armijo_c = 1e-4;
  // Iterations during which only the twists move; the masks join earlier if
  // the twists stall.
  int twist_warmup = 40;
  // Per-object translation grid (metres) scanned before descent; a radius of
  // zero starts every twist at identity.
  double init_search_radius = 0.06;
  double init_search_step = 0.02;
  WarpOptions warp;
  // Overrides mask_init when set (H x W x K logits).
  std::optional<Image> initial_logits;

  void validate() const;
};

struct SceneModel {
  RigidMotionSet motion;
  std::vector<LossBreakdown> loss_trace;
  bool converged = false;
  int source_index = 0;
};

// Per-object affine map from an n-dim action to a 6-dim twist (omega, T)
// taken about the object's pivot. Missing pivots mean the camera origin.
struct ActionModel {
  int action_dim = 0;
  std::vector<Eigen::MatrixXd> gain;  // K x (6 x n)
  std::vector<Vec6> bias;             // K
  std::vector<Vec3> pivots;           // K, camera coordinates at source_index
  MaskStack masks;                    // aligned with the frame at source_index
  int source_index = 0;

  int object_count() const { return static_cast<int>(gain.size()); }
  std::vector<Se3> motions_for(const Eigen::VectorXd& action) const;
};

// ---- single prediction step ----------------------------------------------

struct StepOutput {
  RgbdFrame frame;
  FlowFields flow;
  PointCloud transformed;
  Image carried;  // extra channels warped alongside the frame
};

// transform -> flow -> splat -> inpaint -> composite for one frame.
StepOutput predict_step(const RgbdFrame& frame, const RigidMotionSet& motion,
                        const CameraIntrinsics& intr, const WarpOptions& warp,
                        const Image* carry = nullptr);

// ---- differentiable objective --------------------------------------------

MaskStack softmax_masks(const Image& logits);

struct MotionParams {
  Image logits;             // H x W x K
  std::vector<Vec6> twists;  // K

  double dot(const MotionParams& other) const;
  void axpy(double a, const MotionParams& x);  // this += a * x
};

class FitObjective {
 public:
  FitObjective(RgbdFrame source, RgbdFrame target, CameraIntrinsics intr, LossWeights weights,
               WarpOptions warp);

  // Total loss and, when grad is non-null, its gradient with respect to the
  // mask logits and twists. Returns total = +inf when the prediction is
  // degenerate (everything leaves the frame).
  LossBreakdown evaluate(const MotionParams& params, MotionParams* grad) const;

  const PointCloud& source_cloud() const { return source_cloud_; }
  const PointCloud& target_cloud() const { return target_cloud_; }

 private:
  RgbdFrame source_;
  RgbdFrame target_;
  CameraIntrinsics intr_;
  LossWeights weights_;
  WarpOptions warp_;
  PointCloud source_cloud_;
  PointCloud target_cloud_;
  Mask all_valid_;
};

Image initial_mask_logits(const RgbdFrame& source, const RgbdFrame& target, const FitOptions& opts);

SceneModel fit_pair(const RgbdFrame& frame_t, const RgbdFrame& frame_t1,
                    const CameraIntrinsics& intr, const LossWeights& weights,
                    const FitOptions& opts);

// ---- rollout ----------------------------------------------------------------

struct RolloutStep {
  RgbdFrame frame;
  FlowFields flow;
  MaskStack masks;  // masks carried into the predicted frame
};

std::vector<RolloutStep> rollout(const SceneModel& model, const RgbdFrame& context,
                                 const CameraIntrinsics& intr, int steps,
                                 const WarpOptions& warp = {});

std::vector<RolloutStep> rollout(const ActionModel& model, const RgbdFrame& context,
                                 const std::vector<Eigen::VectorXd>& actions,
                                 const CameraIntrinsics& intr, int steps,
                                 const WarpOptions& warp = {});

// ---- action-conditioned model -------------------------------------------

struct Transition {
  RgbdFrame from;
  RgbdFrame to;
  Eigen::VectorXd action;
};

ActionModel fit_action_model(const std::vector<Transition>& data, const CameraIntrinsics& intr,
                             const LossWeights& weights, const FitOptions& opts);

}  // namespace rgbdyn
