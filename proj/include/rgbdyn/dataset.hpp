#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rgbdyn/geometry.hpp"
#include "rgbdyn/sim.hpp"

namespace rgbdyn {

inline constexpr int kSchemaVersion = 1;

// In-memory form of the on-disk container. Optional parts are empty when
// absent. Tensors are stored as float32, so values read back are the
// float-rounded values that were written.
struct Sequence {
  CameraIntrinsics intr;
  std::vector<RgbdFrame> frames;
  Eigen::MatrixXd actions;  // T x n; zero columns when there are no actions
  int k_gt = 0;
  std::vector<MaskStack> gt_masks;  // T, hard
  std::vector<FlowFields> gt_flow;  // T - 1
  std::vector<FlowFields> flow;     // predictions: flow that produced each frame
  std::vector<MaskStack> masks;     // predictions: carried masks
  std::optional<SceneSpec> scene_spec;
  // Index of frames[0] in the sequence it was derived from; predictions start
  // after their context frame.
  int first_frame = 0;

  int length() const { return static_cast<int>(frames.size()); }
  int action_dim() const { return static_cast<int>(actions.cols()); }
  void validate() const;
};

void write_sequence(const Sequence& seq, const std::string& dir);
Sequence read_sequence(const std::string& dir);

// Renders T frames, stepping every object by its velocity and, when the spec
// has an action map, object 0 by a uniformly sampled action.
Sequence generate_sequence(const SceneSpec& spec, int frames, std::uint64_t seed);
// Simulator state at frame t, replayed from the recorded spec and actions.
Scene scene_at(const Sequence& seq, int t);

void generate_dataset(const SceneSpec& spec, int frames, std::uint64_t seed, const std::string& dir);

// Rounds every stored plane through float32, matching what a write/read
// round trip returns.
Sequence quantized(const Sequence& seq);

}  // namespace rgbdyn
