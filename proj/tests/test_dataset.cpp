#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <gtest/gtest.h>

#include "rgbdyn/dataset.hpp"
#include "rgbdyn/error.hpp"
#include "rgbdyn/serialize.hpp"
#include "test_util.hpp"

using namespace rgbdyn;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("rgbdyn_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SceneSpec action_scene() {
  SceneSpec s = box_scene(12, 3);
  s.action.dim = 2;
  s.action.map = Eigen::MatrixXd::Zero(6, 2);
  s.action.map(3, 0) = 0.02;
  s.action.map(4, 1) = 0.02;
  s.depth_noise_std = 0.001;
  return s;
}

void expect_same(const Sequence& a, const Sequence& b) {
  ASSERT_EQ(a.length(), b.length());
  for (int t = 0; t < a.length(); ++t) {
    EXPECT_EQ(a.frames[t].rgb, b.frames[t].rgb);
    EXPECT_EQ(a.frames[t].depth, b.frames[t].depth);
    EXPECT_EQ(a.frames[t].valid, b.frames[t].valid);
  }
  EXPECT_EQ(a.actions, b.actions);
  ASSERT_EQ(a.gt_masks.size(), b.gt_masks.size());
  for (std::size_t t = 0; t < a.gt_masks.size(); ++t) EXPECT_EQ(a.gt_masks[t].masks, b.gt_masks[t].masks);
  ASSERT_EQ(a.gt_flow.size(), b.gt_flow.size());
  for (std::size_t t = 0; t < a.gt_flow.size(); ++t) {
    EXPECT_EQ(a.gt_flow[t].scene_flow.values, b.gt_flow[t].scene_flow.values);
    EXPECT_EQ(a.gt_flow[t].scene_flow.valid, b.gt_flow[t].scene_flow.valid);
    EXPECT_EQ(a.gt_flow[t].optical_flow.values, b.gt_flow[t].optical_flow.values);
    EXPECT_EQ(a.gt_flow[t].occlusion, b.gt_flow[t].occlusion);
  }
  EXPECT_EQ(a.first_frame, b.first_frame);
  EXPECT_EQ(a.k_gt, b.k_gt);
}

}  // namespace

TEST(Dataset, SingleFrameHasNoFlow) {
  TempDir tmp;
  generate_dataset(box_scene(10, 1), 1, 0, tmp / "d");
  const Sequence s = read_sequence(tmp / "d");
  EXPECT_EQ(s.length(), 1);
  EXPECT_TRUE(s.gt_flow.empty());
}

TEST(Dataset, WriteReadIsBitIdentical) {
  TempDir tmp;
  const Sequence q = quantized(generate_sequence(action_scene(), 4, 7));
  write_sequence(q, tmp / "d");
  const Sequence back = read_sequence(tmp / "d");
  expect_same(q, back);
  // A second round trip reproduces the files byte for byte.
  write_sequence(back, tmp / "e");
  for (const auto& entry : fs::directory_iterator(tmp / "d")) {
    EXPECT_EQ(slurp(entry.path()), slurp(fs::path(tmp / "e") / entry.path().filename())) << entry.path();
  }
}

TEST(Dataset, FixedSeedGivesIdenticalFiles) {
  TempDir tmp;
  generate_dataset(action_scene(), 3, 11, tmp / "a");
  generate_dataset(action_scene(), 3, 11, tmp / "b");
  int files = 0;
  for (const auto& entry : fs::directory_iterator(tmp / "a")) {
    EXPECT_EQ(slurp(entry.path()), slurp(fs::path(tmp / "b") / entry.path().filename()));
    ++files;
  }
  EXPECT_GT(files, 4);
}

TEST(Dataset, ReadBackMatchesRenders) {
  TempDir tmp;
  const SceneSpec spec = box_scene(10, 2);
  generate_dataset(spec, 2, 0, tmp / "d");
  const Sequence s = read_sequence(tmp / "d");
  const RenderResult r = render(Scene(spec));
  for (std::size_t i = 0; i < r.frame.rgb.size(); ++i) {
    EXPECT_EQ(s.frames[0].rgb[i], static_cast<double>(static_cast<float>(r.frame.rgb[i])));
  }
  for (std::size_t i = 0; i < r.frame.depth.size(); ++i) {
    EXPECT_EQ(s.frames[0].depth[i], static_cast<double>(static_cast<float>(r.frame.depth[i])));
  }
}

TEST(Dataset, SceneReplayMatchesRecordedFrames) {
  const Sequence s = generate_sequence(action_scene(), 4, 3);
  SceneSpec quiet = *s.scene_spec;
  quiet.depth_noise_std = 0;
  Sequence replay = s;
  replay.scene_spec = quiet;
  const RenderResult r = render(scene_at(replay, 3));
  EXPECT_EQ(r.frame.rgb, s.frames[3].rgb);
}

TEST(Dataset, MissingTensorFile) {
  TempDir tmp;
  generate_dataset(box_scene(8, 1), 2, 0, tmp / "d");
  fs::remove(tmp / "d/depth.bin");
  EXPECT_THROW(read_sequence(tmp / "d"), MissingTensorError);
}

TEST(Dataset, MissingManifest) {
  TempDir tmp;
  EXPECT_THROW(read_sequence(tmp / "nothing"), MissingTensorError);
}

TEST(Dataset, TruncatedTensorIsShapeMismatch) {
  TempDir tmp;
  generate_dataset(box_scene(8, 1), 2, 0, tmp / "d");
  fs::resize_file(tmp / "d/rgb.bin", fs::file_size(tmp / "d/rgb.bin") - 4);
  EXPECT_THROW(read_sequence(tmp / "d"), ShapeMismatchError);
}

TEST(Dataset, ManifestShapeDisagreement) {
  TempDir tmp;
  generate_dataset(box_scene(8, 1), 2, 0, tmp / "d");
  json m = load_json_file(tmp / "d/manifest.json");
  for (json& e : m["tensors"]) {
    if (e["name"] == "depth") e["shape"][1] = 9;
  }
  save_json_file(m, tmp / "d/manifest.json");
  EXPECT_THROW(read_sequence(tmp / "d"), ShapeMismatchError);
}

TEST(Dataset, DtypeAndEndiannessMismatch) {
  TempDir tmp;
  generate_dataset(box_scene(8, 1), 2, 0, tmp / "d");
  json m = load_json_file(tmp / "d/manifest.json");
  for (json& e : m["tensors"]) {
    if (e["name"] == "rgb") e["dtype"] = "uint8";
  }
  save_json_file(m, tmp / "d/manifest.json");
  EXPECT_THROW(read_sequence(tmp / "d"), DtypeMismatchError);

  generate_dataset(box_scene(8, 1), 2, 0, tmp / "e");
  m = load_json_file(tmp / "e/manifest.json");
  m["endianness"] = "big";
  save_json_file(m, tmp / "e/manifest.json");
  EXPECT_THROW(read_sequence(tmp / "e"), DtypeMismatchError);
}

TEST(Dataset, MalformedManifestIsValidationError) {
  TempDir tmp;
  generate_dataset(box_scene(8, 1), 2, 0, tmp / "d");
  json m = load_json_file(tmp / "d/manifest.json");
  m.erase("H");
  save_json_file(m, tmp / "d/manifest.json");
  EXPECT_THROW(read_sequence(tmp / "d"), ValidationError);
}

TEST(Serialize, WeightsInlineAndJsonAgree) {
  const LossWeights a = parse_weights("1,2,3,0.5,0.25,0,1,4");
  EXPECT_EQ(a.lambda[1], 2.0);
  EXPECT_EQ(a.alpha, 1);
  EXPECT_EQ(a.knn_k, 4);
  const LossWeights b = weights_from_json(weights_to_json(a));
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.alpha, b.alpha);
  EXPECT_EQ(a.knn_k, b.knn_k);
  EXPECT_THROW(parse_weights("1,2,3"), ValidationError);
  EXPECT_THROW(parse_weights("1,2,3,0.5,0.25,0,3,4"), ValidationError);
}

TEST(Serialize, SceneModelRoundTripIsExact) {
  Rng rng(4, "test.modelio");
  SceneModel m;
  m.motion.masks = random_masks(5, 6, 2, rng);
  m.motion.motions = {Se3{random_vec(rng, 0.1), random_vec(rng, 0.1)}, Se3{random_vec(rng, 0.1), random_vec(rng, 0.1)}};
  m.source_index = 3;
  const AnyModel back = model_from_json(json::parse(scene_model_to_json(m).dump()));
  ASSERT_TRUE(back.scene.has_value());
  EXPECT_EQ(back.scene->motion.masks.masks, m.motion.masks.masks);
  for (int j = 0; j < 2; ++j) EXPECT_EQ(back.scene->motion.motions[j].twist(), m.motion.motions[j].twist());
  EXPECT_EQ(back.scene->source_index, 3);
}

TEST(Serialize, SceneSpecRoundTrip) {
  const SceneSpec s = action_scene();
  const SceneSpec back = scene_spec_from_json(scene_spec_to_json(s));
  EXPECT_EQ(scene_spec_to_json(back), scene_spec_to_json(s));
  const RenderResult a = render(Scene(s)), b = render(Scene(back));
  EXPECT_EQ(a.frame.rgb, b.frame.rgb);
}
