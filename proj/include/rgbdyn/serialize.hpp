#pragma once

#include <string>

#include <json.hpp>

#include "rgbdyn/fit.hpp"
#include "rgbdyn/hpo.hpp"
#include "rgbdyn/losses.hpp"
#include "rgbdyn/plan.hpp"
#include "rgbdyn/sim.hpp"

namespace rgbdyn {

using nlohmann::json;

json load_json_file(const std::string& path);
// Pretty-printed with sorted keys, so equal values give equal bytes.
void save_json_file(const json& j, const std::string& path);

json intrinsics_to_json(const CameraIntrinsics& intr);
CameraIntrinsics intrinsics_from_json(const json& j);

json se3_to_json(const Se3& m);
Se3 se3_from_json(const json& j);

json scene_spec_to_json(const SceneSpec& s);
SceneSpec scene_spec_from_json(const json& j);

json weights_to_json(const LossWeights& w);
LossWeights weights_from_json(const json& j);
// Either a JSON file path or eight inline numbers "l1,...,l6,alpha,knn_k".
LossWeights parse_weights(const std::string& arg);

json icem_to_json(const IcemParams& p);
// Missing keys keep their defaults.
IcemParams icem_from_json(const json& j);

SearchSpace search_space_from_json(const json& j);

json scene_model_to_json(const SceneModel& m);
json action_model_to_json(const ActionModel& m);

struct AnyModel {
  std::optional<SceneModel> scene;
  std::optional<ActionModel> action;
};
AnyModel model_from_json(const json& j);

}  // namespace rgbdyn
