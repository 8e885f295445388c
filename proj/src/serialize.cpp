#include "rgbdyn/serialize.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

namespace {

Vec3 vec3_from(const json& j) {
  if (j.is_number()) return Vec3::Constant(j.get<double>());
  const auto v = j.get<std::vector<double>>();
  require(v.size() == 3, "json: expected a 3-vector");
  return {v[0], v[1], v[2]};
}

json vec3_to(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ValidationError(std::string(what) + ": " + e.what());
  }
}

const char* shape_name(Shape s) {
  switch (s) {
    case Shape::kPlane: return "plane";
    case Shape::kBox: return "box";
    case Shape::kSphere: return "sphere";
  }
  return "box";
}

Shape shape_from(const std::string& s) {
  if (s == "plane") return Shape::kPlane;
  if (s == "box") return Shape::kBox;
  if (s == "sphere") return Shape::kSphere;
  throw ValidationError("scene: unknown shape " + s);
}

json texture_to(const TextureSpec& t) {
  json j;
  switch (t.kind) {
    case TextureKind::kUniform: j["type"] = "uniform"; break;
    case TextureKind::kChecker: j["type"] = "checker"; break;
    case TextureKind::kNoise: j["type"] = "noise"; break;
  }
  j["colors"] = json::array({vec3_to(t.colors[0]), vec3_to(t.colors[1])});
  j["cell"] = t.cell;
  j["seed"] = t.seed;
  return j;
}

TextureSpec texture_from(const json& j) {
  TextureSpec t;
  const std::string type = j.value("type", std::string("uniform"));
  if (type == "uniform") t.kind = TextureKind::kUniform;
  else if (type == "checker") t.kind = TextureKind::kChecker;
  else if (type == "noise") t.kind = TextureKind::kNoise;
  else throw ValidationError("scene: unknown texture " + type);
  if (j.contains("color")) t.colors = {vec3_from(j["color"]), vec3_from(j["color"])};
  if (j.contains("colors")) {
    require(j["colors"].size() == 2, "scene: texture needs two colors");
    t.colors = {vec3_from(j["colors"][0]), vec3_from(j["colors"][1])};
  }
  t.cell = j.value("cell", t.cell);
  t.seed = j.value("seed", t.seed);
  return t;
}

json mask_to(const MaskStack& m) { return m.masks.data(); }

MaskStack mask_from(const json& j, int h, int w, int k) {
  Image img(h, w, k);
  img.data() = j.get<std::vector<double>>();
  require(img.data().size() == static_cast<std::size_t>(h) * w * k, "model: mask size mismatch");
  return MaskStack(std::move(img));
}

}  // namespace

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void save_json_file(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

json intrinsics_to_json(const CameraIntrinsics& i) {
  return {{"fx", i.fx}, {"fy", i.fy}, {"cx", i.cx}, {"cy", i.cy}, {"width", i.width}, {"height", i.height}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  return guarded("intrinsics", [&] {
    CameraIntrinsics i;
    i.fx = j.at("fx").get<double>();
    i.fy = j.at("fy").get<double>();
    i.cx = j.at("cx").get<double>();
    i.cy = j.at("cy").get<double>();
    i.width = j.at("width").get<int>();
    i.height = j.at("height").get<int>();
    i.validate();
    return i;
  });
}

json se3_to_json(const Se3& m) { return {{"omega", vec3_to(m.omega)}, {"trans", vec3_to(m.trans)}}; }

Se3 se3_from_json(const json& j) {
  return guarded("pose", [&] {
    Se3 m;
    if (j.contains("omega")) m.omega = vec3_from(j["omega"]);
    if (j.contains("trans")) m.trans = vec3_from(j["trans"]);
    return m;
  });
}

json scene_spec_to_json(const SceneSpec& s) {
  json j;
  j["intrinsics"] = intrinsics_to_json(s.intr);
  j["background"] = {{"pose", se3_to_json(s.background_pose)}, {"texture", texture_to(s.background_texture)}};
  j["objects"] = json::array();
  for (const ObjectSpec& o : s.objects) {
    j["objects"].push_back({{"shape", shape_name(o.shape)},
                            {"size", vec3_to(o.size)},
                            {"pose", se3_to_json(o.pose)},
                            {"velocity", se3_to_json(o.velocity)},
                            {"texture", texture_to(o.texture)}});
  }
  j["depth_noise_std"] = s.depth_noise_std;
  if (s.action.dim > 0) {
    json rows = json::array();
    for (int r = 0; r < 6; ++r) {
      json row = json::array();
      for (int c = 0; c < s.action.dim; ++c) row.push_back(s.action.map(r, c));
      rows.push_back(row);
    }
    j["action"] = {{"dim", s.action.dim}, {"map", rows}, {"low", s.action.low}, {"high", s.action.high}};
  }
  return j;
}

SceneSpec scene_spec_from_json(const json& j) {
  return guarded("scene spec", [&] {
    SceneSpec s;
    s.intr = intrinsics_from_json(j.at("intrinsics"));
    if (j.contains("background")) {
      const json& b = j["background"];
      if (b.contains("pose")) s.background_pose = se3_from_json(b["pose"]);
      if (b.contains("depth")) s.background_pose.trans = Vec3(0.0, 0.0, b["depth"].get<double>());
      if (b.contains("texture")) s.background_texture = texture_from(b["texture"]);
    } else {
      s.background_pose.trans = Vec3(0.0, 0.0, 2.0);
    }
    for (const json& o : j.value("objects", json::array())) {
      ObjectSpec obj;
      obj.shape = shape_from(o.value("shape", std::string("box")));
      if (o.contains("size")) obj.size = vec3_from(o["size"]);
      if (o.contains("pose")) obj.pose = se3_from_json(o["pose"]);
      if (o.contains("velocity")) obj.velocity = se3_from_json(o["velocity"]);
      if (o.contains("texture")) obj.texture = texture_from(o["texture"]);
      s.objects.push_back(obj);
    }
    s.depth_noise_std = j.value("depth_noise_std", 0.0);
    if (j.contains("action")) {
      const json& a = j["action"];
      s.action.dim = a.at("dim").get<int>();
      const auto rows = a.at("map").get<std::vector<std::vector<double>>>();
      require(rows.size() == 6, "scene: action map needs 6 rows");
      s.action.map = Eigen::MatrixXd(6, s.action.dim);
      for (int r = 0; r < 6; ++r) {
        require(static_cast<int>(rows[r].size()) == s.action.dim, "scene: action map row length");
        for (int c = 0; c < s.action.dim; ++c) s.action.map(r, c) = rows[r][c];
      }
      s.action.low = a.value("low", -1.0);
      s.action.high = a.value("high", 1.0);
    }
    s.validate();
    return s;
  });
}

json weights_to_json(const LossWeights& w) {
  return {{"lambda", w.lambda},
          {"alpha", w.alpha},
          {"knn_k", w.knn_k},
          {"knn_match", w.knn_match == KnnMatch::kDepth ? "depth" : "euclidean"}};
}

LossWeights weights_from_json(const json& j) {
  return guarded("weights", [&] {
    LossWeights w;
    if (j.contains("lambda")) {
      const auto l = j["lambda"].get<std::vector<double>>();
      require(l.size() == 6, "weights: lambda needs six entries");
      std::copy(l.begin(), l.end(), w.lambda.begin());
    }
    for (int i = 0; i < 6; ++i) {
      const std::string key = "lambda" + std::to_string(i + 1);
      if (j.contains(key)) w.lambda[i] = j[key].get<double>();
    }
    w.alpha = j.value("alpha", w.alpha);
    w.knn_k = j.value("knn_k", w.knn_k);
    const std::string match = j.value("knn_match", std::string("euclidean"));
    require(match == "euclidean" || match == "depth", "weights: knn_match must be euclidean or depth");
    w.knn_match = match == "depth" ? KnnMatch::kDepth : KnnMatch::kEuclidean;
    w.validate();
    return w;
  });
}

LossWeights parse_weights(const std::string& arg) {
  const bool inline_form = !arg.empty() && arg.find(',') != std::string::npos &&
                           (std::isdigit(static_cast<unsigned char>(arg[0])) || arg[0] == '.' ||
                            arg[0] == '-' || arg[0] == '+');
  if (!inline_form) return weights_from_json(load_json_file(arg));
  std::vector<double> v;
  std::stringstream ss(arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      require(used == item.size(), "weights: bad number '" + item + "'");
    } catch (const std::logic_error&) {
      throw ValidationError("weights: bad number '" + item + "'");
    }
  }
  require(v.size() == 8, "weights: inline form needs l1..l6,alpha,knn_k");
  LossWeights w;
  std::copy(v.begin(), v.begin() + 6, w.lambda.begin());
  require(v[6] == std::floor(v[6]) && v[7] == std::floor(v[7]), "weights: alpha and knn_k must be integers");
  w.alpha = static_cast<int>(v[6]);
  w.knn_k = static_cast<int>(v[7]);
  w.validate();
  return w;
}

json icem_to_json(const IcemParams& p) {
  return {{"population", p.population},     {"min_std", p.min_std},
          {"max_std", p.max_std},           {"elite_frac", p.elite_frac},
          {"horizon", p.horizon},           {"max_iters", p.max_iters},
          {"alpha_momentum", p.alpha_momentum}, {"beta_momentum", p.beta_momentum},
          {"noise_beta", p.noise_beta},     {"pop_decay", p.pop_decay},
          {"cost_decay", p.cost_decay},     {"action_low", p.action_low},
          {"action_high", p.action_high}};
}

IcemParams icem_from_json(const json& j) {
  return guarded("icem", [&] {
    IcemParams p;
    p.population = j.value("population", p.population);
    p.min_std = j.value("min_std", p.min_std);
    p.max_std = j.value("max_std", p.max_std);
    p.elite_frac = j.value("elite_frac", p.elite_frac);
    p.horizon = j.value("horizon", p.horizon);
    p.max_iters = j.value("max_iters", p.max_iters);
    p.alpha_momentum = j.value("alpha_momentum", p.alpha_momentum);
    p.beta_momentum = j.value("beta_momentum", p.beta_momentum);
    p.noise_beta = j.value("noise_beta", p.noise_beta);
    p.pop_decay = j.value("pop_decay", p.pop_decay);
    p.cost_decay = j.value("cost_decay", p.cost_decay);
    p.action_low = j.value("action_low", p.action_low);
    p.action_high = j.value("action_high", p.action_high);
    p.validate();
    return p;
  });
}

SearchSpace search_space_from_json(const json& j) {
  return guarded("search space", [&] {
    SearchSpace s;
    for (const auto& [name, spec] : j.items()) {
      if (spec.is_array()) {
        s.categorical.push_back({name, spec.get<std::vector<double>>()});
      } else {
        RangeParam r;
        r.name = name;
        r.low = spec.at("low").get<double>();
        r.high = spec.at("high").get<double>();
        r.log = spec.value("log", true);
        s.ranges.push_back(r);
      }
    }
    s.validate();
    return s;
  });
}

json scene_model_to_json(const SceneModel& m) {
  json j;
  j["type"] = "scene";
  j["height"] = m.motion.masks.height();
  j["width"] = m.motion.masks.width();
  j["k"] = m.motion.masks.count();
  j["source_index"] = m.source_index;
  j["converged"] = m.converged;
  j["iterations"] = m.loss_trace.empty() ? 0 : static_cast<int>(m.loss_trace.size()) - 1;
  j["loss_trace"] = json::array();
  for (const LossBreakdown& l : m.loss_trace) {
    j["loss_trace"].push_back({{"rec_rgb", l.rec_rgb},           {"rec_depth", l.rec_depth},
                               {"knn", l.knn},                   {"smooth_scene", l.smooth_scene},
                               {"smooth_optical", l.smooth_optical}, {"kl", l.kl},
                               {"total", l.total}});
  }
  if (!m.loss_trace.empty()) j["final_loss"] = j["loss_trace"].back();
  j["motions"] = json::array();
  for (const Se3& s : m.motion.motions) j["motions"].push_back(se3_to_json(s));
  j["masks"] = mask_to(m.motion.masks);
  return j;
}

json action_model_to_json(const ActionModel& m) {
  json j;
  j["type"] = "action";
  j["height"] = m.masks.height();
  j["width"] = m.masks.width();
  j["k"] = m.object_count();
  j["action_dim"] = m.action_dim;
  j["source_index"] = m.source_index;
  j["gain"] = json::array();
  j["bias"] = json::array();
  for (int k = 0; k < m.object_count(); ++k) {
    json rows = json::array();
    for (int r = 0; r < 6; ++r) {
      json row = json::array();
      for (int c = 0; c < m.action_dim; ++c) row.push_back(m.gain[k](r, c));
      rows.push_back(row);
    }
    j["gain"].push_back(rows);
    j["bias"].push_back(std::vector<double>(m.bias[k].data(), m.bias[k].data() + 6));
  }
  if (!m.pivots.empty()) {
    j["pivots"] = json::array();
    for (const Vec3& c : m.pivots) j["pivots"].push_back(vec3_to(c));
  }
  j["masks"] = mask_to(m.masks);
  return j;
}

AnyModel model_from_json(const json& j) {
  return guarded("model", [&] {
    AnyModel out;
    const std::string type = j.at("type").get<std::string>();
    const int h = j.at("height").get<int>();
    const int w = j.at("width").get<int>();
    const int k = j.at("k").get<int>();
    require(h > 0 && w > 0 && k >= 1, "model: bad dimensions");
    if (type == "scene") {
      SceneModel m;
      m.source_index = j.value("source_index", 0);
      m.converged = j.value("converged", false);
      for (const json& l : j.value("loss_trace", json::array())) {
        LossBreakdown b;
        b.rec_rgb = l.at("rec_rgb").get<double>();
        b.rec_depth = l.at("rec_depth").get<double>();
        b.knn = l.at("knn").get<double>();
        b.smooth_scene = l.at("smooth_scene").get<double>();
        b.smooth_optical = l.at("smooth_optical").get<double>();
        b.kl = l.at("kl").get<double>();
        b.total = l.at("total").get<double>();
        m.loss_trace.push_back(b);
      }
      m.motion.masks = mask_from(j.at("masks"), h, w, k);
      for (const json& s : j.at("motions")) m.motion.motions.push_back(se3_from_json(s));
      m.motion.validate();
      out.scene = std::move(m);
    } else if (type == "action") {
      ActionModel m;
      m.action_dim = j.at("action_dim").get<int>();
      m.source_index = j.value("source_index", 0);
      m.masks = mask_from(j.at("masks"), h, w, k);
      require(j.at("gain").size() == static_cast<std::size_t>(k) && j.at("bias").size() == static_cast<std::size_t>(k),
              "model: gain/bias count must equal k");
      for (int i = 0; i < k; ++i) {
        const auto rows = j["gain"][i].get<std::vector<std::vector<double>>>();
        require(rows.size() == 6, "model: gain needs 6 rows");
        Eigen::MatrixXd g(6, m.action_dim);
        for (int r = 0; r < 6; ++r) {
          require(static_cast<int>(rows[r].size()) == m.action_dim, "model: gain row length");
          for (int c = 0; c < m.action_dim; ++c) g(r, c) = rows[r][c];
        }
        m.gain.push_back(g);
        const auto b = j["bias"][i].get<std::vector<double>>();
        require(b.size() == 6, "model: bias needs 6 entries");
        m.bias.push_back(Eigen::Map<const Vec6>(b.data()));
      }
      if (j.contains("pivots")) {
        require(j["pivots"].size() == static_cast<std::size_t>(k), "model: pivot count must equal k");
        for (const json& c : j["pivots"]) m.pivots.push_back(vec3_from(c));
      }
      out.action = std::move(m);
    } else {
      throw ValidationError("model: unknown type " + type);
    }
    return out;
  });
}

}  // namespace rgbdyn
