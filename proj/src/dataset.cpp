#include "rgbdyn/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "rgbdyn/error.hpp"
#include "rgbdyn/rng.hpp"
#include "rgbdyn/serialize.hpp"

namespace rgbdyn {

namespace fs = std::filesystem;

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "float32 tensors need IEEE-754 floats");

enum class Dtype { kFloat32, kUint8 };

const char* dtype_name(Dtype d) { return d == Dtype::kFloat32 ? "float32" : "uint8"; }
std::size_t dtype_size(Dtype d) { return d == Dtype::kFloat32 ? 4 : 1; }

struct TensorOut {
  std::string name;
  std::vector<long> shape;
  Dtype dtype;
  std::vector<unsigned char> bytes;
};

void put_float(std::vector<unsigned char>& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

float get_float(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename PlaneFn>
TensorOut float_tensor(const std::string& name, std::vector<long> shape, std::size_t count, PlaneFn&& value) {
  TensorOut t{name, std::move(shape), Dtype::kFloat32, {}};
  t.bytes.reserve(count * 4);
  for (std::size_t i = 0; i < count; ++i) put_float(t.bytes, value(i));
  return t;
}

template <typename PlaneFn>
TensorOut byte_tensor(const std::string& name, std::vector<long> shape, std::size_t count, PlaneFn&& value) {
  TensorOut t{name, std::move(shape), Dtype::kUint8, {}};
  t.bytes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) t.bytes.push_back(value(i) ? 1 : 0);
  return t;
}

// Concatenated planes: element i of a [N][H][W][C] tensor.
template <typename Getter>
auto stacked(std::size_t per_frame, Getter&& get) {
  return [per_frame, get](std::size_t i) { return get(i / per_frame, i % per_frame); };
}

void write_field_tensors(std::vector<TensorOut>& out, const std::string& prefix,
                         const std::vector<FlowFields>& flows, int h, int w) {
  if (flows.empty()) return;
  const long n = static_cast<long>(flows.size());
  const std::size_t px = static_cast<std::size_t>(h) * w;
  auto field = [&](const std::string& name, int c, auto member) {
    out.push_back(float_tensor(prefix + name, {n, h, w, c}, n * px * c,
                               stacked(px * c, [&flows, member, c](std::size_t f, std::size_t i) {
                                 const VectorField& v = flows[f].*member;
                                 return v.valid[i / c] ? v.values[i] : kNaN;
                               })));
  };
  field("scene_flow", 3, &FlowFields::scene_flow);
  field("optical_flow", 2, &FlowFields::optical_flow);
  out.push_back(byte_tensor(prefix + "occlusion", {n, h, w, 1}, n * px,
                            stacked(px, [&](std::size_t f, std::size_t i) { return flows[f].occlusion[i] != 0; })));
}

// ---- reading ---------------------------------------------------------------

struct TensorIn {
  std::vector<long> shape;
  Dtype dtype;
  std::vector<unsigned char> bytes;

  std::size_t count() const {
    std::size_t c = 1;
    for (long s : shape) c *= static_cast<std::size_t>(s);
    return c;
  }
  double f(std::size_t i) const { return get_float(bytes.data() + 4 * i); }
  std::uint8_t u(std::size_t i) const { return bytes[i]; }
};

class Reader {
 public:
  explicit Reader(const std::string& dir) : dir_(dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    if (!fs::exists(mpath)) throw MissingTensorError("dataset: no manifest.json in " + dir);
    manifest_ = load_json_file(mpath.string());
  }

  const json& manifest() const { return manifest_; }

  bool has(const std::string& name) const { return entry(name) != nullptr; }

  TensorIn load(const std::string& name, Dtype dtype, const std::vector<long>& shape) const {
    const json* e = entry(name);
    if (!e) throw MissingTensorError("dataset: tensor '" + name + "' missing from manifest");
    TensorIn t;
    try {
      const std::string dt = e->at("dtype").get<std::string>();
      if (dt != dtype_name(dtype)) {
        throw DtypeMismatchError("dataset: tensor '" + name + "' has dtype " + dt + ", expected " +
                                 dtype_name(dtype));
      }
      t.dtype = dtype;
      t.shape = e->at("shape").get<std::vector<long>>();
      const fs::path file = fs::path(dir_) / e->at("file").get<std::string>();
      if (t.shape != shape) {
        throw ShapeMismatchError("dataset: tensor '" + name + "' shape disagrees with the manifest header");
      }
      if (!fs::exists(file)) throw MissingTensorError("dataset: tensor file missing: " + file.string());
      const std::size_t expect = t.count() * dtype_size(dtype);
      if (fs::file_size(file) != expect) {
        throw ShapeMismatchError("dataset: tensor '" + name + "' has " + std::to_string(fs::file_size(file)) +
                                 " bytes, expected " + std::to_string(expect));
      }
      std::ifstream in(file, std::ios::binary);
      if (!in) throw IoError("dataset: cannot read " + file.string());
      t.bytes.resize(expect);
      in.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(expect));
      if (!in) throw IoError("dataset: short read on " + file.string());
    } catch (const json::exception& ex) {
      throw ValidationError("dataset: malformed tensor entry '" + name + "': " + ex.what());
    }
    return t;
  }

  // Leading/trailing extents as declared, for tensors whose channel count is
  // only known from the manifest.
  std::vector<long> declared_shape(const std::string& name) const {
    const json* e = entry(name);
    if (!e) throw MissingTensorError("dataset: tensor '" + name + "' missing from manifest");
    return e->at("shape").get<std::vector<long>>();
  }

 private:
  const json* entry(const std::string& name) const {
    if (!manifest_.contains("tensors")) return nullptr;
    for (const json& e : manifest_["tensors"]) {
      if (e.value("name", std::string()) == name) return &e;
    }
    return nullptr;
  }

  std::string dir_;
  json manifest_;
};

std::vector<FlowFields> read_fields(const Reader& r, const std::string& prefix, long n, int h, int w) {
  std::vector<FlowFields> out;
  if (!r.has(prefix + "scene_flow")) return out;
  const std::size_t px = static_cast<std::size_t>(h) * w;
  const TensorIn sf = r.load(prefix + "scene_flow", Dtype::kFloat32, {n, h, w, 3});
  const TensorIn of = r.load(prefix + "optical_flow", Dtype::kFloat32, {n, h, w, 2});
  const TensorIn oc = r.load(prefix + "occlusion", Dtype::kUint8, {n, h, w, 1});
  for (long f = 0; f < n; ++f) {
    FlowFields ff;
    ff.scene_flow = VectorField(h, w, 3);
    ff.optical_flow = VectorField(h, w, 2);
    ff.occlusion = Mask(h, w, 1, 0);
    for (std::size_t p = 0; p < px; ++p) {
      bool ok = true;
      for (int c = 0; c < 3; ++c) {
        const double v = sf.f((f * px + p) * 3 + c);
        ok = ok && std::isfinite(v);
        ff.scene_flow.values[p * 3 + c] = std::isfinite(v) ? v : 0.0;
      }
      ff.scene_flow.valid[p] = ok ? 1 : 0;
      ok = true;
      for (int c = 0; c < 2; ++c) {
        const double v = of.f((f * px + p) * 2 + c);
        ok = ok && std::isfinite(v);
        ff.optical_flow.values[p * 2 + c] = std::isfinite(v) ? v : 0.0;
      }
      ff.optical_flow.valid[p] = ok ? 1 : 0;
      const std::uint8_t o = oc.u(f * px + p);
      if (o > 1) throw ValidationError("dataset: occlusion values must be 0 or 1");
      ff.occlusion[p] = o;
    }
    out.push_back(std::move(ff));
  }
  return out;
}

std::vector<MaskStack> read_masks(const Reader& r, const std::string& name, Dtype dtype, long n, int h, int w,
                                  int k) {
  std::vector<MaskStack> out;
  const TensorIn t = r.load(name, dtype, {n, h, w, k});
  const std::size_t per = static_cast<std::size_t>(h) * w * k;
  for (long f = 0; f < n; ++f) {
    Image m(h, w, k);
    for (std::size_t i = 0; i < per; ++i) {
      m[i] = dtype == Dtype::kUint8 ? static_cast<double>(t.u(f * per + i)) : t.f(f * per + i);
    }
    out.emplace_back(std::move(m));
  }
  return out;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void Sequence::validate() const {
  intr.validate();
  require(!frames.empty(), "sequence: no frames");
  for (const RgbdFrame& f : frames) {
    require(f.height() == intr.height && f.width() == intr.width, "sequence: frame size differs from intrinsics");
    f.validate();
  }
  const std::size_t t = frames.size();
  require(actions.cols() == 0 || actions.rows() == static_cast<Eigen::Index>(t), "sequence: one action row per frame");
  require(gt_masks.empty() || gt_masks.size() == t, "sequence: one gt mask stack per frame");
  require(gt_flow.empty() || gt_flow.size() + 1 == t, "sequence: gt flow needs T - 1 entries");
  require(flow.empty() || flow.size() == t, "sequence: predicted flow needs T entries");
  require(masks.empty() || masks.size() == t, "sequence: predicted masks need T entries");
  for (const MaskStack& m : gt_masks) require(m.count() == k_gt, "sequence: gt mask count differs from K_gt");
}

void write_sequence(const Sequence& seq, const std::string& dir) {
  seq.validate();
  const int h = seq.intr.height;
  const int w = seq.intr.width;
  const long t = seq.length();
  const std::size_t px = static_cast<std::size_t>(h) * w;

  std::vector<TensorOut> tensors;
  tensors.push_back(float_tensor("rgb", {t, h, w, 3}, t * px * 3,
                                 stacked(px * 3, [&](std::size_t f, std::size_t i) { return seq.frames[f].rgb[i]; })));
  tensors.push_back(float_tensor("depth", {t, h, w, 1}, t * px,
                                 stacked(px, [&](std::size_t f, std::size_t i) { return seq.frames[f].depth[i]; })));
  tensors.push_back(byte_tensor("valid", {t, h, w, 1}, t * px,
                                stacked(px, [&](std::size_t f, std::size_t i) { return seq.frames[f].valid[i] != 0; })));
  if (seq.action_dim() > 0) {
    const long n = seq.action_dim();
    tensors.push_back(float_tensor("actions", {t, n}, t * n, [&](std::size_t i) {
      return seq.actions(static_cast<Eigen::Index>(i / n), static_cast<Eigen::Index>(i % n));
    }));
  }
  if (!seq.gt_masks.empty()) {
    const int k = seq.k_gt;
    tensors.push_back(byte_tensor("gt_masks", {t, h, w, k}, t * px * k,
                                  stacked(px * k, [&](std::size_t f, std::size_t i) {
                                    return seq.gt_masks[f].masks[i] > 0.5;
                                  })));
  }
  write_field_tensors(tensors, "gt_", seq.gt_flow, h, w);
  write_field_tensors(tensors, "", seq.flow, h, w);
  if (!seq.masks.empty()) {
    const int k = seq.masks.front().count();
    tensors.push_back(float_tensor("masks", {t, h, w, k}, t * px * k,
                                   stacked(px * k, [&](std::size_t f, std::size_t i) { return seq.masks[f].masks[i]; })));
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("dataset: cannot create " + dir + ": " + ec.message());

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["H"] = h;
  manifest["W"] = w;
  manifest["T"] = t;
  manifest["K_gt"] = seq.k_gt;
  manifest["intrinsics"] = {{"fx", seq.intr.fx}, {"fy", seq.intr.fy}, {"cx", seq.intr.cx}, {"cy", seq.intr.cy}};
  manifest["action_dim"] = seq.action_dim();
  manifest["endianness"] = "little";
  if (seq.first_frame != 0) manifest["first_frame"] = seq.first_frame;
  if (seq.scene_spec) manifest["scene_spec"] = scene_spec_to_json(*seq.scene_spec);
  manifest["tensors"] = json::array();
  for (const TensorOut& tensor : tensors) {
    const std::string file = tensor.name + ".bin";
    manifest["tensors"].push_back(
        {{"name", tensor.name}, {"shape", tensor.shape}, {"dtype", dtype_name(tensor.dtype)}, {"file", file}});
    std::ofstream out(fs::path(dir) / file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("dataset: cannot write " + file);
    out.write(reinterpret_cast<const char*>(tensor.bytes.data()), static_cast<std::streamsize>(tensor.bytes.size()));
    if (!out) throw IoError("dataset: write failed for " + file);
  }
  save_json_file(manifest, (fs::path(dir) / "manifest.json").string());
}

Sequence read_sequence(const std::string& dir) {
  const Reader r(dir);
  const json& m = r.manifest();
  Sequence seq;
  int h = 0, w = 0;
  long t = 0;
  try {
    const int version = m.at("schema_version").get<int>();
    require(version == kSchemaVersion, "dataset: unsupported schema_version " + std::to_string(version));
    const std::string endian = m.value("endianness", std::string("little"));
    if (endian != "little") throw DtypeMismatchError("dataset: unsupported endianness " + endian);
    h = m.at("H").get<int>();
    w = m.at("W").get<int>();
    t = m.at("T").get<long>();
    require(h > 0 && w > 0 && t >= 1, "dataset: H, W and T must be positive");
    seq.k_gt = m.value("K_gt", 0);
    seq.first_frame = m.value("first_frame", 0);
    const json& in = m.at("intrinsics");
    seq.intr.fx = in.at("fx").get<double>();
    seq.intr.fy = in.at("fy").get<double>();
    seq.intr.cx = in.at("cx").get<double>();
    seq.intr.cy = in.at("cy").get<double>();
    seq.intr.width = w;
    seq.intr.height = h;
    seq.intr.validate();
    if (m.contains("scene_spec")) seq.scene_spec = scene_spec_from_json(m["scene_spec"]);
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("dataset: malformed manifest: ") + ex.what());
  }
  const std::size_t px = static_cast<std::size_t>(h) * w;

  const TensorIn rgb = r.load("rgb", Dtype::kFloat32, {t, h, w, 3});
  const TensorIn depth = r.load("depth", Dtype::kFloat32, {t, h, w, 1});
  const TensorIn valid = r.load("valid", Dtype::kUint8, {t, h, w, 1});
  for (long f = 0; f < t; ++f) {
    RgbdFrame frame(h, w);
    for (std::size_t i = 0; i < px * 3; ++i) frame.rgb[i] = rgb.f(f * px * 3 + i);
    for (std::size_t i = 0; i < px; ++i) {
      frame.depth[i] = depth.f(f * px + i);
      const std::uint8_t v = valid.u(f * px + i);
      if (v > 1) throw ValidationError("dataset: valid values must be 0 or 1");
      frame.valid[i] = v;
    }
    seq.frames.push_back(std::move(frame));
  }
  const int n = m.value("action_dim", 0);
  if (n > 0) {
    const TensorIn a = r.load("actions", Dtype::kFloat32, {t, n});
    seq.actions.resize(t, n);
    for (long i = 0; i < t * n; ++i) seq.actions(i / n, i % n) = a.f(static_cast<std::size_t>(i));
  }
  if (r.has("gt_masks")) seq.gt_masks = read_masks(r, "gt_masks", Dtype::kUint8, t, h, w, seq.k_gt);
  if (t > 1) seq.gt_flow = read_fields(r, "gt_", t - 1, h, w);
  seq.flow = read_fields(r, "", t, h, w);
  if (r.has("masks")) {
    const std::vector<long> shape = r.declared_shape("masks");
    if (shape.size() != 4) throw ShapeMismatchError("dataset: masks tensor must be 4-D");
    seq.masks = read_masks(r, "masks", Dtype::kFloat32, t, h, w, static_cast<int>(shape[3]));
  }
  seq.validate();
  return seq;
}

Sequence quantized(const Sequence& seq) {
  Sequence q = seq;
  for (RgbdFrame& f : q.frames) {
    for (double& v : f.rgb.data()) v = to_f32(v);
    for (double& v : f.depth.data()) v = to_f32(v);
  }
  for (Eigen::Index i = 0; i < q.actions.size(); ++i) q.actions.data()[i] = to_f32(q.actions.data()[i]);
  auto fields = [](std::vector<FlowFields>& flows) {
    for (FlowFields& ff : flows) {
      for (std::size_t p = 0; p < ff.scene_flow.valid.size(); ++p) {
        for (int c = 0; c < 3; ++c) {
          double& v = ff.scene_flow.values[p * 3 + c];
          v = ff.scene_flow.valid[p] ? to_f32(v) : 0.0;
        }
        for (int c = 0; c < 2; ++c) {
          double& v = ff.optical_flow.values[p * 2 + c];
          v = ff.optical_flow.valid[p] ? to_f32(v) : 0.0;
        }
      }
    }
  };
  fields(q.gt_flow);
  fields(q.flow);
  for (MaskStack& m : q.masks) {
    for (double& v : m.masks.data()) v = to_f32(v);
  }
  return q;
}

namespace {

// Motions taking the scene from one frame to the next: every object moves by
// its velocity, and object 0 additionally by the action.
std::vector<Se3> transition_motions(const Scene& scene, const Eigen::MatrixXd& actions, int t) {
  std::vector<Se3> motions = velocity_motions(scene);
  if (actions.cols() > 0) {
    const std::vector<Se3> act = action_motions(scene, actions.row(t).transpose());
    motions[0] = se3_compose(act[0], motions[0]);
  }
  return motions;
}

}  // namespace

Sequence generate_sequence(const SceneSpec& spec, int frames, std::uint64_t seed) {
  require(frames >= 1, "generate: need at least one frame");
  Scene scene(spec);
  Rng action_rng(seed, "sim.actions");
  Rng noise_rng(seed, "sim.depth_noise");
  const int n = spec.action.dim;

  Sequence seq;
  seq.intr = spec.intr;
  seq.k_gt = spec.mask_count();
  seq.scene_spec = spec;
  seq.actions = Eigen::MatrixXd::Zero(frames, n);
  for (int t = 0; t < frames; ++t) {
    for (int i = 0; i < n; ++i) seq.actions(t, i) = action_rng.uniform(spec.action.low, spec.action.high);
  }
  for (int t = 0; t < frames; ++t) {
    RenderResult r = render(scene);
    if (spec.depth_noise_std > 0.0) {
      for (std::size_t i = 0; i < r.frame.depth.size(); ++i) {
        if (!r.frame.valid[i]) continue;
        r.frame.depth[i] += spec.depth_noise_std * noise_rng.normal();
        if (!(r.frame.depth[i] > kMinDepth)) r.frame.valid[i] = 0;
      }
    }
    seq.frames.push_back(std::move(r.frame));
    seq.gt_masks.push_back(std::move(r.gt_masks));
    if (t + 1 == frames) break;
    StepResult step = step_scene(scene, transition_motions(scene, seq.actions, t));
    seq.gt_flow.push_back(std::move(step.gt_flow));
    scene = std::move(step.next);
  }
  return seq;
}

Scene scene_at(const Sequence& seq, int t) {
  require(seq.scene_spec.has_value(), "dataset: no scene spec recorded, cannot replay the simulator");
  require(t >= 0 && t < std::max(seq.length(), 1), "dataset: frame index out of range");
  Scene scene(*seq.scene_spec);
  for (int i = 0; i < t; ++i) scene = advance_scene(scene, transition_motions(scene, seq.actions, i));
  return scene;
}

void generate_dataset(const SceneSpec& spec, int frames, std::uint64_t seed, const std::string& dir) {
  write_sequence(generate_sequence(spec, frames, seed), dir);
}

}  // namespace rgbdyn
