#include "rgbdyn/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rgbdyn/error.hpp"
#include "rgbdyn/rng.hpp"

namespace rgbdyn {

namespace {

constexpr double kNoHit = std::numeric_limits<double>::infinity();

double lattice_value(std::uint64_t seed, long ix, long iy, long iz) {
  std::uint64_t h = mix64(seed ^ 0x9e3779b97f4a7c15ULL);
  h = mix64(h ^ static_cast<std::uint64_t>(ix));
  h = mix64(h ^ static_cast<std::uint64_t>(iy));
  h = mix64(h ^ static_cast<std::uint64_t>(iz));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(std::uint64_t seed, const Vec3& p) {
  const double fx = std::floor(p.x());
  const double fy = std::floor(p.y());
  const double fz = std::floor(p.z());
  const long ix = static_cast<long>(fx);
  const long iy = static_cast<long>(fy);
  const long iz = static_cast<long>(fz);
  const double tx = smooth(p.x() - fx);
  const double ty = smooth(p.y() - fy);
  const double tz = smooth(p.z() - fz);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
        acc += w * lattice_value(seed, ix + dx, iy + dy, iz + dz);
      }
    }
  }
  return acc;
}

// Ray parameter of the nearest hit in front of the camera, in local
// coordinates (origin o, direction d).
double intersect(const ObjectSpec& obj, const Vec3& o, const Vec3& d, bool bounded) {
  switch (obj.shape) {
    case Shape::kSphere: {
      const double r = obj.size.x();
      const double a = d.squaredNorm();
      const double b = 2.0 * o.dot(d);
      const double c = o.squaredNorm() - r * r;
      const double disc = b * b - 4.0 * a * c;
      if (disc < 0.0) return kNoHit;
      const double sq = std::sqrt(disc);
      const double s0 = (-b - sq) / (2.0 * a);
      const double s1 = (-b + sq) / (2.0 * a);
      if (s0 > kMinDepth) return s0;
      return s1 > kMinDepth ? s1 : kNoHit;
    }
    case Shape::kBox: {
      const Vec3 h = 0.5 * obj.size;
      double tmin = -kNoHit;
      double tmax = kNoHit;
      for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-15) {
          if (std::abs(o[i]) > h[i]) return kNoHit;
          continue;
        }
        double t1 = (-h[i] - o[i]) / d[i];
        double t2 = (h[i] - o[i]) / d[i];
        if (t1 > t2) std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
      }
      if (tmax < tmin || tmin <= kMinDepth) return kNoHit;
      return tmin;
    }
    case Shape::kPlane: {
      if (std::abs(d.z()) < 1e-15) return kNoHit;
      const double s = -o.z() / d.z();
      if (!(s > kMinDepth)) return kNoHit;
      if (bounded) {
        const Vec3 q = o + s * d;
        if (std::abs(q.x()) > 0.5 * obj.size.x() || std::abs(q.y()) > 0.5 * obj.size.y()) return kNoHit;
      }
      return s;
    }
  }
  return kNoHit;
}

Vec3 object_center(const Se3& pose) { return pose.trans; }

}  // namespace

Vec3 TextureSpec::color_at(const Vec3& local) const {
  switch (kind) {
    case TextureKind::kUniform:
      return colors[0];
    case TextureKind::kChecker: {
      // Small offset keeps faces that sit exactly on a cell boundary stable.
      const Vec3 q = local / cell + Vec3::Constant(1e-7);
      const long parity = static_cast<long>(std::floor(q.x())) + static_cast<long>(std::floor(q.y())) +
                          static_cast<long>(std::floor(q.z()));
      return (parity & 1) ? colors[1] : colors[0];
    }
    case TextureKind::kNoise: {
      const double v = value_noise(seed, local / cell);
      return colors[0] + v * (colors[1] - colors[0]);
    }
  }
  return colors[0];
}

void SceneSpec::validate() const {
  intr.validate();
  require(depth_noise_std >= 0.0, "scene: depth noise std must be non-negative");
  for (const ObjectSpec& o : objects) {
    require(o.size.x() > 0.0, "scene: object sizes must be positive");
    if (o.shape != Shape::kSphere) require(o.size.y() > 0.0, "scene: object sizes must be positive");
    if (o.shape == Shape::kBox) require(o.size.z() > 0.0, "scene: object sizes must be positive");
    require(o.pose.trans.z() > 0.0, "scene: objects must lie in front of the camera");
    require(o.texture.cell > 0.0, "scene: texture cell must be positive");
  }
  require(background_texture.cell > 0.0, "scene: texture cell must be positive");
  if (action.dim > 0) {
    require(!objects.empty(), "scene: action mode needs at least one object");
    require(action.map.rows() == 6 && action.map.cols() == action.dim,
            "scene: action map must be 6 x action dim");
    require(action.low < action.high, "scene: action bounds must satisfy low < high");
  }
}

Scene::Scene(SceneSpec s) : spec(std::move(s)) {
  spec.validate();
  for (const ObjectSpec& o : spec.objects) poses.push_back(o.pose);
}

RenderResult render(const Scene& scene) {
  const CameraIntrinsics& intr = scene.spec.intr;
  const int h = intr.height;
  const int w = intr.width;
  const int n = static_cast<int>(scene.spec.objects.size());

  // Local ray origins and rotations per object; index 0 is the background.
  std::vector<Mat3> rt(n + 1);
  std::vector<Vec3> origin(n + 1);
  auto prep = [&](int i, const Se3& pose) {
    rt[i] = rotation_matrix(pose.omega).transpose();
    origin[i] = -(rt[i] * pose.trans);
  };
  prep(0, scene.spec.background_pose);
  for (int i = 0; i < n; ++i) prep(i + 1, scene.poses[i]);
  ObjectSpec background;
  background.shape = Shape::kPlane;

  RenderResult out;
  out.frame = RgbdFrame(h, w);
  out.labels = Grid<int>(h, w, 1, -1);
  out.cloud.points = Image(h, w, 3);
  out.cloud.valid = Mask(h, w, 1, 0);
  out.local = Image(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 dir((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
      double best = kNoHit;
      int label = -1;
      for (int i = 0; i <= n; ++i) {
        const ObjectSpec& obj = i == 0 ? background : scene.spec.objects[i - 1];
        const double s = intersect(obj, origin[i], rt[i] * dir, i != 0);
        if (s < best) {
          best = s;
          label = i;
        }
      }
      if (label < 0) {
        out.frame.valid(y, x) = 0;
        out.frame.depth(y, x) = 0.0;
        continue;
      }
      const Vec3 local = origin[label] + best * (rt[label] * dir);
      const TextureSpec& tex = label == 0 ? scene.spec.background_texture
                                          : scene.spec.objects[label - 1].texture;
      const Vec3 c = tex.color_at(local);
      for (int k = 0; k < 3; ++k) out.frame.rgb(y, x, k) = std::clamp(c[k], 0.0, 1.0);
      out.frame.depth(y, x) = best;
      out.labels(y, x) = label;
      out.cloud.set(y, x, best * dir);
      out.cloud.valid(y, x) = 1;
      for (int k = 0; k < 3; ++k) out.local(y, x, k) = local[k];
    }
  }
  // Pixels without any hit get the background label in the hard masks so the
  // stack still sums to one.
  Grid<int> mask_labels = out.labels;
  for (int& l : mask_labels.data()) l = std::max(l, 0);
  out.gt_masks = MaskStack::one_hot(mask_labels, n + 1);
  return out;
}

std::vector<Se3> velocity_motions(const Scene& scene) {
  std::vector<Se3> out;
  for (std::size_t i = 0; i < scene.poses.size(); ++i) {
    const Se3& v = scene.spec.objects[i].velocity;
    out.push_back(motion_about(object_center(scene.poses[i]), v.omega, v.trans));
  }
  return out;
}

FlowFields ground_truth_flow(const Scene& before, const Scene& after) {
  const CameraIntrinsics& intr = before.spec.intr;
  const RenderResult rb = render(before);
  const RenderResult ra = render(after);
  const int h = intr.height;
  const int w = intr.width;
  auto pose_of = [](const Scene& s, int label) {
    return label == 0 ? s.spec.background_pose : s.poses[label - 1];
  };

  FlowFields out;
  out.scene_flow = VectorField(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int label = rb.labels(y, x);
      if (label < 0) continue;
      const Vec3 local(rb.local(y, x, 0), rb.local(y, x, 1), rb.local(y, x, 2));
      const Se3 pose = pose_of(after, label);
      const Vec3 moved = rotation_matrix(pose.omega) * local + pose.trans;
      const Vec3 v = moved - rb.cloud.at(y, x);
      for (int k = 0; k < 3; ++k) out.scene_flow.values(y, x, k) = v[k];
      out.scene_flow.valid(y, x) = 1;
    }
  }
  out.optical_flow = optical_flow(out.scene_flow, rb.cloud, intr);

  // A pixel visible after the step is newly revealed when its surface point
  // was out of view or behind something before the step.
  constexpr double kDepthTolerance = 0.01;
  out.occlusion = Mask(h, w, 1, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int label = ra.labels(y, x);
      if (label < 0) continue;
      const Vec3 local(ra.local(y, x, 0), ra.local(y, x, 1), ra.local(y, x, 2));
      const Se3 pose = pose_of(before, label);
      const Vec3 old = rotation_matrix(pose.omega) * local + pose.trans;
      bool hidden = true;
      if (old.z() > kMinDepth) {
        const Vec2 uv = project_point(old, intr);
        const long px = std::lround(uv.x());
        const long py = std::lround(uv.y());
        if (px >= 0 && py >= 0 && px < w && py < h && rb.frame.valid(py, px)) {
          hidden = rb.frame.depth(py, px) < old.z() * (1.0 - kDepthTolerance);
        }
      }
      out.occlusion(y, x) = hidden ? 1 : 0;
    }
  }
  return out;
}

Scene advance_scene(const Scene& scene, const std::vector<Se3>& motions) {
  require(motions.size() == scene.poses.size(), "step_scene: one motion per object required");
  Scene next = scene;
  for (std::size_t i = 0; i < motions.size(); ++i) next.poses[i] = se3_compose(motions[i], scene.poses[i]);
  return next;
}

std::vector<Se3> action_motions(const Scene& scene, const Eigen::VectorXd& action) {
  const ActionSpec& spec = scene.spec.action;
  require(spec.dim > 0, "step_scene: scene has no action map");
  require(action.size() == spec.dim, "step_scene: action dimension mismatch");
  const Vec6 xi = spec.map * action;
  std::vector<Se3> motions(scene.poses.size(), Se3::identity());
  motions[0] = motion_about(object_center(scene.poses[0]), xi.head<3>(), xi.tail<3>());
  return motions;
}

Vec3 material_point(const Scene& scene, int label, const Vec3& local) {
  require(label >= 0 && label <= static_cast<int>(scene.poses.size()), "material_point: bad label");
  const Se3& pose = label == 0 ? scene.spec.background_pose : scene.poses[label - 1];
  return rotation_matrix(pose.omega) * local + pose.trans;
}

StepResult step_scene(const Scene& scene, const std::vector<Se3>& motions) {
  Scene next = advance_scene(scene, motions);
  FlowFields flow = ground_truth_flow(scene, next);
  return {std::move(next), std::move(flow)};
}

StepResult step_scene(const Scene& scene, const Eigen::VectorXd& action) {
  return step_scene(scene, action_motions(scene, action));
}

}  // namespace rgbdyn
