#pragma once

#include <cmath>
#include <vector>

#include "rgbdyn/fit.hpp"
#include "rgbdyn/geometry.hpp"
#include "rgbdyn/rng.hpp"
#include "rgbdyn/sim.hpp"

namespace testutil {

using namespace rgbdyn;

inline CameraIntrinsics intrinsics(int h, int w, double f) {
  return {f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
}

inline Image random_image(int h, int w, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Image im(h, w, c);
  for (double& v : im.data()) v = rng.uniform(lo, hi);
  return im;
}

// Smooth-ish random depth so that small motions keep points in front.
inline RgbdFrame random_frame(int h, int w, Rng& rng, double z0 = 1.0, double dz = 0.3) {
  RgbdFrame f(h, w);
  f.rgb = random_image(h, w, 3, rng);
  for (double& v : f.depth.data()) v = z0 + rng.uniform(0.0, dz);
  return f;
}

inline MaskStack random_masks(int h, int w, int k, Rng& rng) {
  Image m(h, w, k);
  for (std::size_t p = 0; p < m.pixel_count(); ++p) {
    double s = 0;
    for (int j = 0; j < k; ++j) s += (m[p * k + j] = rng.uniform(0.05, 1.0));
    for (int j = 0; j < k; ++j) m[p * k + j] /= s;
  }
  return MaskStack(m);
}

inline Vec3 random_vec(Rng& rng, double scale) {
  return {rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
}

// Textured box over a textured plane, the standard small test scene.
inline SceneSpec box_scene(int res, std::uint64_t seed, bool textured = true) {
  SceneSpec s;
  s.intr = {res * 0.9, res * 0.9, (res - 1) / 2.0, (res - 1) / 2.0, res, res};
  s.background_pose.trans = Vec3(0, 0, 1.0);
  s.background_texture.kind = textured ? TextureKind::kNoise : TextureKind::kUniform;
  s.background_texture.colors = {Vec3(0.2, 0.3, 0.4), Vec3(0.8, 0.7, 0.5)};
  s.background_texture.cell = 0.1;
  s.background_texture.seed = seed + 100;
  ObjectSpec o;
  o.shape = Shape::kBox;
  o.size = Vec3(0.4, 0.4, 0.1);
  o.pose.trans = Vec3(0, 0, 0.9);
  o.texture.kind = textured ? TextureKind::kNoise : TextureKind::kUniform;
  o.texture.colors = textured ? std::array<Vec3, 2>{Vec3(0.9, 0.1, 0.1), Vec3(0.1, 0.9, 0.3)}
                              : std::array<Vec3, 2>{Vec3(0.9, 0.2, 0.2), Vec3(0.9, 0.2, 0.2)};
  o.texture.cell = 0.08;
  o.texture.seed = seed;
  s.objects.push_back(o);
  return s;
}

// Pixels of `later` whose surface point was already visible in the context
// render: traced back through the simulator, it lands on a context pixel with
// the same label at the same depth.
inline Mask covisible(const Scene& context_scene, const RenderResult& context, const RenderResult& later) {
  const CameraIntrinsics& intr = context_scene.spec.intr;
  Mask out(intr.height, intr.width, 1, 0);
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      const int label = later.labels(y, x);
      if (label < 0) continue;
      const Vec3 local(later.local(y, x, 0), later.local(y, x, 1), later.local(y, x, 2));
      const Vec3 p = material_point(context_scene, label, local);
      if (p.z() <= 0) continue;
      const Vec2 uv = project_point(p, intr);
      const int u = static_cast<int>(std::lround(uv.x())), v = static_cast<int>(std::lround(uv.y()));
      if (u < 0 || v < 0 || u >= intr.width || v >= intr.height) continue;
      if (context.labels(v, u) == label && std::abs(context.frame.depth(v, u) - p.z()) < 0.01) out(y, x) = 1;
    }
  }
  return out;
}

inline std::vector<double> flatten(const Image& im) { return im.data(); }

}  // namespace testutil
