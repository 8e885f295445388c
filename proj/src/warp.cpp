#include "rgbdyn/warp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

namespace {

struct Tap {
  int x;
  int y;
  double weight;
  double dweight_dx;  // derivative of the bilinear weight w.r.t. target x
  double dweight_dy;
};

// Bilinear taps of a source landing at (tx, ty). Taps outside the frame are
// dropped, and so are zero-weight taps unless `keep_zero`: on an integer
// coordinate the backward pass still needs their one-sided derivative.
// Returns the number of taps written.
int bilinear_taps(double tx, double ty, int height, int width, Tap (&taps)[4], bool keep_zero = false) {
  if (!std::isfinite(tx) || !std::isfinite(ty)) return 0;
  const double fx0 = std::floor(tx);
  const double fy0 = std::floor(ty);
  if (fx0 < -1.0 || fy0 < -1.0 || fx0 >= width || fy0 >= height) return 0;
  const int x0 = static_cast<int>(fx0);
  const int y0 = static_cast<int>(fy0);
  const double ax = tx - fx0;
  const double ay = ty - fy0;
  const Tap candidates[4] = {
      {x0, y0, (1.0 - ax) * (1.0 - ay), -(1.0 - ay), -(1.0 - ax)},
      {x0 + 1, y0, ax * (1.0 - ay), (1.0 - ay), -ax},
      {x0, y0 + 1, (1.0 - ax) * ay, -ay, (1.0 - ax)},
      {x0 + 1, y0 + 1, ax * ay, ay, ax},
  };
  int n = 0;
  for (const Tap& t : candidates) {
    if (t.weight <= 0.0 && !keep_zero) continue;
    if (t.x < 0 || t.y < 0 || t.x >= width || t.y >= height) continue;
    taps[n++] = t;
  }
  return n;
}

void check_splat_inputs(const Image& channels, const VectorField& flow, const Image& importance) {
  require(flow.values.same_extent(channels) && flow.values.channels() == 2,
          "softmax_splat: flow shape mismatch");
  require(importance.same_extent(channels) && importance.channels() == 1,
          "softmax_splat: importance shape mismatch");
}

}  // namespace

SplatResult softmax_splat(const Image& channels, const VectorField& flow, const Image& importance,
                          double sharpness, double epsilon) {
  check_splat_inputs(channels, flow, importance);
  const int h = channels.height();
  const int w = channels.width();
  const int nc = channels.channels();
  const double lowest = -std::numeric_limits<double>::infinity();

  SplatResult r{Image(h, w, nc), Image(h, w, 1), Image(h, w, 1), Image(h, w, 1, lowest)};
  Tap taps[4];

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.valid(y, x) || !std::isfinite(importance(y, x))) continue;
      const int n = bilinear_taps(x + flow.values(y, x, 0), y + flow.values(y, x, 1), h, w, taps);
      const double logit = sharpness * importance(y, x);
      for (int i = 0; i < n; ++i) {
        double& s = r.shift(taps[i].y, taps[i].x);
        if (logit > s) s = logit;
      }
    }
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.valid(y, x) || !std::isfinite(importance(y, x))) continue;
      const int n = bilinear_taps(x + flow.values(y, x, 0), y + flow.values(y, x, 1), h, w, taps);
      const double logit = sharpness * importance(y, x);
      const double* src = channels.pixel(y, x);
      for (int i = 0; i < n; ++i) {
        const int ty = taps[i].y;
        const int tx = taps[i].x;
        const double wt = taps[i].weight * std::exp(logit - r.shift(ty, tx));
        r.coverage(ty, tx) += taps[i].weight;
        r.normalizer(ty, tx) += wt;
        double* dst = r.warped.pixel(ty, tx);
        for (int c = 0; c < nc; ++c) dst[c] += wt * src[c];
      }
    }
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* dst = r.warped.pixel(y, x);
      if (r.coverage(y, x) > epsilon && r.normalizer(y, x) > 0.0) {
        const double inv = 1.0 / r.normalizer(y, x);
        for (int c = 0; c < nc; ++c) dst[c] *= inv;
      } else {
        for (int c = 0; c < nc; ++c) dst[c] = 0.0;
      }
    }
  }
  return r;
}

SplatGradient softmax_splat_backward(const Image& channels, const VectorField& flow,
                                     const Image& importance, double sharpness,
                                     const SplatResult& fwd, const Image& grad_warped,
                                     double epsilon) {
  check_splat_inputs(channels, flow, importance);
  require(grad_warped.same_shape(channels), "softmax_splat_backward: gradient shape mismatch");
  const int h = channels.height();
  const int w = channels.width();
  const int nc = channels.channels();
  SplatGradient g{Image(h, w, nc), Image(h, w, 2), Image(h, w, 1)};
  Tap taps[4];

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.valid(y, x) || !std::isfinite(importance(y, x))) continue;
      const int n = bilinear_taps(x + flow.values(y, x, 0), y + flow.values(y, x, 1), h, w, taps, true);
      if (n == 0) continue;
      const double logit = sharpness * importance(y, x);
      const double* src = channels.pixel(y, x);
      double* gsrc = g.channels.pixel(y, x);
      double gfx = 0.0;
      double gfy = 0.0;
      double gimp = 0.0;
      for (int i = 0; i < n; ++i) {
        const int ty = taps[i].y;
        const int tx = taps[i].x;
        const double den = fwd.normalizer(ty, tx);
        if (!(fwd.coverage(ty, tx) > epsilon) || !(den > 0.0)) continue;
        const double e = std::exp(logit - fwd.shift(ty, tx));
        const double wt = taps[i].weight * e;
        const double* gout = grad_warped.pixel(ty, tx);
        const double* out = fwd.warped.pixel(ty, tx);
        // d out / d wt = (src - out) / den
        double gw = 0.0;
        for (int c = 0; c < nc; ++c) {
          gsrc[c] += gout[c] * wt / den;
          gw += gout[c] * (src[c] - out[c]);
        }
        gw /= den;
        gimp += gw * wt * sharpness;
        gfx += gw * e * taps[i].dweight_dx;
        gfy += gw * e * taps[i].dweight_dy;
      }
      g.flow(y, x, 0) = gfx;
      g.flow(y, x, 1) = gfy;
      g.importance(y, x) = gimp;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_neighbor(int y, int x, int h, int w, Fn&& fn) {
  if (x > 0) fn(y, x - 1);
  if (x + 1 < w) fn(y, x + 1);
  if (y > 0) fn(y - 1, x);
  if (y + 1 < h) fn(y + 1, x);
}

int neighbor_count(int y, int x, int h, int w) {
  return (x > 0) + (x + 1 < w) + (y > 0) + (y + 1 < h);
}

}  // namespace

InpaintResult inpaint_diffusion(const Image& channels, const Mask& holes, int max_iterations,
                                double tolerance) {
  require(holes.same_extent(channels) && holes.channels() == 1, "inpaint_diffusion: hole mask size mismatch");
  const int h = channels.height();
  const int w = channels.width();
  const int nc = channels.channels();

  std::vector<int> hole_index;
  for (int i = 0; i < h * w; ++i) {
    if (holes[i]) hole_index.push_back(i);
  }
  if (hole_index.size() == static_cast<std::size_t>(h) * w && h * w > 0) {
    throw ValidationError("inpaint_diffusion: every pixel is a hole");
  }

  InpaintResult r{channels, 0};
  if (hole_index.empty()) return r;

  Image next = r.filled;
  std::vector<double> acc(static_cast<std::size_t>(nc));
  for (int it = 0; it < max_iterations; ++it) {
    double max_change = 0.0;
    for (int idx : hole_index) {
      const int y = idx / w;
      const int x = idx % w;
      std::fill(acc.begin(), acc.end(), 0.0);
      for_each_neighbor(y, x, h, w, [&](int ny, int nx) {
        const double* p = r.filled.pixel(ny, nx);
        for (int c = 0; c < nc; ++c) acc[c] += p[c];
      });
      const double inv = 1.0 / neighbor_count(y, x, h, w);
      double* dst = next.pixel(y, x);
      const double* cur = r.filled.pixel(y, x);
      for (int c = 0; c < nc; ++c) {
        dst[c] = acc[c] * inv;
        max_change = std::max(max_change, std::abs(dst[c] - cur[c]));
      }
    }
    for (int idx : hole_index) {
      const int y = idx / w;
      const int x = idx % w;
      std::copy_n(next.pixel(y, x), nc, r.filled.pixel(y, x));
    }
    r.iterations = it + 1;
    if (max_change < tolerance) break;
  }
  return r;
}

Image inpaint_diffusion_backward(const Mask& holes, int iterations, const Image& grad_filled) {
  const int h = grad_filled.height();
  const int w = grad_filled.width();
  const int nc = grad_filled.channels();
  Image grad_in(h, w, nc);
  Image lambda(h, w, nc);
  std::vector<int> hole_index;
  for (int i = 0; i < h * w; ++i) {
    const double* g = grad_filled.pixel(i / w, i % w);
    if (holes[i]) {
      hole_index.push_back(i);
      std::copy_n(g, nc, lambda.pixel(i / w, i % w));
    } else {
      std::copy_n(g, nc, grad_in.pixel(i / w, i % w));
    }
  }
  Image next(h, w, nc);
  for (int it = 0; it < iterations; ++it) {
    for (int idx : hole_index) std::fill_n(next.pixel(idx / w, idx % w), nc, 0.0);
    for (int idx : hole_index) {
      const int y = idx / w;
      const int x = idx % w;
      const double inv = 1.0 / neighbor_count(y, x, h, w);
      const double* lam = lambda.pixel(y, x);
      for_each_neighbor(y, x, h, w, [&](int ny, int nx) {
        double* dst = holes(ny, nx) ? next.pixel(ny, nx) : grad_in.pixel(ny, nx);
        for (int c = 0; c < nc; ++c) dst[c] += lam[c] * inv;
      });
    }
    for (int idx : hole_index) std::copy_n(next.pixel(idx / w, idx % w), nc, lambda.pixel(idx / w, idx % w));
  }
  for (int idx : hole_index) {
    const double* lam = lambda.pixel(idx / w, idx % w);
    double* dst = grad_in.pixel(idx / w, idx % w);
    for (int c = 0; c < nc; ++c) dst[c] += lam[c];
  }
  return grad_in;
}

RgbdFrame composite_next_frame(const Image& fw_rgb, const Image& fw_depth, const Image& in_rgb,
                               const Image& in_depth, const Mask& occlusion) {
  require(fw_rgb.channels() == 3 && in_rgb.channels() == 3 && fw_depth.channels() == 1 &&
              in_depth.channels() == 1,
          "composite_next_frame: unexpected channel count");
  require(fw_rgb.same_extent(fw_depth) && fw_rgb.same_extent(in_rgb) &&
              fw_rgb.same_extent(in_depth) && fw_rgb.same_extent(occlusion),
          "composite_next_frame: plane size mismatch");
  RgbdFrame out(fw_rgb.height(), fw_rgb.width());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const bool occluded = occlusion(y, x) != 0;
      const Image& rgb = occluded ? in_rgb : fw_rgb;
      const Image& depth = occluded ? in_depth : fw_depth;
      for (int c = 0; c < 3; ++c) out.rgb(y, x, c) = rgb(y, x, c);
      out.depth(y, x) = depth(y, x);
    }
  }
  return out;
}

}  // namespace rgbdyn
