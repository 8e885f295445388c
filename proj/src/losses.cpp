#include "rgbdyn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

void LossWeights::validate() const {
  for (double l : lambda) require(l >= 0.0 && std::isfinite(l), "loss weights: lambdas must be non-negative");
  require(alpha == 1 || alpha == 2, "loss weights: alpha must be 1 or 2");
  require(knn_k >= 1, "loss weights: knn_k must be at least 1");
}

LossValue reconstruction_loss(const Image& pred, const Image& gt, int alpha, const Mask& valid) {
  require(pred.same_shape(gt), "reconstruction_loss: shape mismatch");
  require(valid.same_extent(pred), "reconstruction_loss: mask size mismatch");
  require(alpha == 1 || alpha == 2, "reconstruction_loss: alpha must be 1 or 2");
  const int nc = pred.channels();
  std::size_t count = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) count += valid[i] ? 1 : 0;
  if (count == 0) throw ValidationError("reconstruction_loss: no valid pixels");
  const double inv = 1.0 / static_cast<double>(count * nc);

  LossValue r{0.0, Image(pred.height(), pred.width(), nc)};
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    for (int c = 0; c < nc; ++c) {
      const std::size_t j = i * nc + c;
      const double d = pred[j] - gt[j];
      if (alpha == 1) {
        r.value += std::abs(d);
        r.grad[j] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv;
      } else {
        r.value += d * d;
        r.grad[j] = 2.0 * d * inv;
      }
    }
  }
  r.value *= inv;
  return r;
}

namespace {

// One direction of the windowed nearest-neighbour distance. Accumulates the
// gradient into grad_from / grad_to scaled by 1/count.
double directed_knn(const PointCloud& from, const PointCloud& to, int k, KnnMatch match,
                    Image& grad_from, Image& grad_to, std::size_t& matched) {
  const int h = from.height();
  const int w = from.width();
  struct Pair {
    int y, x, ny, nx;
    double dist;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!from.valid(y, x)) continue;
      const double* a = from.points.pixel(y, x);
      double best = std::numeric_limits<double>::infinity();
      int by = -1;
      int bx = -1;
      const int y0 = std::max(0, y - k);
      const int y1 = std::min(h - 1, y + k);
      const int x0 = std::max(0, x - k);
      const int x1 = std::min(w - 1, x + k);
      for (int ny = y0; ny <= y1; ++ny) {
        for (int nx = x0; nx <= x1; ++nx) {
          if (!to.valid(ny, nx)) continue;
          const double* b = to.points.pixel(ny, nx);
          double score;
          if (match == KnnMatch::kDepth) {
            score = std::abs(a[2] - b[2]);
          } else {
            const double dx = a[0] - b[0];
            const double dy = a[1] - b[1];
            const double dz = a[2] - b[2];
            score = dx * dx + dy * dy + dz * dz;
          }
          // strict comparison keeps the lowest linear index on ties
          if (score < best) {
            best = score;
            by = ny;
            bx = nx;
          }
        }
      }
      if (by < 0) continue;
      const double* b = to.points.pixel(by, bx);
      const double dx = a[0] - b[0];
      const double dy = a[1] - b[1];
      const double dz = a[2] - b[2];
      pairs.push_back({y, x, by, bx, std::sqrt(dx * dx + dy * dy + dz * dz)});
    }
  }
  matched = pairs.size();
  if (pairs.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(pairs.size());
  double sum = 0.0;
  for (const Pair& p : pairs) {
    sum += p.dist;
    if (p.dist <= 0.0) continue;
    const double* a = from.points.pixel(p.y, p.x);
    const double* b = to.points.pixel(p.ny, p.nx);
    double* ga = grad_from.pixel(p.y, p.x);
    double* gb = grad_to.pixel(p.ny, p.nx);
    for (int c = 0; c < 3; ++c) {
      const double g = (a[c] - b[c]) / p.dist * inv;
      ga[c] += g;
      gb[c] -= g;
    }
  }
  return sum * inv;
}

}  // namespace

PairLossValue knn_alignment_loss(const PointCloud& a, const PointCloud& b, int k, KnnMatch match) {
  require(a.points.same_shape(b.points) && a.points.channels() == 3,
          "knn_alignment_loss: point cloud size mismatch");
  require(k >= 1, "knn_alignment_loss: window radius must be at least 1");
  PairLossValue r{0.0, Image(a.height(), a.width(), 3), Image(b.height(), b.width(), 3)};
  std::size_t matched_ab = 0;
  std::size_t matched_ba = 0;
  const double ab = directed_knn(a, b, k, match, r.grad_a, r.grad_b, matched_ab);
  const double ba = directed_knn(b, a, k, match, r.grad_b, r.grad_a, matched_ba);
  if (matched_ab == 0 || matched_ba == 0) {
    throw ValidationError("knn_alignment_loss: no valid pixel has a valid window neighbour");
  }
  r.value = ab + ba;
  return r;
}

LossValue smoothness_loss(const VectorField& field, const Image& rgb) {
  const int h = field.values.height();
  const int w = field.values.width();
  const int nc = field.values.channels();
  require(rgb.same_extent(field.values), "smoothness_loss: image size mismatch");
  require(h >= 3 && w >= 3, "smoothness_loss: field must be at least 3x3");
  const int ic = rgb.channels();

  LossValue r{0.0, Image(h, w, nc)};
  auto ok = [&](int y, int x) { return field.valid(y, x) != 0; };

  std::size_t count = 0;
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) count += ok(y, x) ? 1 : 0;
  }
  if (count == 0) return r;
  const double inv = 1.0 / static_cast<double>(count * nc);

  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      if (!ok(y, x)) continue;
      double gx = 0.0;
      double gy = 0.0;
      for (int c = 0; c < ic; ++c) {
        gx += std::abs(rgb(y, x + 1, c) - rgb(y, x - 1, c)) * 0.5;
        gy += std::abs(rgb(y + 1, x, c) - rgb(y - 1, x, c)) * 0.5;
      }
      const double wx = std::exp(-gx / ic);
      const double wy = std::exp(-gy / ic);
      const bool use_x = ok(y, x - 1) && ok(y, x + 1);
      const bool use_y = ok(y - 1, x) && ok(y + 1, x);
      for (int c = 0; c < nc; ++c) {
        if (use_x) {
          const double d = field.values(y, x - 1, c) - 2.0 * field.values(y, x, c) +
                           field.values(y, x + 1, c);
          r.value += std::abs(d) * wx;
          const double s = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * wx * inv;
          r.grad(y, x - 1, c) += s;
          r.grad(y, x, c) -= 2.0 * s;
          r.grad(y, x + 1, c) += s;
        }
        if (use_y) {
          const double d = field.values(y - 1, x, c) - 2.0 * field.values(y, x, c) +
                           field.values(y + 1, x, c);
          r.value += std::abs(d) * wy;
          const double s = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * wy * inv;
          r.grad(y - 1, x, c) += s;
          r.grad(y, x, c) -= 2.0 * s;
          r.grad(y + 1, x, c) += s;
        }
      }
    }
  }
  r.value *= inv;
  return r;
}

double kl_unit_gaussian(const GaussianParams& q) {
  require(q.mu.size() == q.sigma.size(), "kl_unit_gaussian: mu and sigma differ in length");
  double kl = 0.0;
  for (std::size_t d = 0; d < q.mu.size(); ++d) {
    const double s = q.sigma[d];
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("kl_unit_gaussian: sigma must be positive");
    kl += 0.5 * (s * s + q.mu[d] * q.mu[d] - 1.0 - 2.0 * std::log(s));
  }
  return kl;
}

LossBreakdown total_loss(const LossBreakdown& terms, const LossWeights& w) {
  const auto t = terms.terms();
  LossBreakdown out = terms;
  out.total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw NumericalError("total_loss: non-finite loss term");
    out.total += w.lambda[i] * t[i];
  }
  return out;
}

}  // namespace rgbdyn
