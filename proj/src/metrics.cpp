#include "rgbdyn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

namespace {

constexpr int kSsimWindow = 7;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Summed-area table with one row/column of zero padding.
std::vector<double> integral(const std::vector<double>& v, int h, int w) {
  std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += v[static_cast<std::size_t>(y) * w + x];
      s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] = s[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

double box(const std::vector<double>& s, int w, int y0, int x0, int n) {
  const auto at = [&](int y, int x) { return s[static_cast<std::size_t>(y) * (w + 1) + x]; };
  return at(y0 + n, x0 + n) - at(y0, x0 + n) - at(y0 + n, x0) + at(y0, x0);
}

}  // namespace

double psnr(const Image& pred, const Image& gt, const Mask* valid) {
  require(pred.same_shape(gt), "psnr: shape mismatch");
  if (valid) require(valid->same_extent(pred), "psnr: mask size mismatch");
  const int c = pred.channels();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < pred.pixel_count(); ++p) {
    if (valid && !(*valid)[p]) continue;
    for (int k = 0; k < c; ++k) {
      const double d = pred[p * c + k] - gt[p * c + k];
      sum += d * d;
    }
    count += static_cast<std::size_t>(c);
  }
  require(count > 0, "psnr: no pixels to compare");
  const double mse = sum / static_cast<double>(count);
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& pred, const Image& gt) {
  require(pred.same_shape(gt), "ssim: shape mismatch");
  const int h = pred.height();
  const int w = pred.width();
  const int c = pred.channels();
  require(h >= kSsimWindow && w >= kSsimWindow, "ssim: image smaller than the 7x7 window");
  constexpr double n = kSsimWindow * kSsimWindow;
  constexpr double cov_norm = n / (n - 1.0);

  const std::size_t np = pred.pixel_count();
  std::vector<double> a(np), b(np), aa(np), bb(np), ab(np);
  double total = 0.0;
  for (int k = 0; k < c; ++k) {
    for (std::size_t p = 0; p < np; ++p) {
      a[p] = pred[p * c + k];
      b[p] = gt[p * c + k];
      aa[p] = a[p] * a[p];
      bb[p] = b[p] * b[p];
      ab[p] = a[p] * b[p];
    }
    const auto sa = integral(a, h, w);
    const auto sb = integral(b, h, w);
    const auto saa = integral(aa, h, w);
    const auto sbb = integral(bb, h, w);
    const auto sab = integral(ab, h, w);
    double acc = 0.0;
    for (int y = 0; y + kSsimWindow <= h; ++y) {
      for (int x = 0; x + kSsimWindow <= w; ++x) {
        const double mx = box(sa, w, y, x, kSsimWindow) / n;
        const double my = box(sb, w, y, x, kSsimWindow) / n;
        const double vx = cov_norm * (box(saa, w, y, x, kSsimWindow) / n - mx * mx);
        const double vy = cov_norm * (box(sbb, w, y, x, kSsimWindow) / n - my * my);
        const double vxy = cov_norm * (box(sab, w, y, x, kSsimWindow) / n - mx * my);
        acc += ((2.0 * mx * my + kC1) * (2.0 * vxy + kC2)) /
               ((mx * mx + my * my + kC1) * (vx + vy + kC2));
      }
    }
    total += acc / static_cast<double>((h - kSsimWindow + 1) * (w - kSsimWindow + 1));
  }
  return total / c;
}

ImageMetrics image_metrics(const Image& pred, const Image& gt) {
  return {psnr(pred, gt), ssim(pred, gt)};
}

DepthMetrics depth_metrics(const Image& pred, const Image& gt, const Mask& valid) {
  require(pred.same_shape(gt) && pred.channels() == 1, "depth_metrics: shape mismatch");
  require(valid.same_extent(pred), "depth_metrics: mask size mismatch");
  double sq = 0.0;
  double rel = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < pred.pixel_count(); ++p) {
    if (!valid[p]) continue;
    require(gt[p] > 0.0, "depth_metrics: ground truth must be positive on valid pixels");
    const double d = pred[p] - gt[p];
    sq += d * d;
    rel += std::abs(d) / gt[p];
    ++count;
  }
  require(count > 0, "depth_metrics: no valid pixels");
  return {std::sqrt(sq / count), rel / count};
}

}  // namespace rgbdyn
