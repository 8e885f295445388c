#pragma once

#include "rgbdyn/image.hpp"

namespace rgbdyn {

inline constexpr double kPsnrCap = 99.0;

// Peak signal 1.0. Capped at kPsnrCap when MSE < 1e-10. An optional mask
// restricts the mean to its non-zero pixels.
double psnr(const Image& pred, const Image& gt, const Mask* valid = nullptr);

// 7x7 uniform window, sample covariance, C1 = 0.01^2, C2 = 0.03^2. Only
// windows that fit entirely inside the image are averaged, then channels.
double ssim(const Image& pred, const Image& gt);

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
};
ImageMetrics image_metrics(const Image& pred, const Image& gt);

struct DepthMetrics {
  double rmse = 0.0;
  double absrel = 0.0;
};
DepthMetrics depth_metrics(const Image& pred, const Image& gt, const Mask& valid);

}  // namespace rgbdyn
