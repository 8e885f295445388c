#pragma once

#include <array>
#include <vector>

#include "rgbdyn/geometry.hpp"
#include "rgbdyn/image.hpp"

namespace rgbdyn {

enum class KnnMatch {
  kEuclidean,  // nearest neighbour by full 3D distance
  kDepth,      // nearest neighbour by |Z_a - Z_b|, scored by 3D distance
};

struct LossWeights {
  // rgb reconstruction, depth reconstruction, kNN alignment, scene-flow
  // smoothness, optical-flow smoothness, KL
  std::array<double, 6> lambda{1.0, 5.0, 0.1, 0.1, 0.001, 1.0};
  int alpha = 1;
  int knn_k = 3;
  KnnMatch knn_match = KnnMatch::kEuclidean;

  void validate() const;
};

struct GaussianParams {
  std::vector<double> mu;
  std::vector<double> sigma;
};

struct LossBreakdown {
  double rec_rgb = 0.0;
  double rec_depth = 0.0;
  double knn = 0.0;
  double smooth_scene = 0.0;
  double smooth_optical = 0.0;
  double kl = 0.0;
  double total = 0.0;

  std::array<double, 6> terms() const {
    return {rec_rgb, rec_depth, knn, smooth_scene, smooth_optical, kl};
  }
};

struct LossValue {
  double value = 0.0;
  Image grad;
};

struct PairLossValue {
  double value = 0.0;
  Image grad_a;
  Image grad_b;
};

// Mean over valid pixels and channels of |pred - gt|^alpha.
LossValue reconstruction_loss(const Image& pred, const Image& gt, int alpha, const Mask& valid);

// J(A->B) + J(B->A), each the mean over valid pixels of the distance to the
// nearest valid point of the other cloud inside the (2k+1)^2 grid window.
// Pixels with no valid point in their window are left out of the mean.
PairLossValue knn_alignment_loss(const PointCloud& a, const PointCloud& b, int k,
                                 KnnMatch match = KnnMatch::kEuclidean);

// Edge-aware second-order smoothness of a 2- or 3-channel field.
LossValue smoothness_loss(const VectorField& field, const Image& rgb);

double kl_unit_gaussian(const GaussianParams& q);

// Weighted objective; per-term values are kept unweighted.
LossBreakdown total_loss(const LossBreakdown& terms, const LossWeights& w);

}  // namespace rgbdyn
