#pragma once

#include "rgbdyn/geometry.hpp"
#include "rgbdyn/image.hpp"

namespace rgbdyn {

struct WarpOptions {
  double sharpness = 50.0;     // 1/m; importance is the negated target depth
  double hole_epsilon = 1e-6;  // coverage at or below this is a hole
  int inpaint_iterations = 500;
  double inpaint_tolerance = 1e-5;
};

struct SplatResult {
  Image warped;    // H x W x C
  Image coverage;  // H x W x 1, sum of bilinear weights landing on the pixel

  // Kept for the backward pass.
  Image normalizer;  // sum of bilinear * exp(sharpness * importance - shift)
  Image shift;       // per-target max of sharpness * importance
};

// Softmax forward splatting. Every valid source scatters its channel values to
// the four bilinear neighbours of (x + U_x, y + U_y), weighted by
// bilinear * exp(sharpness * importance).
SplatResult softmax_splat(const Image& channels, const VectorField& flow, const Image& importance,
                          double sharpness, double epsilon = 1e-6);

struct SplatGradient {
  Image channels;
  Image flow;        // H x W x 2
  Image importance;  // H x W x 1
};

SplatGradient softmax_splat_backward(const Image& channels, const VectorField& flow,
                                     const Image& importance, double sharpness,
                                     const SplatResult& forward, const Image& grad_warped,
                                     double epsilon = 1e-6);

struct InpaintResult {
  Image filled;
  int iterations = 0;
};

// Fills hole pixels with the harmonic interpolation of the surrounding
// non-hole pixels by Jacobi sweeps of 4-neighbour averaging. Non-hole pixels
// are held fixed; holes start from their input values.
InpaintResult inpaint_diffusion(const Image& channels, const Mask& holes, int max_iterations = 500,
                                double tolerance = 1e-5);

// Reverse of exactly `iterations` sweeps.
Image inpaint_diffusion_backward(const Mask& holes, int iterations, const Image& grad_filled);

// (1 - O) * forward-warped + O * inpainted, per pixel. Output is valid
// everywhere.
RgbdFrame composite_next_frame(const Image& fw_rgb, const Image& fw_depth, const Image& in_rgb,
                               const Image& in_depth, const Mask& occlusion);

}  // namespace rgbdyn
