#include "rgbdyn/fit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include <Eigen/QR>

#include "rgbdyn/error.hpp"
#include "rgbdyn/rng.hpp"

namespace rgbdyn {

void FitOptions::validate() const {
  require(k >= 1, "fit options: K must be at least 1");
  require(steps >= 1, "fit options: steps must be at least 1");
  require(lr > 0.0 && std::isfinite(lr), "fit options: lr must be positive");
  require(mask_step_scale >= 0.0, "fit options: mask_step_scale must be non-negative");
  require(twist_warmup >= 0, "fit options: twist_warmup must be non-negative");
}

std::vector<Se3> ActionModel::motions_for(const Eigen::VectorXd& action) const {
  require(action.size() == action_dim, "action model: action dimension mismatch");
  std::vector<Se3> out;
  out.reserve(gain.size());
  for (std::size_t k = 0; k < gain.size(); ++k) {
    const Vec6 xi = gain[k] * action + bias[k];
    const Vec3 c = k < pivots.size() ? pivots[k] : Vec3::Zero();
    out.push_back(motion_about(c, xi.head<3>(), xi.tail<3>()));
  }
  return out;
}

// ---------------------------------------------------------------------------

StepOutput predict_step(const RgbdFrame& frame, const RigidMotionSet& motion,
                        const CameraIntrinsics& intr, const WarpOptions& warp,
                        const Image* carry) {
  const PointCloud cloud = depth_to_pointcloud(frame, intr);
  StepOutput out;
  out.transformed = transform_pointcloud(cloud, motion);
  out.flow = compute_flow_fields(out.transformed, cloud, intr);

  const int h = intr.height;
  const int w = intr.width;
  const int extra = carry ? carry->channels() : 0;
  if (carry) require(carry->same_extent(frame.depth), "predict_step: carried channels size mismatch");
  Image channels(h, w, 4 + extra);
  Image importance(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* c = channels.pixel(y, x);
      for (int i = 0; i < 3; ++i) c[i] = frame.rgb(y, x, i);
      const double z = out.transformed.points(y, x, 2);
      c[3] = z;
      for (int i = 0; i < extra; ++i) c[4 + i] = (*carry)(y, x, i);
      importance(y, x) = -z;
    }
  }
  const SplatResult splat =
      softmax_splat(channels, out.flow.optical_flow, importance, warp.sharpness, warp.hole_epsilon);
  Mask holes = out.flow.occlusion;
  for (std::size_t i = 0; i < holes.size(); ++i) {
    if (!(splat.coverage[i] > warp.hole_epsilon)) holes[i] = 1;
  }
  const InpaintResult filled =
      inpaint_diffusion(splat.warped, holes, warp.inpaint_iterations, warp.inpaint_tolerance);

  Image fw_rgb(h, w, 3), fw_depth(h, w, 1), in_rgb(h, w, 3), in_depth(h, w, 1);
  out.carried = Image(h, w, std::max(extra, 1));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int i = 0; i < 3; ++i) {
        fw_rgb(y, x, i) = splat.warped(y, x, i);
        in_rgb(y, x, i) = filled.filled(y, x, i);
      }
      fw_depth(y, x) = splat.warped(y, x, 3);
      in_depth(y, x) = filled.filled(y, x, 3);
      const Image& src = out.flow.occlusion(y, x) ? filled.filled : splat.warped;
      for (int i = 0; i < extra; ++i) out.carried(y, x, i) = src(y, x, 4 + i);
    }
  }
  out.frame = composite_next_frame(fw_rgb, fw_depth, in_rgb, in_depth, out.flow.occlusion);
  return out;
}

// ---------------------------------------------------------------------------

MaskStack softmax_masks(const Image& logits) {
  const int k = logits.channels();
  Image m(logits.height(), logits.width(), k);
  for (std::size_t p = 0; p < logits.pixel_count(); ++p) {
    const double* l = logits.data().data() + p * k;
    double* out = m.data().data() + p * k;
    const double mx = *std::max_element(l, l + k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      out[i] = std::exp(l[i] - mx);
      sum += out[i];
    }
    for (int i = 0; i < k; ++i) out[i] /= sum;
  }
  return MaskStack(std::move(m));
}

double MotionParams::dot(const MotionParams& other) const {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += logits[i] * other.logits[i];
  for (std::size_t k = 0; k < twists.size(); ++k) s += twists[k].dot(other.twists[k]);
  return s;
}

void MotionParams::axpy(double a, const MotionParams& x) {
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += a * x.logits[i];
  for (std::size_t k = 0; k < twists.size(); ++k) twists[k] += a * x.twists[k];
}

FitObjective::FitObjective(RgbdFrame source, RgbdFrame target, CameraIntrinsics intr,
                           LossWeights weights, WarpOptions warp)
    : source_(std::move(source)),
      target_(std::move(target)),
      intr_(intr),
      weights_(weights),
      warp_(warp) {
  intr_.validate();
  weights_.validate();
  source_.validate();
  target_.validate();
  require(source_.height() == target_.height() && source_.width() == target_.width(),
          "fit: frames differ in size");
  source_cloud_ = depth_to_pointcloud(source_, intr_);
  target_cloud_ = depth_to_pointcloud(target_, intr_);
  all_valid_ = Mask(intr_.height, intr_.width, 1, 1);
}

LossBreakdown FitObjective::evaluate(const MotionParams& params, MotionParams* grad) const {
  const int h = intr_.height;
  const int w = intr_.width;
  const int k_count = params.logits.channels();
  const auto& lam = weights_.lambda;

  RigidMotionSet motion;
  motion.masks = softmax_masks(params.logits);
  for (const Vec6& xi : params.twists) motion.motions.push_back(Se3::from_twist(xi));

  const PointCloud moved = transform_pointcloud(source_cloud_, motion);
  const VectorField vflow = scene_flow(moved, source_cloud_);
  const VectorField uflow = optical_flow(vflow, source_cloud_, intr_);
  const Mask occ = occlusion_mask(moved, intr_);

  Image channels(h, w, 4);
  Image importance(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* c = channels.pixel(y, x);
      for (int i = 0; i < 3; ++i) c[i] = source_.rgb(y, x, i);
      c[3] = moved.points(y, x, 2);
      importance(y, x) = -moved.points(y, x, 2);
    }
  }
  const SplatResult splat =
      softmax_splat(channels, uflow, importance, warp_.sharpness, warp_.hole_epsilon);
  Mask holes = occ;
  for (std::size_t i = 0; i < holes.size(); ++i) {
    if (!(splat.coverage[i] > warp_.hole_epsilon)) holes[i] = 1;
  }

  LossBreakdown degenerate;
  degenerate.total = std::numeric_limits<double>::infinity();

  InpaintResult filled;
  try {
    filled = inpaint_diffusion(splat.warped, holes, warp_.inpaint_iterations, warp_.inpaint_tolerance);
  } catch (const ValidationError&) {
    return degenerate;
  }

  Image pred_rgb(h, w, 3);
  Image pred_depth(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Image& src = occ(y, x) ? filled.filled : splat.warped;
      for (int i = 0; i < 3; ++i) pred_rgb(y, x, i) = src(y, x, i);
      pred_depth(y, x) = src(y, x, 3);
    }
  }

  LossBreakdown terms;
  const LossValue rec_rgb = reconstruction_loss(pred_rgb, target_.rgb, weights_.alpha, all_valid_);
  const LossValue rec_depth =
      reconstruction_loss(pred_depth, target_.depth, weights_.alpha, target_.valid);
  PairLossValue knn;
  try {
    knn = knn_alignment_loss(moved, target_cloud_, weights_.knn_k, weights_.knn_match);
  } catch (const ValidationError&) {
    return degenerate;
  }
  const LossValue smooth_v = smoothness_loss(vflow, source_.rgb);
  const LossValue smooth_u = smoothness_loss(uflow, source_.rgb);
  terms.rec_rgb = rec_rgb.value;
  terms.rec_depth = rec_depth.value;
  terms.knn = knn.value;
  terms.smooth_scene = smooth_v.value;
  terms.smooth_optical = smooth_u.value;
  terms.kl = 0.0;  // no latent variables in the direct fit
  LossBreakdown out;
  try {
    out = total_loss(terms, weights_);
  } catch (const NumericalError&) {
    return degenerate;
  }
  if (!grad) return out;

  // ---- backward ----
  Image g_pred(h, w, 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int i = 0; i < 3; ++i) g_pred(y, x, i) = lam[0] * rec_rgb.grad(y, x, i);
      g_pred(y, x, 3) = lam[1] * rec_depth.grad(y, x);
    }
  }
  Image g_warped(h, w, 4);
  Image g_filled(h, w, 4);
  for (std::size_t p = 0; p < g_pred.pixel_count(); ++p) {
    Image& dst = occ[p] ? g_filled : g_warped;
    for (int i = 0; i < 4; ++i) dst[p * 4 + i] = g_pred[p * 4 + i];
  }
  const Image g_from_fill = inpaint_diffusion_backward(holes, filled.iterations, g_filled);
  for (std::size_t i = 0; i < g_warped.size(); ++i) g_warped[i] += g_from_fill[i];

  const SplatGradient gs = softmax_splat_backward(channels, uflow, importance, warp_.sharpness,
                                                  splat, g_warped, warp_.hole_epsilon);

  Image g_u = gs.flow;
  for (std::size_t i = 0; i < g_u.size(); ++i) g_u[i] += lam[4] * smooth_u.grad[i];
  const OpticalFlowGradient go = optical_flow_backward(vflow, source_cloud_, intr_, g_u);

  Image g_moved(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!moved.valid(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        g_moved(y, x, c) = go.scene(y, x, c) + lam[3] * smooth_v.grad(y, x, c) +
                           lam[2] * knn.grad_a(y, x, c);
      }
      g_moved(y, x, 2) += gs.channels(y, x, 3) - gs.importance(y, x);
    }
  }

  const TransformGradient gt = transform_pointcloud_backward(source_cloud_, motion, g_moved);

  grad->logits = Image(h, w, k_count);
  grad->twists.assign(static_cast<std::size_t>(k_count), Vec6::Zero());
  for (std::size_t p = 0; p < params.logits.pixel_count(); ++p) {
    const double* m = motion.masks.masks.data().data() + p * k_count;
    const double* gm = gt.masks.data().data() + p * k_count;
    double mean = 0.0;
    for (int i = 0; i < k_count; ++i) mean += m[i] * gm[i];
    for (int i = 0; i < k_count; ++i) grad->logits[p * k_count + i] = m[i] * (gm[i] - mean);
  }
  for (int i = 0; i < k_count; ++i) grad->twists[i] << gt.omega[i], gt.trans[i];
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Connected components (4-neighbour) of a binary mask, largest first.
std::vector<std::vector<int>> components(const Mask& m) {
  const int h = m.height();
  const int w = m.width();
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<std::vector<int>> comps;
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (!m[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      comps[id].push_back(i);
      const int y = i / w;
      const int x = i % w;
      const int nbrs[4][2] = {{y, x - 1}, {y, x + 1}, {y - 1, x}, {y + 1, x}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= h || n[1] >= w) continue;
        const int j = n[0] * w + n[1];
        if (m[j] && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      }
    }
  }
  std::stable_sort(comps.begin(), comps.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return comps;
}

// Square-window dilation (grow) or erosion (shrink) by r pixels.
Mask morph(const Mask& m, int r, bool grow) {
  const int h = m.height();
  const int w = m.width();
  Mask out(h, w, 1, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool hit = !grow;
      for (int dy = -r; dy <= r && hit != grow; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          const int xx = std::clamp(x + dx, 0, w - 1);
          if ((m(yy, xx) != 0) == grow) {
            hit = grow;
            break;
          }
        }
      }
      out(y, x) = hit ? 1 : 0;
    }
  }
  return out;
}

// Closing followed by filling every region the mask encloses.
Mask close_and_fill(const Mask& m, int r) {
  Mask closed = morph(morph(m, r, true), r, false);
  Mask outside(m.height(), m.width(), 1, 0);
  for (std::size_t i = 0; i < closed.size(); ++i) outside[i] = closed[i] ? 0 : 1;
  for (const auto& comp : components(outside)) {
    bool border = false;
    for (int i : comp) {
      const int y = i / m.width();
      const int x = i % m.width();
      border = border || y == 0 || x == 0 || y == m.height() - 1 || x == m.width() - 1;
    }
    if (!border) for (int i : comp) closed[i] = 1;
  }
  return closed;
}

}  // namespace

Image initial_mask_logits(const RgbdFrame& source, const RgbdFrame& target, const FitOptions& opts) {
  const int h = source.height();
  const int w = source.width();
  const int k = opts.k;
  Image logits(h, w, k, 0.0);
  if (opts.mask_init == MaskInit::kSeeded && k > 1) {
    // Pixels whose depth or colour changes between the frames seed the object
    // channels; the largest changed regions get channels 1..K-1.
    Mask changed(h, w, 1, 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double dc = 0.0;
        for (int c = 0; c < 3; ++c) dc += std::abs(source.rgb(y, x, c) - target.rgb(y, x, c));
        bool moved = dc / 3.0 > 0.02;
        if (source.valid(y, x) && target.valid(y, x)) {
          moved = moved || std::abs(source.depth(y, x) - target.depth(y, x)) > 0.005 * source.depth(y, x);
        }
        changed(y, x) = moved ? 1 : 0;
      }
    }
    // Texture changes are patchy inside a moving surface; closing over a few
    // pixels joins them into one region.
    const auto comps = components(close_and_fill(changed, std::max(1, std::min(h, w) / 24)));
    constexpr double kSeedLogit = 6.0;
    for (std::size_t c = 0; c < comps.size() && static_cast<int>(c) < k - 1; ++c) {
      for (int i : comps[c]) logits[static_cast<std::size_t>(i) * k + c + 1] = kSeedLogit;
    }
    for (std::size_t p = 0; p < logits.pixel_count(); ++p) {
      bool any = false;
      for (int c = 1; c < k; ++c) any = any || logits[p * k + c] != 0.0;
      if (!any) logits[p * k] = kSeedLogit;
    }
  }
  Rng rng(opts.seed, "fit.mask_init");
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += 0.01 * rng.normal();
  return logits;
}

namespace {

// Twists are optimized in pivot coordinates: x = (r omega, tau) stands for
// the motion (omega, tau + c - R(omega) c), with c the mask-weighted centroid
// of the object and r its rms radius. Rotating about the object instead of the
// camera origin, in units of surface displacement, puts the rotation and
// translation coordinates on the same footing.
struct PivotCoords {
  std::vector<Vec3> pivots;
  std::vector<double> radii;

  Vec6 to_twist(int k, const Vec6& x) const {
    const Vec3 omega = x.head<3>() / radii[static_cast<std::size_t>(k)];
    const Vec3& c = pivots[static_cast<std::size_t>(k)];
    Vec6 xi;
    xi << omega, x.tail<3>() + c - rotation_matrix(omega) * c;
    return xi;
  }

  // Chain rule from a twist gradient to a pivot-coordinate gradient.
  Vec6 pull_back(int k, const Vec6& x, const Vec6& g) const {
    const double r = radii[static_cast<std::size_t>(k)];
    const auto dr = rotation_derivatives(x.head<3>() / r);
    const Vec3& c = pivots[static_cast<std::size_t>(k)];
    Vec6 out = g;
    for (int i = 0; i < 3; ++i) {
      out[i] = (g[i] - g.tail<3>().dot(dr[static_cast<std::size_t>(i)] * c)) / r;
    }
    return out;
  }
};

PivotCoords mask_pivots(const RgbdFrame& frame, const CameraIntrinsics& intr, const MaskStack& masks) {
  const PointCloud cloud = depth_to_pointcloud(frame, intr);
  const auto k = static_cast<std::size_t>(masks.count());
  std::vector<Vec3> sum(k, Vec3::Zero());
  std::vector<double> sum_sq(k, 0.0);
  std::vector<double> mass(k, 0.0);
  for (int y = 0; y < cloud.height(); ++y) {
    for (int x = 0; x < cloud.width(); ++x) {
      if (!cloud.valid(y, x)) continue;
      const Vec3 p(cloud.points(y, x, 0), cloud.points(y, x, 1), cloud.points(y, x, 2));
      for (std::size_t j = 0; j < k; ++j) {
        const double m = masks.masks(y, x, static_cast<int>(j));
        sum[j] += m * p;
        sum_sq[j] += m * p.squaredNorm();
        mass[j] += m;
      }
    }
  }
  PivotCoords pc;
  for (std::size_t j = 0; j < k; ++j) {
    Vec3 c = Vec3::Zero();
    double r = 1.0;
    if (mass[j] > 0.0) {
      c = sum[j] / mass[j];
      const double var = sum_sq[j] / mass[j] - c.squaredNorm();
      // Degenerate masks (a single point) fall back to unit scale.
      if (var > 1e-8) r = std::sqrt(var);
    }
    pc.pivots.push_back(c);
    pc.radii.push_back(r);
  }
  return pc;
}

using TwistVec = Eigen::VectorXd;

// Limited-memory inverse-Hessian product for the twist block.
class LbfgsMemory {
 public:
  explicit LbfgsMemory(std::size_t capacity) : capacity_(capacity) {}

  void clear() { pairs_.clear(); }
  bool empty() const { return pairs_.empty(); }

  void push(const TwistVec& s, const TwistVec& y) {
    if (!(s.dot(y) > 1e-16)) return;
    pairs_.emplace_back(s, y);
    if (pairs_.size() > capacity_) pairs_.erase(pairs_.begin());
  }

  TwistVec apply(const TwistVec& g, double initial_scale) const {
    TwistVec q = g;
    std::vector<double> alpha(pairs_.size());
    for (std::size_t i = pairs_.size(); i-- > 0;) {
      const auto& [s, y] = pairs_[i];
      alpha[i] = s.dot(q) / y.dot(s);
      q -= alpha[i] * y;
    }
    double gamma = initial_scale;
    if (!pairs_.empty()) gamma = pairs_.back().first.dot(pairs_.back().second) / pairs_.back().second.squaredNorm();
    TwistVec r = gamma * q;
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      const auto& [s, y] = pairs_[i];
      const double beta = y.dot(r) / y.dot(s);
      r += s * (alpha[i] - beta);
    }
    return r;
  }

 private:
  std::size_t capacity_;
  std::vector<std::pair<TwistVec, TwistVec>> pairs_;
};

}  // namespace

SceneModel fit_pair(const RgbdFrame& frame_t, const RgbdFrame& frame_t1,
                    const CameraIntrinsics& intr, const LossWeights& weights,
                    const FitOptions& opts) {
  opts.validate();
  const FitObjective objective(frame_t, frame_t1, intr, weights, opts.warp);
  const int k = opts.k;

  Image logits;
  if (opts.initial_logits) {
    require(opts.initial_logits->same_extent(frame_t.depth) && opts.initial_logits->channels() == k,
            "fit: initial logits shape mismatch");
    logits = *opts.initial_logits;
  } else {
    logits = initial_mask_logits(frame_t, frame_t1, opts);
  }
  const PivotCoords coords = mask_pivots(frame_t, intr, softmax_masks(logits));

  // State: mask logits plus the stacked pivot-coordinate twists.
  TwistVec x = TwistVec::Zero(6 * k);
  auto params_of = [&](const Image& l, const TwistVec& xv) {
    MotionParams p;
    p.logits = l;
    for (int j = 0; j < k; ++j) p.twists.push_back(coords.to_twist(j, xv.segment<6>(6 * j)));
    return p;
  };
  struct Eval {
    LossBreakdown loss;
    TwistVec gx;
    Image glogits;
  };
  auto evaluate = [&](const Image& l, const TwistVec& xv) {
    MotionParams g;
    Eval e;
    e.loss = objective.evaluate(params_of(l, xv), &g);
    e.gx = TwistVec::Zero(6 * k);
    if (std::isfinite(e.loss.total)) {
      for (int j = 0; j < k; ++j) e.gx.segment<6>(6 * j) = coords.pull_back(j, xv.segment<6>(6 * j), g.twists[static_cast<std::size_t>(j)]);
    }
    e.glogits = std::move(g.logits);
    return e;
  };
  auto armijo_ok = [&](double trial, double base, double step, double slope) {
    return std::isfinite(trial) && trial <= base + opts.armijo_c * step * slope;
  };
  // Objects are visited largest mask first, so relabelling the initial masks
  // only relabels the result.
  auto object_order = [&](const Image& l) {
    const MaskStack m = softmax_masks(l);
    std::vector<double> mass(static_cast<std::size_t>(k), 0.0);
    for (std::size_t p = 0; p < m.masks.pixel_count(); ++p) {
      for (int j = 0; j < k; ++j) mass[static_cast<std::size_t>(j)] += m.masks[p * k + j];
    }
    std::vector<int> order(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) order[static_cast<std::size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return mass[static_cast<std::size_t>(a)] > mass[static_cast<std::size_t>(b)];
    });
    return order;
  };

  // Seed each object's motion by coarse-to-fine grids on the objective; the
  // landscape is too rough for descent alone to cross several pixels.
  // Rotation coordinates are surface displacements, so one grid step means
  // the same thing for both halves of the twist.
  auto grid = [&](int j, int offset, double radius, double step) {
    const int n = static_cast<int>(std::floor(radius / step + 1e-9));
    const Vec3 base = x.segment<3>(6 * j + offset);
    double best = objective.evaluate(params_of(logits, x), nullptr).total;
    Vec3 best_v = base;
    for (int a = -n; a <= n; ++a) {
      for (int b = -n; b <= n; ++b) {
        for (int c = -n; c <= n; ++c) {
          if (a == 0 && b == 0 && c == 0) continue;
          TwistVec trial = x;
          trial.segment<3>(6 * j + offset) = base + step * Vec3(a, b, c);
          const double v = objective.evaluate(params_of(logits, trial), nullptr).total;
          if (std::isfinite(v) && v < best) {
            best = v;
            best_v = trial.segment<3>(6 * j + offset);
          }
        }
      }
    }
    x.segment<3>(6 * j + offset) = best_v;
  };
  if (opts.init_search_radius > 0.0 && opts.init_search_step > 0.0) {
    const double r = opts.init_search_radius;
    const double h = opts.init_search_step;
    for (int j : object_order(logits)) {
      grid(j, 3, r, h);
      grid(j, 0, h, 0.5 * h);
      grid(j, 3, 0.5 * h, 0.25 * h);
    }
  }

  SceneModel model;
  Eval cur = evaluate(logits, x);
  if (!std::isfinite(cur.loss.total)) throw NumericalError("fit: non-finite loss at initialization");
  model.loss_trace.push_back(cur.loss);

  const double mask_scale = opts.mask_step_scale > 0.0
                                ? opts.mask_step_scale
                                : static_cast<double>(intr.height) * intr.width;
  constexpr int kMaxHalvings = 40;

  // Twist block: quasi-Newton direction on the gradient. The composed loss
  // has small jumps wherever a pixel flips between warped and inpainted, so a
  // failed search falls back to steepest descent and then to single
  // coordinates, which can still slide along such a wall.
  LbfgsMemory memory(8);
  auto twist_search = [&](const TwistVec& dir, double step) {
    const double slope = cur.gx.dot(dir);
    if (!(slope < 0.0)) return false;
    for (int h = 0; h < kMaxHalvings; ++h, step *= 0.5) {
      TwistVec trial = x + step * dir;
      Eval e = evaluate(logits, trial);
      if (armijo_ok(e.loss.total, cur.loss.total, step, slope)) {
        memory.push(trial - x, e.gx - cur.gx);
        x = std::move(trial);
        cur = std::move(e);
        return true;
      }
    }
    return false;
  };
  auto twist_step = [&]() {
    const double gnorm = cur.gx.norm();
    if (!(gnorm > 0.0)) return false;
    if (!memory.empty() && twist_search(-memory.apply(cur.gx, 1.0), 1.0)) return true;
    memory.clear();
    if (twist_search(-cur.gx, opts.lr / gnorm)) return true;
    bool moved = false;
    for (int j : object_order(logits)) {
      for (int i = 6 * j; i < 6 * j + 6; ++i) {
        const double gi = cur.gx[i];
        if (gi == 0.0) continue;
        TwistVec dir = TwistVec::Zero(6 * k);
        dir[i] = -gi;
        moved = twist_search(dir, opts.lr / std::abs(gi)) || moved;
      }
    }
    memory.clear();
    return moved;
  };

  // Logit block: steepest descent with a Barzilai-Borwein trial step.
  double logit_step = opts.lr * mask_scale;
  std::optional<std::pair<Image, Image>> logit_history;  // (move, gradient change)
  auto logit_step_fn = [&]() {
    const Image& g = cur.glogits;
    double gnorm2 = 0.0;
    for (double v : g.data()) gnorm2 += v * v;
    if (!(gnorm2 > 0.0)) return false;
    double step = std::min(2.0 * logit_step, 1e3 * opts.lr * mask_scale);
    if (logit_history) {
      double ss = 0.0, sy = 0.0;
      const auto& s = logit_history->first.data();
      const auto& y = logit_history->second.data();
      for (std::size_t i = 0; i < s.size(); ++i) {
        ss += s[i] * s[i];
        sy += s[i] * y[i];
      }
      if (sy > 0.0) step = std::min(ss / sy, 1e3 * opts.lr * mask_scale);
    }
    for (int h = 0; h < kMaxHalvings; ++h, step *= 0.5) {
      Image trial = logits;
      auto& td = trial.data();
      for (std::size_t i = 0; i < td.size(); ++i) td[i] -= step * g.data()[i];
      Eval e = evaluate(trial, x);
      if (armijo_ok(e.loss.total, cur.loss.total, step, -gnorm2)) {
        Image move = trial;
        Image change = e.glogits;
        for (std::size_t i = 0; i < td.size(); ++i) {
          move.data()[i] -= logits.data()[i];
          change.data()[i] -= g.data()[i];
        }
        logit_history.emplace(std::move(move), std::move(change));
        logit_step = step;
        logits = std::move(trial);
        cur = std::move(e);
        return true;
      }
    }
    logit_history.reset();
    return false;
  };

  int small_steps = 0;
  for (int it = 0; it < opts.steps; ++it) {
    const double before = cur.loss.total;
    const bool twists_moved = twist_step();
    const bool logits_moved = it >= opts.twist_warmup || !twists_moved ? logit_step_fn() : false;
    if (!twists_moved && !logits_moved) {
      model.converged = true;
      break;
    }
    model.loss_trace.push_back(cur.loss);
    const double decrease = before - cur.loss.total;
    small_steps = decrease <= opts.convergence_tol * std::max(std::abs(cur.loss.total), 1e-12) ? small_steps + 1 : 0;
    if (small_steps >= 5) {
      model.converged = true;
      break;
    }
  }

  const MotionParams final_params = params_of(logits, x);
  model.motion.masks = softmax_masks(final_params.logits);
  for (const Vec6& xi : final_params.twists) model.motion.motions.push_back(Se3::from_twist(xi));
  return model;
}

// ---------------------------------------------------------------------------

namespace {

MaskStack normalize_carried(const Image& carried, int k) {
  Image m(carried.height(), carried.width(), k);
  for (std::size_t p = 0; p < m.pixel_count(); ++p) {
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      const double v = std::max(0.0, carried[p * carried.channels() + i]);
      m[p * k + i] = v;
      sum += v;
    }
    for (int i = 0; i < k; ++i) m[p * k + i] = sum > 0.0 ? m[p * k + i] / sum : 1.0 / k;
  }
  return MaskStack(std::move(m));
}

template <typename MotionFn>
std::vector<RolloutStep> rollout_impl(const MaskStack& masks0, const RgbdFrame& context,
                                      const CameraIntrinsics& intr, int steps,
                                      const WarpOptions& warp, MotionFn&& motions_at) {
  require(steps >= 0, "rollout: step count must be non-negative");
  require(masks0.height() == context.height() && masks0.width() == context.width(),
          "rollout: model masks do not match the context frame");
  std::vector<RolloutStep> out;
  out.reserve(static_cast<std::size_t>(steps));
  RgbdFrame frame = context;
  MaskStack masks = masks0;
  for (int s = 0; s < steps; ++s) {
    RigidMotionSet motion{masks, motions_at(s)};
    StepOutput step = predict_step(frame, motion, intr, warp, &masks.masks);
    masks = normalize_carried(step.carried, masks.count());
    out.push_back({step.frame, std::move(step.flow), masks});
    frame = std::move(step.frame);
  }
  return out;
}

}  // namespace

std::vector<RolloutStep> rollout(const SceneModel& model, const RgbdFrame& context,
                                 const CameraIntrinsics& intr, int steps, const WarpOptions& warp) {
  model.motion.validate();
  return rollout_impl(model.motion.masks, context, intr, steps, warp,
                      [&](int) { return model.motion.motions; });
}

std::vector<RolloutStep> rollout(const ActionModel& model, const RgbdFrame& context,
                                 const std::vector<Eigen::VectorXd>& actions,
                                 const CameraIntrinsics& intr, int steps, const WarpOptions& warp) {
  if (static_cast<int>(actions.size()) < steps) {
    throw ValidationError("rollout: action-conditioned model needs one action per step");
  }
  return rollout_impl(model.masks, context, intr, steps, warp,
                      [&](int s) { return model.motions_for(actions[s]); });
}

// ---------------------------------------------------------------------------

ActionModel fit_action_model(const std::vector<Transition>& data, const CameraIntrinsics& intr,
                             const LossWeights& weights, const FitOptions& opts) {
  require(!data.empty(), "fit_action_model: empty dataset");
  const int n = static_cast<int>(data.front().action.size());
  const int k = opts.k;
  require(n >= 1, "fit_action_model: action dimension must be at least 1");
  for (const Transition& t : data) require(t.action.size() == n, "fit_action_model: inconsistent action dimension");
  require(static_cast<int>(data.size()) >= 2 * k * n,
          "fit_action_model: need at least 2*K*n transitions");

  std::vector<SceneModel> fits;
  fits.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    FitOptions o = opts;
    o.seed = Rng(opts.seed, "fit_action_model").at(i);
    fits.push_back(fit_pair(data[i].from, data[i].to, intr, weights, o));
  }

  // Resolve object identity: each fit is permuted to best overlap the
  // previous (already permuted) fit.
  std::vector<std::vector<int>> perm(data.size());
  perm[0].resize(k);
  std::iota(perm[0].begin(), perm[0].end(), 0);
  for (std::size_t i = 1; i < fits.size(); ++i) {
    const Image& prev = fits[i - 1].motion.masks.masks;
    const Image& cur = fits[i].motion.masks.masks;
    std::vector<int> p(k);
    std::iota(p.begin(), p.end(), 0);
    double best = -1.0;
    do {
      double score = 0.0;
      for (std::size_t px = 0; px < cur.pixel_count(); ++px) {
        for (int j = 0; j < k; ++j) score += prev[px * k + perm[i - 1][j]] * cur[px * k + p[j]];
      }
      if (score > best) {
        best = score;
        perm[i] = p;
      }
    } while (std::next_permutation(p.begin(), p.end()));
  }

  const int rows = static_cast<int>(data.size());
  Eigen::MatrixXd design(rows, n + 1);
  for (int i = 0; i < rows; ++i) {
    design.row(i).head(n) = data[i].action.transpose();
    design(i, n) = 1.0;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < n + 1) throw NumericalError("fit_action_model: actions are rank deficient");

  // Twists are regressed about each object's centroid in the source frame,
  // where the fits pin them down best; about the camera origin a small
  // rotation error would leak into the translation.
  std::vector<std::vector<Vec3>> pivots(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    pivots[i] = mask_pivots(data[i].from, intr, fits[i].motion.masks).pivots;
  }

  ActionModel model;
  model.action_dim = n;
  for (int j = 0; j < k; ++j) {
    Eigen::MatrixXd target(rows, 6);
    for (int i = 0; i < rows; ++i) {
      const int src = perm[i][j];
      target.row(i) = twist_about(fits[i].motion.motions[src], pivots[i][src]).transpose();
    }
    const Eigen::MatrixXd sol = qr.solve(target);  // (n+1) x 6
    model.gain.push_back(sol.topRows(n).transpose());
    model.bias.push_back(sol.row(n).transpose());
    model.pivots.push_back(pivots[0][perm[0][j]]);
  }
  // Masks of the first transition, reordered to the resolved identities.
  const Image& m0 = fits[0].motion.masks.masks;
  Image masks(m0.height(), m0.width(), k);
  for (std::size_t px = 0; px < m0.pixel_count(); ++px) {
    for (int j = 0; j < k; ++j) masks[px * k + j] = m0[px * k + perm[0][j]];
  }
  model.masks = MaskStack(std::move(masks));
  return model;
}

}  // namespace rgbdyn
