#include "rgbdyn/plan.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>

#include "rgbdyn/error.hpp"

namespace rgbdyn {

void IcemParams::validate() const {
  require(population >= 1, "icem: population must be positive");
  require(min_std > 0.0 && min_std <= max_std, "icem: need 0 < min_std <= max_std");
  require(elite_frac > 0.0 && elite_frac < 1.0, "icem: elite_frac must lie in (0, 1)");
  require(population * elite_frac >= 1.0, "icem: population * elite_frac must be at least 1");
  require(horizon >= 1 && max_iters >= 1, "icem: horizon and max_iters must be positive");
  require(alpha_momentum >= 0.0 && alpha_momentum <= 1.0, "icem: alpha_momentum must lie in [0, 1]");
  require(beta_momentum >= 0.0 && beta_momentum <= 1.0, "icem: beta_momentum must lie in [0, 1]");
  require(pop_decay > 0.0 && pop_decay <= 1.0, "icem: pop_decay must lie in (0, 1]");
  require(cost_decay > 0.0 && cost_decay <= 1.0, "icem: cost_decay must lie in (0, 1]");
  require(action_low < action_high, "icem: action bounds must satisfy low < high");
}

int IcemParams::elite_count() const {
  return std::max(1, static_cast<int>(std::lround(population * elite_frac)));
}

int IcemParams::population_at(int iteration) const {
  const long decayed = std::lround(population * std::pow(pop_decay, iteration));
  return static_cast<int>(std::max<long>(decayed, 2L * elite_count()));
}

// ---------------------------------------------------------------------------

namespace {

// FFTW planning is not thread-safe; execution of a finished plan is.
class InversePlans {
 public:
  static InversePlans& instance() {
    static InversePlans plans;
    return plans;
  }

  fftw_plan get(int n) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    std::vector<fftw_complex> in(static_cast<std::size_t>(n / 2 + 1));
    std::vector<double> out(static_cast<std::size_t>(n));
    const fftw_plan plan =
        fftw_plan_dft_c2r_1d(n, in.data(), out.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans_.emplace(n, plan);
    return plan;
  }

  ~InversePlans() {
    for (auto& [n, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<int, fftw_plan> plans_;
};

}  // namespace

Eigen::MatrixXd colored_noise(int horizon, int dims, double beta, Rng& rng) {
  require(horizon >= 1, "colored_noise: horizon must be at least 1");
  require(dims >= 1, "colored_noise: dims must be at least 1");
  const int n = horizon;
  const int bins = n / 2 + 1;
  // Amplitude f^(-beta/2) per frequency bin; the zero bin uses the lowest
  // resolvable frequency 1/n.
  std::vector<double> scale(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) {
    const double f = std::max(static_cast<double>(k) / n, 1.0 / n);
    scale[k] = std::pow(f, -beta / 2.0);
  }
  // Variance of every output sample of the unnormalised inverse transform.
  const bool nyquist = n % 2 == 0 && n > 1;
  double var = scale[0] * scale[0];
  for (int k = 1; k < bins; ++k) {
    var += (nyquist && k == bins - 1) ? scale[k] * scale[k] : 4.0 * scale[k] * scale[k];
  }
  const double norm = 1.0 / std::sqrt(var);

  const fftw_plan plan = InversePlans::instance().get(n);
  std::vector<fftw_complex> spec(static_cast<std::size_t>(bins));
  std::vector<double> out(static_cast<std::size_t>(n));
  Eigen::MatrixXd result(horizon, dims);
  for (int d = 0; d < dims; ++d) {
    for (int k = 0; k < bins; ++k) {
      const bool real_only = k == 0 || (nyquist && k == bins - 1);
      spec[k][0] = scale[k] * rng.normal();
      spec[k][1] = real_only ? 0.0 : scale[k] * rng.normal();
    }
    fftw_execute_dft_c2r(plan, spec.data(), out.data());
    for (int t = 0; t < n; ++t) result(t, d) = out[t] * norm;
  }
  return result;
}

Eigen::MatrixXd colored_noise(int horizon, int dims, double beta, std::uint64_t seed) {
  Rng rng(seed, "plan.colored_noise");
  return colored_noise(horizon, dims, beta, rng);
}

double trajectory_cost(const std::vector<Vec3>& track, const Vec3& goal, double gamma) {
  require(!track.empty(), "trajectory_cost: empty track");
  double cost = 0.0;
  double w = 1.0;
  for (const Vec3& p : track) {
    cost += w * (p - goal).norm();
    w *= gamma;
  }
  return cost;
}

PlanResult icem_optimize(const SequenceCost& cost, int action_dim, const IcemParams& p, Rng& rng,
                         const Eigen::MatrixXd* warm_mean) {
  p.validate();
  require(action_dim >= 1, "icem: action dimension must be positive");
  const int h = p.horizon;
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(h, action_dim);
  if (warm_mean) {
    require(warm_mean->rows() == h && warm_mean->cols() == action_dim, "icem: warm start shape mismatch");
    mean = *warm_mean;
  }
  Eigen::MatrixXd stdev = Eigen::MatrixXd::Constant(h, action_dim, p.max_std);
  const int n_elite = p.elite_count();

  struct Candidate {
    Eigen::MatrixXd actions;
    double cost;
  };
  auto evaluate = [&](Eigen::MatrixXd a) {
    a = a.cwiseMax(p.action_low).cwiseMin(p.action_high);
    const double c = cost(a);
    if (!std::isfinite(c)) throw NumericalError("icem: dynamics produced a non-finite cost");
    return Candidate{std::move(a), c};
  };

  PlanResult result;
  result.cost = std::numeric_limits<double>::infinity();
  std::vector<Candidate> elites;
  for (int it = 0; it < p.max_iters; ++it) {
    const int n = p.population_at(it);
    std::vector<Candidate> pool;
    pool.reserve(static_cast<std::size_t>(n) + 1 + elites.size());
    for (int j = 0; j < n; ++j) {
      const Eigen::MatrixXd noise = colored_noise(h, action_dim, p.noise_beta, rng);
      pool.push_back(evaluate(mean + stdev.cwiseProduct(noise)));
    }
    pool.push_back(evaluate(mean));
    for (Candidate& e : elites) pool.push_back(std::move(e));

    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pool[a].cost < pool[b].cost; });
    const int keep = std::min<int>(n_elite, static_cast<int>(pool.size()));
    elites.clear();
    for (int e = 0; e < keep; ++e) elites.push_back(pool[order[e]]);

    if (elites.front().cost < result.cost) {
      result.cost = elites.front().cost;
      result.actions = elites.front().actions;
    }
    result.cost_trace.push_back(result.cost);

    Eigen::MatrixXd new_mean = Eigen::MatrixXd::Zero(h, action_dim);
    for (const Candidate& e : elites) new_mean += e.actions;
    new_mean /= keep;
    Eigen::MatrixXd new_var = Eigen::MatrixXd::Zero(h, action_dim);
    for (const Candidate& e : elites) new_var += (e.actions - new_mean).cwiseAbs2();
    new_var /= keep;
    mean = p.alpha_momentum * mean + (1.0 - p.alpha_momentum) * new_mean;
    stdev = p.beta_momentum * stdev + (1.0 - p.beta_momentum) * new_var.cwiseSqrt();
    stdev = stdev.cwiseMax(p.min_std).cwiseMin(p.max_std);
  }
  result.mean = mean;
  return result;
}

std::vector<Vec3> rollout_point(const PointDynamics& dyn, const Vec3& start,
                                const Eigen::MatrixXd& actions) {
  std::vector<Vec3> track;
  track.reserve(static_cast<std::size_t>(actions.rows()));
  Vec3 p = start;
  for (Eigen::Index t = 0; t < actions.rows(); ++t) {
    p = dyn(p, actions.row(t).transpose());
    track.push_back(p);
  }
  return track;
}

PlanResult icem_plan(const PointDynamics& dyn, const Vec3& start, const Vec3& goal, int action_dim,
                     const IcemParams& p, std::uint64_t seed) {
  Rng rng(seed, "plan.icem");
  const SequenceCost cost = [&](const Eigen::MatrixXd& a) {
    return trajectory_cost(rollout_point(dyn, start, a), goal, p.cost_decay);
  };
  return icem_optimize(cost, action_dim, p, rng);
}

// ---------------------------------------------------------------------------

int tracked_object(const ActionModel& model) {
  require(model.object_count() > 0, "servoing: model has no objects");
  int best = 0;
  for (int k = 1; k < model.object_count(); ++k) {
    if (model.gain[k].norm() > model.gain[best].norm()) best = k;
  }
  return best;
}

namespace {

// Pixel carrying the tracked object's mask centroid, moved to the nearest
// pixel the object dominates and the sensor sees.
std::pair<int, int> tracked_pixel(const MaskStack& masks, int k, const Mask& valid) {
  const Image& m = masks.masks;
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      const double v = m(y, x, k);
      sw += v;
      sx += v * x;
      sy += v * y;
    }
  }
  require(sw > 0.0, "servoing: tracked object has an empty mask");
  const double cx = sx / sw;
  const double cy = sy / sw;
  int by = -1, bx = -1;
  double best = std::numeric_limits<double>::infinity();
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!valid(y, x) || m(y, x, k) < 0.5) continue;
      const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (d < best) {
        best = d;
        by = y;
        bx = x;
      }
    }
  }
  require(by >= 0, "servoing: tracked object is not visible");
  return {by, bx};
}

bool in_view(const Vec3& p, const CameraIntrinsics& intr) {
  if (!(p.z() > kMinDepth)) return false;
  const Vec2 uv = project_point(p, intr);
  return uv.x() >= -0.5 && uv.y() >= -0.5 && uv.x() < intr.width - 0.5 && uv.y() < intr.height - 0.5;
}

constexpr double kSurfaceTol = 0.03;  // metres

// Keeps the predicted point on its camera ray and re-reads its depth from the
// nearest observed pixel on the same surface. Snapping to the observed point
// itself would quantise the track to the pixel grid and lose sub-pixel motion.
Vec3 reobserve(const Vec3& p, const PointCloud& cloud, const CameraIntrinsics& intr, int radius) {
  if (!(p.z() > kMinDepth)) return p;
  const Vec2 uv = project_point(p, intr);
  const long px = std::lround(uv.x());
  const long py = std::lround(uv.y());
  double z = 0.0;
  double best_d = std::numeric_limits<double>::infinity();
  for (long y = py - radius; y <= py + radius; ++y) {
    for (long x = px - radius; x <= px + radius; ++x) {
      if (x < 0 || y < 0 || x >= intr.width || y >= intr.height) continue;
      if (!cloud.valid(static_cast<int>(y), static_cast<int>(x))) continue;
      const Vec3 q = cloud.at(static_cast<int>(y), static_cast<int>(x));
      const double d = (q - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        z = q.z();
      }
    }
  }
  // another surface is closer than the prediction's own; trust the model
  if (!(z > kMinDepth) || std::abs(z - p.z()) > kSurfaceTol) return p;
  return p * (z / p.z());
}

}  // namespace

EpisodeRecord run_servoing(const Scene& env_start, const ActionModel& model, const IcemParams& p,
                           const Vec3& goal, const ServoOptions& opts, std::uint64_t seed) {
  p.validate();
  require(opts.budget >= 0, "servoing: budget must be non-negative");
  require(env_start.spec.action.dim == model.action_dim, "servoing: env and model action dims differ");
  const CameraIntrinsics& intr = env_start.spec.intr;
  require(in_view(goal, intr), "servoing: goal must lie inside the camera frustum");

  EpisodeRecord record;
  Scene env = env_start;
  const RenderResult first = render(env);
  const int k = tracked_object(model);
  const auto [py, px] = tracked_pixel(model.masks, k, first.frame.valid);

  Eigen::VectorXd weights(model.object_count());
  for (int j = 0; j < model.object_count(); ++j) weights[j] = model.masks.masks(py, px, j);
  const int label = first.labels(py, px);
  const Vec3 local(first.local(py, px, 0), first.local(py, px, 1), first.local(py, px, 2));
  Vec3 tracked = first.cloud.at(py, px);
  record.initial_point = material_point(env, label, local);
  record.initial_distance = (record.initial_point - goal).norm();
  if (opts.budget == 0) return record;

  const PointDynamics dyn = [&](const Vec3& q, const Eigen::VectorXd& a) {
    const std::vector<Se3> motions = model.motions_for(a);
    Vec3 out = Vec3::Zero();
    for (int j = 0; j < model.object_count(); ++j) out += weights[j] * se3_apply(motions[j], q);
    return out;
  };
  const Vec2 goal_px = project_point(goal, intr);

  Rng rng(seed, "plan.servoing");
  Eigen::MatrixXd warm;
  const double threshold = opts.success_fraction * record.initial_distance;
  for (int step = 0; step < opts.budget; ++step) {
    const Vec3 start = tracked;
    SequenceCost cost;
    if (opts.cost == ServoCost::k3d) {
      cost = [&](const Eigen::MatrixXd& a) {
        return trajectory_cost(rollout_point(dyn, start, a), goal, p.cost_decay);
      };
    } else {
      cost = [&](const Eigen::MatrixXd& a) {
        double c = 0.0, w = 1.0;
        for (const Vec3& q : rollout_point(dyn, start, a)) {
          c += w * (q.z() > kMinDepth ? (project_point(q, intr) - goal_px).norm() : 1e6);
          w *= p.cost_decay;
        }
        return c;
      };
    }
    const PlanResult plan = icem_optimize(cost, model.action_dim, p, rng, warm.size() ? &warm : nullptr);
    warm = Eigen::MatrixXd::Zero(plan.mean.rows(), plan.mean.cols());
    warm.topRows(plan.mean.rows() - 1) = plan.mean.bottomRows(plan.mean.rows() - 1);

    const Eigen::VectorXd action = plan.actions.row(0).transpose();
    env = advance_scene(env, action_motions(env, action));
    const Vec3 truth = material_point(env, label, local);
    if (opts.tracking == ServoTracking::kState) {
      tracked = truth;
    } else {
      tracked = reobserve(dyn(tracked, action), render(env).cloud, intr, opts.snap_radius);
    }

    const double d = (truth - goal).norm();
    record.steps.push_back({action, tracked, d});
    if (!in_view(truth, intr)) {
      record.diverged = true;
      break;
    }
    if (d <= threshold) ++record.within_count;
  }
  record.success = !record.diverged && record.within_count >= opts.hits_required;
  return record;
}

}  // namespace rgbdyn
