#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "rgbdyn/fit.hpp"
#include "rgbdyn/geometry.hpp"
#include "rgbdyn/rng.hpp"
#include "rgbdyn/sim.hpp"

namespace rgbdyn {

struct IcemParams {
  int population = 150;
  double min_std = 0.001;
  double max_std = 1.0;
  double elite_frac = 0.1;
  int horizon = 5;
  int max_iters = 5;
  double alpha_momentum = 0.1;
  double beta_momentum = 0.5;
  double noise_beta = 2.0;
  double pop_decay = 0.9;
  double cost_decay = 0.8;
  // Box bounds applied to every action component.
  double action_low = -1.0;
  double action_high = 1.0;

  void validate() const;
  int elite_count() const;
  int population_at(int iteration) const;
};

// horizon x dims samples whose power spectrum along the horizon falls off as
// f^-beta; every entry has unit variance.
Eigen::MatrixXd colored_noise(int horizon, int dims, double beta, Rng& rng);
Eigen::MatrixXd colored_noise(int horizon, int dims, double beta, std::uint64_t seed);

double trajectory_cost(const std::vector<Vec3>& track, const Vec3& goal, double gamma);

// Cost of a horizon x action_dim action sequence.
using SequenceCost = std::function<double(const Eigen::MatrixXd&)>;

struct PlanResult {
  Eigen::MatrixXd actions;          // best sequence seen
  double cost = 0.0;
  std::vector<double> cost_trace;   // best cost after each iteration
  Eigen::MatrixXd mean;             // final sampling mean, for warm starts
};

PlanResult icem_optimize(const SequenceCost& cost, int action_dim, const IcemParams& p, Rng& rng,
                         const Eigen::MatrixXd* warm_mean = nullptr);

// Point dynamics: next tracked point from the current one and an action.
using PointDynamics = std::function<Vec3(const Vec3&, const Eigen::VectorXd&)>;

std::vector<Vec3> rollout_point(const PointDynamics& dyn, const Vec3& start,
                                const Eigen::MatrixXd& actions);

PlanResult icem_plan(const PointDynamics& dyn, const Vec3& start, const Vec3& goal, int action_dim,
                     const IcemParams& p, std::uint64_t seed);

// ---- closed-loop servoing --------------------------------------------------

enum class ServoCost {
  k3d,     // discounted 3D distance of the tracked point
  kPixel,  // discounted image-plane distance of its projection
};

struct EpisodeStep {
  Eigen::VectorXd action;
  Vec3 tracked;      // planner's tracked point after the step
  double distance;   // true distance to goal after the step
};

struct EpisodeRecord {
  std::vector<EpisodeStep> steps;
  bool success = false;
  int within_count = 0;
  double initial_distance = 0.0;
  Vec3 initial_point = Vec3::Zero();  // true position of the tracked point at the start
  bool diverged = false;
};

enum class ServoTracking {
  kState,  // the env reports the tracked point after every step, like an end-effector
  kModel,  // the model carries the point; only its depth is re-read from the sensor
};

struct ServoOptions {
  int budget = 100;
  ServoCost cost = ServoCost::k3d;
  ServoTracking tracking = ServoTracking::kState;
  int hits_required = 5;
  double success_fraction = 0.1;
  int snap_radius = 3;  // kModel: pixels searched when re-reading the tracked depth
};

// Object the planner tracks: the one whose gain has the largest norm.
int tracked_object(const ActionModel& model);

// Closed loop on the simulator: plan, execute the first action, observe,
// replan. The tracked point starts at the mask-centroid pixel of the tracked
// object, which requires the model masks to be aligned with the env's current
// frame.
EpisodeRecord run_servoing(const Scene& env, const ActionModel& model, const IcemParams& p,
                           const Vec3& goal, const ServoOptions& opts, std::uint64_t seed);

}  // namespace rgbdyn
