#include <cmath>

#include <gtest/gtest.h>

#include "rgbdyn/error.hpp"
#include "rgbdyn/plan.hpp"
#include "test_util.hpp"

using namespace rgbdyn;
using namespace testutil;

TEST(IcemParams, DefaultsAreTheReferenceTable) {
  const IcemParams p;
  EXPECT_EQ(p.population, 150);
  EXPECT_EQ(p.min_std, 0.001);
  EXPECT_EQ(p.max_std, 1.0);
  EXPECT_EQ(p.elite_frac, 0.1);
  EXPECT_EQ(p.horizon, 5);
  EXPECT_EQ(p.max_iters, 5);
  EXPECT_EQ(p.alpha_momentum, 0.1);
  EXPECT_EQ(p.beta_momentum, 0.5);
  EXPECT_EQ(p.noise_beta, 2.0);
  EXPECT_EQ(p.pop_decay, 0.9);
  EXPECT_EQ(p.cost_decay, 0.8);
}

TEST(IcemParams, Validation) {
  IcemParams p;
  p.elite_frac = 1.0;
  EXPECT_THROW(p.validate(), ValidationError);
  p = IcemParams{};
  p.min_std = 2.0;
  EXPECT_THROW(p.validate(), ValidationError);
  p = IcemParams{};
  p.population = 5;  // 5 * 0.1 < 1 elite
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(IcemParams, PopulationDecaysToTwiceTheElites) {
  IcemParams p;
  p.population = 40;
  p.pop_decay = 0.5;
  EXPECT_EQ(p.elite_count(), 4);
  EXPECT_EQ(p.population_at(0), 40);
  EXPECT_EQ(p.population_at(1), 20);
  EXPECT_EQ(p.population_at(2), 10);
  EXPECT_EQ(p.population_at(3), 8);
  EXPECT_EQ(p.population_at(9), 8);
}

namespace {

double lag1(const Eigen::VectorXd& x) {
  const double m = x.mean();
  double num = 0, den = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    den += (x[i] - m) * (x[i] - m);
    if (i + 1 < x.size()) num += (x[i] - m) * (x[i + 1] - m);
  }
  return num / den;
}

}  // namespace

TEST(ColoredNoise, WhiteNoiseIsUncorrelated) {
  const Eigen::MatrixXd n = colored_noise(100000, 1, 0.0, 3);
  EXPECT_NEAR(lag1(n.col(0)), 0.0, 0.02);
}

TEST(ColoredNoise, UnitVarianceForAnyExponent) {
  // 1e5 draws pooled over planner-length sequences.
  for (double beta : {0.0, 1.0, 2.0, 3.0}) {
    Rng rng(4, "test.cnvar");
    Eigen::MatrixXd pooled(100000, 2);
    for (int s = 0; s < 20000; ++s) pooled.middleRows(5 * s, 5) = colored_noise(5, 2, beta, rng);
    for (int d = 0; d < 2; ++d) {
      const double v = pooled.col(d).squaredNorm() / pooled.rows();
      EXPECT_NEAR(v, 1.0, 0.03) << "beta " << beta;
    }
  }
}

TEST(ColoredNoise, RedderNoiseIsSmoother) {
  const Eigen::MatrixXd white = colored_noise(4096, 1, 0.0, 5);
  const Eigen::MatrixXd red = colored_noise(4096, 1, 2.0, 5);
  EXPECT_GT(lag1(red.col(0)), 0.9);
  EXPECT_GT(lag1(red.col(0)), lag1(white.col(0)));
}

TEST(ColoredNoise, Deterministic) {
  EXPECT_EQ(colored_noise(16, 3, 2.0, 9), colored_noise(16, 3, 2.0, 9));
  EXPECT_NE(colored_noise(16, 3, 2.0, 9), colored_noise(16, 3, 2.0, 10));
}

TEST(TrajectoryCost, ClosedForms) {
  const Vec3 goal(1, 2, 3);
  EXPECT_EQ(trajectory_cost(std::vector<Vec3>(4, goal), goal, 0.8), 0.0);
  const double d = 0.7, gamma = 0.8;
  const int h = 6;
  std::vector<Vec3> track(h, goal + Vec3(0, d, 0));
  EXPECT_NEAR(trajectory_cost(track, goal, gamma), d * (1 - std::pow(gamma, h)) / (1 - gamma), 1e-12);
}

TEST(TrajectoryCost, MatchesManualSum) {
  Rng rng(6, "test.trajcost");
  const Vec3 goal = random_vec(rng, 1);
  std::vector<Vec3> track;
  for (int i = 0; i < 9; ++i) track.push_back(random_vec(rng, 1));
  double manual = 0;
  for (int t = 0; t < 9; ++t) manual += std::pow(0.9, t) * (track[t] - goal).norm();
  EXPECT_NEAR(trajectory_cost(track, goal, 0.9), manual, 1e-12);
  EXPECT_THROW(trajectory_cost({}, goal, 0.9), ValidationError);
}

TEST(Icem, GoalAtStartKeepsStill) {
  const PointDynamics dyn = [](const Vec3& q, const Eigen::VectorXd& a) { return Vec3(q + 0.1 * a); };
  const IcemParams p;
  const Vec3 start(0.1, -0.2, 1.0);
  const PlanResult r = icem_plan(dyn, start, start, 3, p, 1);
  EXPECT_LT(r.actions.row(0).norm(), 3 * p.min_std);
}

TEST(Icem, TripleIntegratorReachesGoal) {
  // State (position, velocity, acceleration); the action is the jerk.
  constexpr double dt = 0.5;
  const PointDynamics dyn = [](const Vec3& s, const Eigen::VectorXd& u) {
    const double a = s[2] + dt * u[0];
    const double v = s[1] + dt * a;
    return Vec3(s[0] + dt * v, v, a);
  };
  // Receding horizon: plan, apply the first action, replan.
  const IcemParams p;
  const Vec3 goal(1, 0, 0);
  Vec3 s = Vec3::Zero();
  for (int step = 0; step < 40; ++step) {
    const PlanResult r = icem_plan(dyn, s, goal, 1, p, 100 + step);
    for (std::size_t i = 1; i < r.cost_trace.size(); ++i) EXPECT_LE(r.cost_trace[i], r.cost_trace[i - 1]);
    s = dyn(s, r.actions.row(0).transpose());
  }
  EXPECT_LT(std::abs(s[0] - goal[0]), 0.05);
}

TEST(Icem, SamplesStayInBounds) {
  IcemParams p;
  p.action_low = -0.3;
  p.action_high = 0.2;
  double lo = 1e9, hi = -1e9;
  const SequenceCost cost = [&](const Eigen::MatrixXd& a) {
    lo = std::min(lo, a.minCoeff());
    hi = std::max(hi, a.maxCoeff());
    return (a.array() - 5.0).square().sum();
  };
  Rng rng(3, "test.bounds");
  const PlanResult r = icem_optimize(cost, 2, p, rng);
  EXPECT_GE(lo, -0.3);
  EXPECT_LE(hi, 0.2);
  EXPECT_GE(r.actions.minCoeff(), -0.3);
  EXPECT_LE(r.actions.maxCoeff(), 0.2);
}

TEST(Icem, DeterministicAndRejectsNonFiniteCosts) {
  const SequenceCost cost = [](const Eigen::MatrixXd& a) { return (a.array() - 0.3).abs().sum(); };
  Rng r1(4, "x"), r2(4, "x");
  const PlanResult a = icem_optimize(cost, 2, IcemParams{}, r1);
  const PlanResult b = icem_optimize(cost, 2, IcemParams{}, r2);
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.cost_trace, b.cost_trace);
  Rng r3(4, "x");
  EXPECT_THROW(icem_optimize([](const Eigen::MatrixXd&) { return std::nan(""); }, 1, IcemParams{}, r3),
               NumericalError);
}

namespace {

// Env whose action moves object 0 by `scale` metres per unit action in x, y,
// and a model that knows it.
struct ServoSetup {
  Scene env;
  ActionModel model;
};

ServoSetup servo_setup(double env_scale) {
  SceneSpec spec = box_scene(32, 4);
  spec.objects[0].size = Vec3(0.15, 0.15, 0.05);
  spec.action.dim = 2;
  spec.action.map = Eigen::MatrixXd::Zero(6, 2);
  spec.action.map(3, 0) = env_scale;
  spec.action.map(4, 1) = env_scale;
  ActionModel m;
  m.action_dim = 2;
  m.gain = {Eigen::MatrixXd::Zero(6, 2), Eigen::MatrixXd::Zero(6, 2)};
  m.gain[1](3, 0) = m.gain[1](4, 1) = 0.02;
  m.bias = {Vec6::Zero(), Vec6::Zero()};
  const Scene env(spec);
  m.masks = render(env).gt_masks;
  return {env, m};
}

}  // namespace

TEST(Servoing, ZeroBudgetFailsWithNoSteps) {
  const ServoSetup s = servo_setup(0.02);
  ServoOptions o;
  o.budget = 0;
  const EpisodeRecord r = run_servoing(s.env, s.model, IcemParams{}, Vec3(0, 0, 0.875), o, 1);
  EXPECT_FALSE(r.success);
  EXPECT_TRUE(r.steps.empty());
}

TEST(Servoing, StartingAtGoalStaysThere) {
  // The env ignores actions, so the tracked point never leaves the goal.
  const ServoSetup s = servo_setup(0.0);
  ServoOptions probe;
  probe.budget = 0;
  const Vec3 goal = run_servoing(s.env, s.model, IcemParams{}, Vec3(0, 0, 0.875), probe, 1).initial_point;
  ServoOptions o;
  o.budget = 10;
  IcemParams p;
  p.population = 30;
  const EpisodeRecord r = run_servoing(s.env, s.model, p, goal, o, 1);
  EXPECT_EQ(r.initial_distance, 0.0);
  EXPECT_TRUE(r.success);
  EXPECT_EQ(r.within_count, o.budget);
}

TEST(Servoing, ReachesNearbyGoalOnExactModel) {
  const ServoSetup s = servo_setup(0.02);
  const Vec3 c = s.env.poses[0].trans - Vec3(0, 0, 0.025);
  const Vec3 goal = c + Vec3(0.08, -0.06, 0);
  ServoOptions o;
  o.budget = 30;
  o.tracking = ServoTracking::kModel;
  const EpisodeRecord carried = run_servoing(s.env, s.model, IcemParams{}, goal, o, 3);
  EXPECT_TRUE(carried.success) << "within " << carried.within_count << " final " << carried.steps.back().distance;
  o.tracking = ServoTracking::kState;
  const EpisodeRecord r = run_servoing(s.env, s.model, IcemParams{}, goal, o, 3);
  EXPECT_TRUE(r.success) << "within " << r.within_count << " final " << r.steps.back().distance;
  for (const EpisodeStep& st : r.steps) {
    EXPECT_LE(st.action.maxCoeff(), 1.0);
    EXPECT_GE(st.action.minCoeff(), -1.0);
  }
  EXPECT_EQ(r.steps.size(), 30u);
  int within = 0;
  for (const EpisodeStep& st : r.steps) within += st.distance <= 0.1 * r.initial_distance;
  EXPECT_EQ(within, r.within_count);
}
