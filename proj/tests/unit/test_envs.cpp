#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "qstac/envs.hpp"

using namespace qstac;

namespace {

Eigen::Vector3d pend(double theta, double omega) { return {std::cos(theta), std::sin(theta), omega}; }

double angle_of(const Eigen::VectorXd& s) { return std::atan2(s[1], s[0]); }

}  // namespace

TEST(PendulumStep, UprightRestIsEquilibrium) {
  const StepResult r = pendulum_step(pend(0.0, 0.0), 0.0, PendulumParams{});
  EXPECT_NEAR(angle_of(r.next_state), 0.0, 1e-15);
  EXPECT_EQ(r.next_state[2], 0.0);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_FALSE(r.done);
}

TEST(PendulumStep, HangingRestCostsPiSquared) {
  const StepResult r = pendulum_step(pend(std::numbers::pi, 0.0), 0.0, PendulumParams{});
  EXPECT_NEAR(std::abs(angle_of(r.next_state)), std::numbers::pi, 1e-12);
  EXPECT_NEAR(r.next_state[2], 0.0, 1e-12);
  EXPECT_NEAR(r.reward, -std::numbers::pi * std::numbers::pi, 1e-9);
}

TEST(PendulumStep, QuarterTurnHandIntegration) {
  const StepResult r = pendulum_step(pend(std::numbers::pi / 2, 0.0), 0.0, PendulumParams{});
  EXPECT_NEAR(r.next_state[2], 0.75, 1e-12);
  EXPECT_NEAR(angle_of(r.next_state), std::numbers::pi / 2 + 0.0375, 1e-12);
}

TEST(PendulumStep, TorqueAndSpeedAreClamped) {
  const StepResult a = pendulum_step(pend(0.3, 1.0), 50.0, PendulumParams{});
  const StepResult b = pendulum_step(pend(0.3, 1.0), 2.0, PendulumParams{});
  EXPECT_EQ(a.next_state, b.next_state);
  EXPECT_NEAR(a.reward - b.reward, 0.0, 1e-15);  // cost uses the clamped torque
  const StepResult c = pendulum_step(pend(1.0, 7.99), 2.0, PendulumParams{});
  EXPECT_EQ(c.next_state[2], 8.0);
}

TEST(PendulumStep, NonFiniteInputIsDomainError) {
  EXPECT_THROW(pendulum_step(pend(0.0, NAN), 0.0, PendulumParams{}), DomainError);
  EXPECT_THROW(pendulum_step(pend(0.0, 0.0), INFINITY, PendulumParams{}), DomainError);
}

TEST(PendulumEnv, ResetIsSeededAndOnTheCircle) {
  PendulumEnv env;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Eigen::VectorXd a = env.reset(seed);
    const Eigen::VectorXd b = env.reset(seed);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(a[0] * a[0] + a[1] * a[1], 1.0, 1e-9);
    EXPECT_LE(std::abs(a[2]), 1.0);
  }
  EXPECT_NE(env.reset(1), env.reset(2));
}

TEST(PendulumEnv, StateInvariantsUnderAdversarialActions) {
  PendulumEnv env;
  env.reset(3);
  Rng rng(4);
  for (int t = 0; t < 2000; ++t) {
    const double u = (t % 7 < 3 ? 1.0 : -1.0) * uniform(0.0, 1e6, rng);
    const StepResult r = env.step(Eigen::VectorXd::Constant(1, u));
    ASSERT_NEAR(r.next_state.head<2>().squaredNorm(), 1.0, 1e-9);
    ASSERT_LE(std::abs(r.next_state[2]), 8.0);
    ASSERT_TRUE(std::isfinite(r.reward));
  }
}

TEST(Particle2dStep, ZeroInputAtRestStaysPut) {
  Particle2dConfig c;
  c.goal = Eigen::Vector2d(5.0, 5.0);
  const Eigen::Vector4d s(1.0, -2.0, 0.0, 0.0);
  const StepResult r = particle2d_step(s, Eigen::Vector2d::Zero(), c);
  EXPECT_EQ(r.next_state, Eigen::VectorXd(s));
  EXPECT_FALSE(r.done);
}

TEST(Particle2dStep, SemiImplicitHandIntegration) {
  Particle2dConfig c;
  c.physics.dt = 0.1;
  c.goal = Eigen::Vector2d(5.0, 5.0);
  const StepResult r = particle2d_step(Eigen::Vector4d::Zero(), Eigen::Vector2d(1.0, 0.0), c);
  EXPECT_NEAR(r.next_state[2], 0.1, 1e-15);
  EXPECT_NEAR(r.next_state[3], 0.0, 1e-15);
  EXPECT_NEAR(r.next_state[0], 0.01, 1e-15);
  EXPECT_NEAR(r.next_state[1], 0.0, 1e-15);
}

TEST(Particle2dStep, VelocityClampedAtBound) {
  Particle2dConfig c;
  c.goal = Eigen::Vector2d(5.0, 5.0);
  const StepResult r = particle2d_step(Eigen::Vector4d(0.0, 0.0, 4.99, 0.0), Eigen::Vector2d(10.0, 0.0), c);
  EXPECT_EQ(r.next_state[2], 5.0);
  EXPECT_EQ(r.next_state[3], 0.0);
}

TEST(Particle2dStep, RewardFormula) {
  Particle2dConfig c;
  c.goal = Eigen::Vector2d(3.0, 4.0);
  c.obstacles = {GaussianObstacle{Eigen::Vector2d(0.0, 1.0), 2.0, 0.5}};
  const Eigen::Vector2d u(1.0, -2.0);
  const StepResult r = particle2d_step(Eigen::Vector4d::Zero(), u, c);
  const Eigen::Vector2d p = r.next_state.head<2>();
  const double expect = -0.1 * ((p - c.goal).norm() + 2.0 * std::exp(-(p - Eigen::Vector2d(0, 1)).squaredNorm() / 0.5) +
                                0.01 * u.squaredNorm());
  EXPECT_NEAR(r.reward, expect, 1e-12);
}

TEST(Particle2dStep, GoalAtStartTerminatesImmediately) {
  Particle2dConfig c;
  c.goal = Eigen::Vector2d(1.0, 1.0);
  EXPECT_TRUE(particle2d_step(Eigen::Vector4d(1.0, 1.0, 0.0, 0.0), Eigen::Vector2d::Zero(), c).done);
}

TEST(Particle2dEnv, StateBoundsUnderAdversarialActions) {
  EnvConfig cfg;
  cfg.kind = EnvKind::particle2d;
  cfg.difficulty = Difficulty::hard;
  auto env = make_environment(cfg);
  env->reset(9);
  Rng rng(10);
  for (int t = 0; t < 3000; ++t) {
    const Eigen::Vector2d u(uniform(-1e4, 1e4, rng), t < 1500 ? 1e4 : -1e4);
    const StepResult r = env->step(u);
    ASSERT_LE(r.next_state.head<2>().cwiseAbs().maxCoeff(), 10.0);
    ASSERT_LE(r.next_state.segment<2>(2).cwiseAbs().maxCoeff(), 5.0);
    ASSERT_TRUE(std::isfinite(r.reward));
  }
}

TEST(Particle2dEnv, LayoutsGrowWithDifficulty) {
  EXPECT_EQ(default_layout(Difficulty::easy).field.obstacles.size(), 2u);
  EXPECT_EQ(default_layout(Difficulty::medium).field.obstacles.size(), 4u);
  EXPECT_EQ(default_layout(Difficulty::hard).field.obstacles.size(), 7u);
}

// Oracle: rejection sampling over the configured layout; every accepted start is clear.
TEST(Particle2dEnv, ResetStartClearOfObstacles) {
  for (Difficulty d : {Difficulty::easy, Difficulty::medium, Difficulty::hard}) {
    Particle2dEnv env(Particle2dPhysics{}, default_layout(d));
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
      const Eigen::VectorXd s = env.reset(seed);
      for (const auto& o : env.obstacles()) ASSERT_GE((s.head<2>() - o.center).norm(), 1.0);
      ASSERT_EQ(s.segment<2>(2), Eigen::Vector2d::Zero());
    }
  }
}

TEST(Particle2dEnv, ResetIsSeededAndRegionsDisjoint) {
  const NavigationLayout layout = default_layout(Difficulty::medium);
  Particle2dEnv env(Particle2dPhysics{}, layout);
  EXPECT_EQ(env.reset(17), env.reset(17));
  const auto inside = [](const Region& r, const Eigen::Vector2d& p) {
    return (p.array() >= r.lo.array()).all() && (p.array() <= r.hi.array()).all();
  };
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Eigen::VectorXd s = env.reset(seed);
    EXPECT_TRUE(inside(layout.start_region, s.head<2>()));
    EXPECT_TRUE(inside(layout.goal_region, s.tail<2>()));
    EXPECT_FALSE(inside(layout.goal_region, s.head<2>()));
  }
}

TEST(Particle2dEnv, RewardDeterministicInTransition) {
  EnvConfig cfg;
  cfg.kind = EnvKind::particle2d;
  auto a = make_environment(cfg);
  auto b = make_environment(cfg);
  a->reset(5);
  b->reset(5);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Vector2d u(std::sin(t), std::cos(t));
    const StepResult ra = a->step(u), rb = b->step(u);
    EXPECT_EQ(ra.reward, rb.reward);
    EXPECT_EQ(ra.next_state, rb.next_state);
  }
}

TEST(Particle2dEnv, RejectsNonPositiveObstacleParameters) {
  NavigationLayout layout = default_layout(Difficulty::easy);
  layout.field.obstacles[0].width = 0.0;
  EXPECT_THROW(Particle2dEnv(Particle2dPhysics{}, layout), ConfigError);
}

TEST(EnvConfig, DefaultEpisodeLimits) {
  EnvConfig cfg;
  EXPECT_EQ(make_environment(cfg)->max_episode_steps(), 200);
  cfg.kind = EnvKind::particle2d;
  EXPECT_EQ(make_environment(cfg)->max_episode_steps(), 300);
  cfg.max_episode_steps = 50;
  EXPECT_EQ(make_environment(cfg)->max_episode_steps(), 50);
}

TEST(WrapAngle, MapsIntoPrincipalRange) {
  for (double a = -20.0; a < 20.0; a += 0.37) {
    const double w = wrap_angle(a);
    EXPECT_GE(w, -std::numbers::pi);
    EXPECT_LE(w, std::numbers::pi);
    EXPECT_NEAR(std::cos(w), std::cos(a), 1e-12);
    EXPECT_NEAR(std::sin(w), std::sin(a), 1e-12);
  }
}
