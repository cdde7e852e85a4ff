#pragma once

// Benchmark environments: pendulum swing-up and 2-D point-mass navigation
// through a field of Gaussian obstacles.
//
// Both environments expose their transition as a pure function so the
// dynamics models used for model-predictive rollouts share the exact same
// arithmetic as the executed environment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

struct StepResult {
  Eigen::VectorXd next_state;
  double reward = 0.0;
  bool done = false;
};

/// One replay record. `done` marks true termination only; hitting the episode
/// time limit sets `truncated` instead so that bootstrapping continues.
struct Transition {
  Eigen::VectorXd state;
  Eigen::VectorXd action;
  double reward = 0.0;
  Eigen::VectorXd next_state;
  bool done = false;
  bool truncated = false;
};

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a + std::numbers::pi, two_pi);
  if (w < 0.0) w += two_pi;
  return w - std::numbers::pi;
}

// ---------------------------------------------------------------------------
// Pendulum

struct PendulumParams {
  double mass = 1.0;
  double length = 1.0;
  double gravity = 10.0;
  double dt = 0.05;
  double max_torque = 2.0;
  double max_speed = 8.0;
};

/// State is (cos theta, sin theta, theta_dot); theta = 0 is upright.
inline StepResult pendulum_step(const Eigen::Ref<const Eigen::VectorXd>& state, double torque,
                                const PendulumParams& p) {
  if (state.size() != 3) throw ConfigError("pendulum state must have 3 components");
  if (!state.allFinite() || !std::isfinite(torque)) throw DomainError("pendulum_step: non-finite input");
  const double u = std::clamp(torque, -p.max_torque, p.max_torque);
  const double theta = std::atan2(state[1], state[0]);
  const double omega = state[2];

  const double accel = 3.0 * p.gravity / (2.0 * p.length) * std::sin(theta) + 3.0 / (p.mass * p.length * p.length) * u;
  const double omega_next = std::clamp(omega + accel * p.dt, -p.max_speed, p.max_speed);
  const double theta_next = theta + omega_next * p.dt;

  StepResult r;
  r.next_state.resize(3);
  r.next_state << std::cos(theta_next), std::sin(theta_next), omega_next;
  const double th = wrap_angle(theta);
  r.reward = -(th * th + 0.1 * omega * omega + 0.001 * u * u);
  r.done = false;
  return r;
}

// ---------------------------------------------------------------------------
// 2-D particle navigation (double integrator)

struct GaussianObstacle {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double amplitude = 1.0;
  double width = 1.0;
};

enum class Difficulty { easy, medium, hard };

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  return "easy";
}

inline Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "medium") return Difficulty::medium;
  if (s == "hard") return Difficulty::hard;
  throw ConfigError("unknown difficulty '" + s + "'");
}

struct ObstacleField {
  Difficulty difficulty = Difficulty::easy;
  std::vector<GaussianObstacle> obstacles;
};

struct Region {
  Eigen::Vector2d lo = Eigen::Vector2d::Zero();
  Eigen::Vector2d hi = Eigen::Vector2d::Zero();
};

struct NavigationLayout {
  ObstacleField field;
  Region start_region;
  Region goal_region;
};

/// Shipped layouts. Obstacles sit between the start (lower-left) and goal
/// (upper-right) regions; counts grow 2 / 4 / 7 with difficulty.
inline NavigationLayout default_layout(Difficulty d) {
  auto ob = [](double x, double y, double amp = 4.0, double width = 1.0) {
    return GaussianObstacle{Eigen::Vector2d(x, y), amp, width};
  };
  NavigationLayout layout;
  layout.field.difficulty = d;
  layout.start_region = {Eigen::Vector2d(-8.0, -8.0), Eigen::Vector2d(-6.0, -6.0)};
  layout.goal_region = {Eigen::Vector2d(6.0, 6.0), Eigen::Vector2d(8.0, 8.0)};
  switch (d) {
    case Difficulty::easy:
      layout.field.obstacles = {ob(-2.0, -2.0), ob(2.0, 2.0)};
      break;
    case Difficulty::medium:
      layout.field.obstacles = {ob(-3.0, -3.0), ob(0.0, 0.0), ob(3.0, 3.0), ob(1.5, -1.5)};
      break;
    case Difficulty::hard:
      layout.field.obstacles = {ob(-4.5, -4.5), ob(-2.5, -2.0), ob(0.0, 0.0), ob(2.0, 2.5),
                                ob(4.5, 4.5),   ob(-1.5, 2.0),  ob(2.0, -1.5)};
      break;
  }
  return layout;
}

struct Particle2dPhysics {
  double mass = 1.0;
  double dt = 0.05;
  double max_force = 10.0;
  double max_speed = 5.0;
  double max_position = 10.0;
  double goal_radius = 0.3;
  double control_cost = 0.01;
  double reward_scale = 0.1;
};

struct Particle2dConfig {
  Particle2dPhysics physics;
  std::vector<GaussianObstacle> obstacles;
  Eigen::Vector2d goal = Eigen::Vector2d::Zero();
};

inline double obstacle_penalty(const Eigen::Vector2d& p, std::span<const GaussianObstacle> obstacles) {
  double pen = 0.0;
  for (const auto& o : obstacles)
    pen += o.amplitude * std::exp(-(p - o.center).squaredNorm() / (2.0 * o.width * o.width));
  return pen;
}

namespace detail {

// Advances (x, y, vx, vy) in place; returns (reward, done).
inline std::pair<double, bool> particle2d_advance(double* s, const Eigen::Vector2d& goal, const double* force,
                                                  const Particle2dPhysics& ph,
                                                  std::span<const GaussianObstacle> obstacles) {
  double u[2];
  for (int k = 0; k < 2; ++k) {
    if (!std::isfinite(force[k]) || !std::isfinite(s[k]) || !std::isfinite(s[k + 2]))
      throw DomainError("particle2d_step: non-finite input");
    u[k] = std::clamp(force[k], -ph.max_force, ph.max_force);
  }
  for (int k = 0; k < 2; ++k) {
    s[k + 2] = std::clamp(s[k + 2] + (u[k] / ph.mass) * ph.dt, -ph.max_speed, ph.max_speed);
    s[k] = std::clamp(s[k] + s[k + 2] * ph.dt, -ph.max_position, ph.max_position);
  }
  const Eigen::Vector2d p(s[0], s[1]);
  const double dist = (p - goal).norm();
  const double reward =
      -ph.reward_scale * (dist + obstacle_penalty(p, obstacles) + ph.control_cost * (u[0] * u[0] + u[1] * u[1]));
  return {reward, dist < ph.goal_radius};
}

}  // namespace detail

/// Semi-implicit Euler step of the point mass. `state` is (x, y, vx, vy).
inline StepResult particle2d_step(const Eigen::Ref<const Eigen::VectorXd>& state, const Eigen::Vector2d& force,
                                  const Particle2dConfig& config) {
  if (state.size() != 4) throw ConfigError("particle2d state must have 4 components");
  StepResult r;
  r.next_state = state;
  auto [reward, done] =
      detail::particle2d_advance(r.next_state.data(), config.goal, force.data(), config.physics, config.obstacles);
  r.reward = reward;
  r.done = done;
  return r;
}

// ---------------------------------------------------------------------------
// Environment interface

enum class EnvKind { pendulum, particle2d };

struct EnvConfig {
  EnvKind kind = EnvKind::pendulum;
  PendulumParams pendulum;
  Particle2dPhysics particle;
  Difficulty difficulty = Difficulty::easy;
  /// Replaces the difficulty's shipped obstacle list when set.
  std::optional<std::vector<GaussianObstacle>> obstacles;
  int max_episode_steps = 0;  // 0 selects the per-environment default

  std::string id() const {
    return kind == EnvKind::pendulum ? "pendulum" : "particle2d-" + to_string(difficulty);
  }
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvKind kind() const = 0;
  virtual int observation_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual Eigen::VectorXd action_low() const = 0;
  virtual Eigen::VectorXd action_high() const = 0;
  virtual int max_episode_steps() const = 0;

  /// Starts a new episode; identical seeds give identical initial states.
  virtual Eigen::VectorXd reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Eigen::VectorXd& action) = 0;
  virtual const Eigen::VectorXd& observation() const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;
};

class PendulumEnv final : public Environment {
 public:
  explicit PendulumEnv(PendulumParams params = {}, int max_steps = 200)
      : params_(params), max_steps_(max_steps), obs_(Eigen::Vector3d(1.0, 0.0, 0.0)) {}

  EnvKind kind() const override { return EnvKind::pendulum; }
  int observation_dim() const override { return 3; }
  int action_dim() const override { return 1; }
  Eigen::VectorXd action_low() const override { return Eigen::VectorXd::Constant(1, -params_.max_torque); }
  Eigen::VectorXd action_high() const override { return Eigen::VectorXd::Constant(1, params_.max_torque); }
  int max_episode_steps() const override { return max_steps_; }
  const PendulumParams& params() const { return params_; }

  Eigen::VectorXd reset(std::uint64_t seed) override {
    Rng rng(seed);
    const double theta = uniform(-std::numbers::pi, std::numbers::pi, rng);
    const double omega = uniform(-1.0, 1.0, rng);
    obs_ = Eigen::Vector3d(std::cos(theta), std::sin(theta), omega);
    return obs_;
  }

  StepResult step(const Eigen::VectorXd& action) override {
    if (action.size() != 1) throw ConfigError("pendulum action must be 1-dimensional");
    StepResult r = pendulum_step(obs_, action[0], params_);
    obs_ = r.next_state;
    return r;
  }

  const Eigen::VectorXd& observation() const override { return obs_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<PendulumEnv>(*this); }

 private:
  PendulumParams params_;
  int max_steps_;
  Eigen::VectorXd obs_;
};

/// Observation is (x, y, vx, vy, goal_x, goal_y).
class Particle2dEnv final : public Environment {
 public:
  Particle2dEnv(Particle2dPhysics physics, NavigationLayout layout, int max_steps = 300)
      : physics_(physics), layout_(std::move(layout)), max_steps_(max_steps), obs_(Eigen::VectorXd::Zero(6)) {
    for (const auto& o : layout_.field.obstacles)
      if (!(o.amplitude > 0.0) || !(o.width > 0.0)) throw ConfigError("obstacle amplitude and width must be > 0");
    if (!(physics_.reward_scale > 0.0)) throw ConfigError("particle reward_scale must be > 0");
  }

  EnvKind kind() const override { return EnvKind::particle2d; }
  int observation_dim() const override { return 6; }
  int action_dim() const override { return 2; }
  Eigen::VectorXd action_low() const override { return Eigen::VectorXd::Constant(2, -physics_.max_force); }
  Eigen::VectorXd action_high() const override { return Eigen::VectorXd::Constant(2, physics_.max_force); }
  int max_episode_steps() const override { return max_steps_; }
  const Particle2dPhysics& physics() const { return physics_; }
  const NavigationLayout& layout() const { return layout_; }
  std::span<const GaussianObstacle> obstacles() const { return layout_.field.obstacles; }

  /// Minimum clearance between a sampled start and every obstacle centre.
  static constexpr double kStartClearance = 1.0;

  Eigen::VectorXd reset(std::uint64_t seed) override {
    Rng rng(seed);
    auto draw = [&rng](const Region& r) {
      return Eigen::Vector2d(uniform(r.lo.x(), r.hi.x(), rng), uniform(r.lo.y(), r.hi.y(), rng));
    };
    Eigen::Vector2d start;
    for (int attempt = 0;; ++attempt) {
      start = draw(layout_.start_region);
      bool clear = true;
      for (const auto& o : layout_.field.obstacles) clear = clear && (start - o.center).norm() >= kStartClearance;
      if (clear) break;
      if (attempt > 10000) throw ConfigError("start region has no point clear of the obstacles");
    }
    const Eigen::Vector2d goal = draw(layout_.goal_region);
    obs_.resize(6);
    obs_ << start.x(), start.y(), 0.0, 0.0, goal.x(), goal.y();
    return obs_;
  }

  StepResult step(const Eigen::VectorXd& action) override {
    if (action.size() != 2) throw ConfigError("particle2d action must be 2-dimensional");
    StepResult r;
    r.next_state = obs_;
    const Eigen::Vector2d goal = obs_.tail<2>();
    auto [reward, done] =
        detail::particle2d_advance(r.next_state.data(), goal, action.data(), physics_, layout_.field.obstacles);
    r.reward = reward;
    r.done = done;
    obs_ = r.next_state;
    return r;
  }

  const Eigen::VectorXd& observation() const override { return obs_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<Particle2dEnv>(*this); }

 private:
  Particle2dPhysics physics_;
  NavigationLayout layout_;
  int max_steps_;
  Eigen::VectorXd obs_;
};

inline std::unique_ptr<Environment> make_environment(const EnvConfig& cfg) {
  if (cfg.kind == EnvKind::pendulum)
    return std::make_unique<PendulumEnv>(cfg.pendulum, cfg.max_episode_steps > 0 ? cfg.max_episode_steps : 200);
  NavigationLayout layout = default_layout(cfg.difficulty);
  if (cfg.obstacles) layout.field.obstacles = *cfg.obstacles;
  return std::make_unique<Particle2dEnv>(cfg.particle, std::move(layout),
                                         cfg.max_episode_steps > 0 ? cfg.max_episode_steps : 300);
}

inline Eigen::VectorXd env_reset(Environment& env, std::uint64_t seed) { return env.reset(seed); }

}  // namespace qstac
