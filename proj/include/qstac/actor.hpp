#pragma once

// Particle policy: a prior network proposes a diagonal Gaussian over control
// sequences, sampled particles are refined by constrained Stein updates
// toward beta * (summed soft Q along the model rollout) + log prior, and one
// particle's first control is executed.
//
// Particles are flat vectors of length D = H * d_u, time-major: coordinate
// h * d_u + k is control component k at horizon step h.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "qstac/critic.hpp"
#include "qstac/diffnet.hpp"
#include "qstac/dynamics.hpp"
#include "qstac/errors.hpp"
#include "qstac/random.hpp"
#include "qstac/svgd.hpp"

namespace qstac {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kBoundStds = 3.0;

struct SvgdConfig {
  int steps = 5;
  double step_size = 0.05;
  double penalty = 10.0;
  double multiplier_step = 0.1;
  double lambda_max = 100.0;
  double tol_g = 1e-3;
  double fixed_bandwidth = 0.0;  // > 0 replaces the median heuristic
  int trace_probes = 8;
  int exact_trace_max_dim = 32;
};

struct ActorConfig {
  int horizon = 5;
  int particles = 16;
  double beta = 5.0;
  bool detach_states = false;
  bool detach_svgd = false;
  bool saturate_critic_input = true;
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::relu;
  AdamConfig adam;
  SvgdConfig svgd;

  void validate() const {
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (particles < 1) throw ConfigError("particles must be >= 1");
    if (svgd.steps < 0) throw ConfigError("svgd steps must be >= 0");
    if (!(svgd.step_size > 0.0)) throw ConfigError("svgd step size must be positive");
    if (!(svgd.penalty >= 0.0)) throw ConfigError("penalty must be >= 0");
    if (!(svgd.multiplier_step >= 0.0)) throw ConfigError("multiplier step must be >= 0");
    if (!(svgd.lambda_max >= 0.0)) throw ConfigError("lambda_max must be >= 0");
    if (!(svgd.tol_g > 0.0)) throw ConfigError("tol_g must be positive");
    if (svgd.trace_probes < 1) throw ConfigError("trace probes must be >= 1");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
  }
};

/// Prior network together with its optimizer and the action box it acts in.
class Actor {
 public:
  Actor() = default;

  Actor(int obs_dim, const Eigen::VectorXd& action_low, const Eigen::VectorXd& action_high, const ActorConfig& cfg,
        Rng& rng)
      : cfg_(cfg), obs_dim_(obs_dim), low_(action_low), high_(action_high) {
    cfg.validate();
    if (low_.size() != high_.size() || low_.size() < 1) throw ConfigError("actor: bad action bounds");
    if ((low_.array() > high_.array()).any()) throw ConfigError("actor: action lower bound exceeds upper bound");
    spec_.layer_sizes.push_back(obs_dim);
    for (int w : cfg.hidden) spec_.layer_sizes.push_back(w);
    spec_.layer_sizes.push_back(2 * dim());
    spec_.activation = cfg.activation;
    spec_.validate();
    params_ = init_params(spec_, rng);
    optim_ = AdamState(params_.size(), cfg.adam);
  }

  const ActorConfig& config() const { return cfg_; }
  ActorConfig& config() { return cfg_; }
  const NetSpec& spec() const { return spec_; }
  NetParams& params() { return params_; }
  const NetParams& params() const { return params_; }
  AdamState& optimizer() { return optim_; }
  const AdamState& optimizer() const { return optim_; }

  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return static_cast<int>(low_.size()); }
  int horizon() const { return cfg_.horizon; }
  int dim() const { return cfg_.horizon * act_dim(); }
  const Eigen::VectorXd& action_low() const { return low_; }
  const Eigen::VectorXd& action_high() const { return high_; }
  Eigen::VectorXd tiled_low() const { return low_.replicate(cfg_.horizon, 1); }
  Eigen::VectorXd tiled_high() const { return high_.replicate(cfg_.horizon, 1); }

 private:
  ActorConfig cfg_;
  NetSpec spec_;
  NetParams params_;
  AdamState optim_;
  int obs_dim_ = 0;
  Eigen::VectorXd low_;
  Eigen::VectorXd high_;
};

struct GaussianPrior {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  Eigen::VectorXd raw_log_std;  // network output before clamping
};

/// Priors for a batch of observations (one column each).
struct PriorBatch {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd stddev;
  Eigen::MatrixXd raw_log_std;

  GaussianPrior column(Eigen::Index b) const { return {mean.col(b), stddev.col(b), raw_log_std.col(b)}; }
};

inline PriorBatch prior_from_output(const Eigen::MatrixXd& out) {
  if (out.rows() % 2 != 0) throw ConfigError("prior output length must be even");
  if (!out.allFinite()) throw InferenceError("prior network produced a non-finite output", -1, -1);
  const Eigen::Index D = out.rows() / 2;
  PriorBatch p;
  p.mean = out.topRows(D);
  p.raw_log_std = out.bottomRows(D);
  p.stddev = p.raw_log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax).array().exp().matrix();
  return p;
}

inline PriorBatch prior_batch(const Actor& actor, const Eigen::MatrixXd& obs, ForwardTrace* trace = nullptr) {
  if (obs.rows() != actor.obs_dim()) throw ConfigError("prior: observation dimension mismatch");
  const Eigen::MatrixXd out = forward_batch(actor.spec(), actor.params(), obs, trace);
  if (out.rows() != 2 * actor.dim()) throw ConfigError("prior: network output must have 2 * H * d_u entries");
  return prior_from_output(out);
}

inline GaussianPrior prior_params(const Actor& actor, const Eigen::VectorXd& obs) {
  return prior_batch(actor, obs).column(0);
}

/// Stein bounds for one prior: [mean - 3 std, mean + 3 std] intersected with
/// the action box. When the two intervals do not meet, both ends collapse onto
/// the nearest box edge.
struct ParticleBounds {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::VectorXd lower_active;  // 1 where the prior side is the binding one
  Eigen::VectorXd upper_active;
};

inline ParticleBounds make_bounds(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev,
                                  const Eigen::VectorXd& box_low, const Eigen::VectorXd& box_high) {
  const Eigen::Index D = mean.size();
  if (box_low.size() != D || box_high.size() != D) throw ConfigError("bounds: dimension mismatch");
  ParticleBounds b{Eigen::VectorXd(D), Eigen::VectorXd(D), Eigen::VectorXd::Zero(D), Eigen::VectorXd::Zero(D)};
  for (Eigen::Index d = 0; d < D; ++d) {
    const double lo = mean[d] - kBoundStds * stddev[d];
    const double hi = mean[d] + kBoundStds * stddev[d];
    if (lo > box_high[d]) {
      b.lower[d] = b.upper[d] = box_high[d];
    } else if (hi < box_low[d]) {
      b.lower[d] = b.upper[d] = box_low[d];
    } else {
      b.lower[d] = std::max(lo, box_low[d]);
      b.upper[d] = std::min(hi, box_high[d]);
      b.lower_active[d] = lo > box_low[d] ? 1.0 : 0.0;
      b.upper_active[d] = hi < box_high[d] ? 1.0 : 0.0;
    }
  }
  return b;
}

struct ParticleSet {
  Eigen::MatrixXd particles;  // D x m
  Eigen::MatrixXd noise;      // standard normal draws, particles = mean + std * noise
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

inline ParticleSet sample_prior(const GaussianPrior& prior, int m, const Eigen::VectorXd& box_low,
                                const Eigen::VectorXd& box_high, Rng& rng) {
  if (m < 1) throw ConfigError("sample_prior: need at least one particle");
  const Eigen::Index D = prior.mean.size();
  ParticleSet s;
  s.noise.resize(D, m);
  for (int i = 0; i < m; ++i) s.noise.col(i) = standard_normal(D, rng);
  s.particles = (s.noise.array().colwise() * prior.stddev.array()).matrix().colwise() + prior.mean;
  const ParticleBounds b = make_bounds(prior.mean, prior.stddev, box_low, box_high);
  s.lower = b.lower;
  s.upper = b.upper;
  return s;
}

struct LogDensity {
  double value = 0.0;
  Eigen::VectorXd grad;
};

inline LogDensity log_prior(const Eigen::VectorXd& U, const GaussianPrior& prior) {
  if (U.size() != prior.mean.size()) throw ConfigError("log_prior: dimension mismatch");
  const Eigen::ArrayXd var = prior.stddev.array().square();
  const Eigen::ArrayXd diff = (U - prior.mean).array();
  LogDensity r;
  r.value = (-0.5 * diff.square() / var - prior.stddev.array().log() - 0.5 * std::log(2.0 * std::numbers::pi)).sum();
  r.grad = (-diff / var).matrix();
  return r;
}

/// Everything needed to score control sequences for one batch of states.
struct PosteriorContext {
  const CriticEnsemble* critic = nullptr;
  const DynamicsModel* model = nullptr;
  double beta = 1.0;
  bool detach_states = false;
  bool saturate = true;
  Eigen::VectorXd action_low;
  Eigen::VectorXd action_high;
};

inline PosteriorContext make_context(const Actor& actor, const CriticEnsemble& critic, const DynamicsModel& model) {
  const ActorConfig& c = actor.config();
  return {&critic, &model, c.beta, c.detach_states, c.saturate_critic_input, actor.action_low(), actor.action_high()};
}

struct TrajectoryQ {
  double value = 0.0;
  Eigen::MatrixXd state_grads;    // d_x x H
  Eigen::MatrixXd control_grads;  // d_u x H, zero on saturated coordinates
};

namespace detail {

// Critic inputs for every (particle, horizon step) pair; column n * H + h.
struct CriticInputs {
  std::vector<Trajectory> trajectories;
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd control_mask;  // d_u x (N * H), 0 where the control is saturated
};

inline CriticInputs critic_inputs(const PosteriorContext& ctx, const Eigen::MatrixXd& states,
                                  const Eigen::MatrixXd& U, int m) {
  const DynamicsModel& f = *ctx.model;
  const int dx = f.state_dim();
  const int du = f.control_dim();
  const Eigen::Index N = U.cols();
  if (U.rows() % du != 0) throw ConfigError("particle length is not a multiple of the control dimension");
  if (states.rows() != dx || states.cols() * m != N) throw ConfigError("posterior: state batch mismatch");
  const int H = static_cast<int>(U.rows() / du);
  CriticInputs ci;
  ci.trajectories.resize(N);
  ci.inputs.resize(dx + du, N * H);
  ci.control_mask = Eigen::MatrixXd::Ones(du, N * H);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::Map<const Eigen::MatrixXd> controls(U.col(n).data(), du, H);
    ci.trajectories[n] = rollout(f, states.col(n / m), controls);
    for (int h = 0; h < H; ++h) {
      const Eigen::Index col = n * H + h;
      ci.inputs.col(col).head(dx) = ci.trajectories[n].states.col(h);
      for (int k = 0; k < du; ++k) {
        double u = controls(k, h);
        if (ctx.saturate && (u > ctx.action_high[k] || u < ctx.action_low[k])) {
          u = std::clamp(u, ctx.action_low[k], ctx.action_high[k]);
          ci.control_mask(k, col) = 0.0;
        }
        ci.inputs(dx + k, col) = u;
      }
    }
  }
  return ci;
}

}  // namespace detail

inline TrajectoryQ trajectory_q(const PosteriorContext& ctx, const Trajectory& traj) {
  const int dx = ctx.model->state_dim();
  const int du = ctx.model->control_dim();
  const int H = traj.horizon();
  const Eigen::Map<const Eigen::VectorXd> flat(traj.controls.data(), du * H);
  const detail::CriticInputs ci = detail::critic_inputs(ctx, traj.states.col(0), flat, 1);
  const QBatch q = q_value_batch(*ctx.critic, ci.inputs, QMode::min_online, true);
  TrajectoryQ r;
  r.value = q.values.sum();
  r.state_grads = q.input_grads.topRows(dx);
  r.control_grads = q.input_grads.bottomRows(du).cwiseProduct(ci.control_mask);
  return r;
}

/// Per-particle value and gradient of beta * Q_sum(rollout(U)) + log prior(U).
struct PosteriorBatch {
  Eigen::VectorXd value;
  Eigen::VectorXd qsum;
  Eigen::MatrixXd grad;  // D x N
};

/// Columns of U are grouped by state: column n belongs to state n / m.
inline PosteriorBatch posterior_batch(const PosteriorContext& ctx, const Eigen::MatrixXd& states,
                                      const Eigen::MatrixXd& U, const Eigen::MatrixXd& mean,
                                      const Eigen::MatrixXd& stddev, int m, bool want_grad = true) {
  const int dx = ctx.model->state_dim();
  const int du = ctx.model->control_dim();
  const Eigen::Index N = U.cols();
  const Eigen::Index D = U.rows();
  const int H = static_cast<int>(D / du);
  const detail::CriticInputs ci = detail::critic_inputs(ctx, states, U, m);
  const QBatch q = q_value_batch(*ctx.critic, ci.inputs, QMode::min_online, want_grad);

  PosteriorBatch out;
  out.qsum = Eigen::Map<const Eigen::MatrixXd>(q.values.data(), H, N).colwise().sum().transpose();
  out.value = ctx.beta * out.qsum;
  if (want_grad) out.grad.resize(D, N);
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::Index b = n / m;
    const Eigen::ArrayXd var = stddev.col(b).array().square();
    const Eigen::ArrayXd diff = (U.col(n) - mean.col(b)).array();
    out.value[n] += (-0.5 * diff.square() / var - stddev.col(b).array().log() - log_norm).sum();
    if (!want_grad) continue;
    const Eigen::MatrixXd control_grads =
        q.input_grads.block(dx, n * H, du, H).cwiseProduct(ci.control_mask.middleCols(n * H, H));
    Eigen::MatrixXd g;
    if (ctx.detach_states)
      g = control_grads;
    else
      g = rollout_grad(*ctx.model, ci.trajectories[n], q.input_grads.block(0, n * H, dx, H), control_grads);
    out.grad.col(n) = ctx.beta * Eigen::Map<const Eigen::VectorXd>(g.data(), D) + (-diff / var).matrix();
  }
  return out;
}

/// Derivative of the (beta-free) Q_sum gradient map along V, per column. With
/// detached states this is not symmetric: the map is sum_h grad_u Q(x_h(U), u_h).
inline Eigen::MatrixXd qsum_hvp_batch(const PosteriorContext& ctx, const Eigen::MatrixXd& states,
                                      const Eigen::MatrixXd& U, const Eigen::MatrixXd& V, int m) {
  const DynamicsModel& f = *ctx.model;
  const int dx = f.state_dim();
  const int du = f.control_dim();
  const Eigen::Index N = U.cols();
  const Eigen::Index D = U.rows();
  const int H = static_cast<int>(D / du);
  const detail::CriticInputs ci = detail::critic_inputs(ctx, states, U, m);

  std::vector<Eigen::MatrixXd> dX(N);
  Eigen::MatrixXd tangents = Eigen::MatrixXd::Zero(dx + du, N * H);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::Map<const Eigen::MatrixXd> v(V.col(n).data(), du, H);
    // the detached gradient still reads the rolled-out states, so they move with U
    dX[n] = rollout_tangent(f, ci.trajectories[n], v);
    tangents.block(0, n * H, dx, H) = dX[n].leftCols(H);
    tangents.block(dx, n * H, du, H) = v.cwiseProduct(ci.control_mask.middleCols(n * H, H));
  }
  const QCurvature qc = q_min_curvature(*ctx.critic, ci.inputs, tangents);

  Eigen::MatrixXd out(D, N);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::MatrixXd mask = ci.control_mask.middleCols(n * H, H);
    const Eigen::MatrixXd control_dot = qc.input_hvps.block(dx, n * H, du, H).cwiseProduct(mask);
    Eigen::MatrixXd g;
    if (ctx.detach_states) {
      g = control_dot;
    } else {
      const Eigen::Map<const Eigen::MatrixXd> v(V.col(n).data(), du, H);
      g = rollout_grad_tangent(f, ci.trajectories[n], v, dX[n], qc.input_grads.block(0, n * H, dx, H),
                               qc.input_hvps.block(0, n * H, dx, H), control_dot);
    }
    out.col(n) = Eigen::Map<const Eigen::VectorXd>(g.data(), D);
  }
  return out;
}

/// Single-state form: value and gradient of beta * Q_sum + log prior per particle.
inline PosteriorBatch log_posterior_grad(const Eigen::MatrixXd& particles, const PosteriorContext& ctx,
                                         const Eigen::VectorXd& x, const GaussianPrior& prior) {
  return posterior_batch(ctx, x, particles, prior.mean, prior.stddev, static_cast<int>(particles.cols()));
}

/// H_hat = -1/m sum_i [ log q0(U0_i) - sum_l eps * tr_l,i ].
inline double entropy_estimate(const Eigen::VectorXd& initial_log_q, const std::vector<Eigen::VectorXd>& traces,
                               double step_size) {
  const Eigen::Index m = initial_log_q.size();
  if (m < 1) throw ConfigError("entropy_estimate: no particles");
  double acc = initial_log_q.sum();
  for (const Eigen::VectorXd& t : traces) {
    if (t.size() != m) throw ConfigError("entropy_estimate: trace record size mismatch");
    acc -= step_size * t.sum();
  }
  return -acc / static_cast<double>(m);
}

/// State of one Stein iteration, kept for the backward pass.
struct SvgdIterate {
  Eigen::MatrixXd particles;  // D x N, before the update
  Eigen::MatrixXd grads;      // Lagrangian gradients used by the update
  Eigen::VectorXd bandwidth;  // per state
  Eigen::MatrixXd traces;     // m x B
};

struct InferenceBatch {
  int batch = 0;
  int particles = 0;
  int dim = 0;
  Eigen::MatrixXd states;
  PriorBatch prior;
  ForwardTrace prior_trace;
  Eigen::MatrixXd noise;  // D x N
  Eigen::MatrixXd lower, upper, lower_active, upper_active;  // D x B
  std::vector<SvgdIterate> iterates;
  Eigen::MatrixXd final_particles;  // D x N
  Eigen::VectorXd initial_log_q;    // N
  Eigen::VectorXd entropy;          // B
  Eigen::VectorXi selected;         // B
  Eigen::MatrixXd raw_actions;      // d_u x B, selected particle's first block
  Eigen::MatrixXd actions;          // raw_actions clamped to the action box
  Eigen::MatrixXd trajectory_q;     // m x B (only when scored)
  long violations = 0;              // final coordinates with |g| > tol_g
  long coordinates = 0;
};

struct InferenceOptions {
  bool train_mode = true;
  bool keep_iterates = false;   // needed for the backward pass
  bool score_particles = false; // trajectory Q of final particles (forced in eval mode)
};

/// Runs prior -> sample -> L constrained Stein iterations -> selection for a
/// batch of observations (columns of `states`).
inline InferenceBatch infer_batch(const Actor& actor, const CriticEnsemble& critic, const DynamicsModel& model,
                                  const Eigen::MatrixXd& states, Rng& rng, const InferenceOptions& opt) {
  const ActorConfig& cfg = actor.config();
  const SvgdConfig& sc = cfg.svgd;
  const int m = cfg.particles;
  const int D = actor.dim();
  const int du = actor.act_dim();
  const int B = static_cast<int>(states.cols());
  const Eigen::Index N = static_cast<Eigen::Index>(B) * m;
  if (model.control_dim() != du || model.state_dim() != actor.obs_dim())
    throw ConfigError("inference: model and actor dimensions disagree");
  const PosteriorContext ctx = make_context(actor, critic, model);

  InferenceBatch r;
  r.batch = B;
  r.particles = m;
  r.dim = D;
  r.states = states;
  r.prior = prior_batch(actor, states, opt.keep_iterates ? &r.prior_trace : nullptr);

  const Eigen::VectorXd box_low = actor.tiled_low();
  const Eigen::VectorXd box_high = actor.tiled_high();
  r.noise.resize(D, N);
  r.lower.resize(D, B);
  r.upper.resize(D, B);
  r.lower_active.resize(D, B);
  r.upper_active.resize(D, B);
  Eigen::MatrixXd U(D, N);
  r.initial_log_q.resize(N);
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi);
  for (int b = 0; b < B; ++b) {
    const ParticleBounds pb = make_bounds(r.prior.mean.col(b), r.prior.stddev.col(b), box_low, box_high);
    r.lower.col(b) = pb.lower;
    r.upper.col(b) = pb.upper;
    r.lower_active.col(b) = pb.lower_active;
    r.upper_active.col(b) = pb.upper_active;
    const double log_det = r.prior.stddev.col(b).array().log().sum();
    for (int i = 0; i < m; ++i) {
      const Eigen::Index n = static_cast<Eigen::Index>(b) * m + i;
      r.noise.col(n) = standard_normal(D, rng);
      U.col(n) = r.prior.mean.col(b) + r.prior.stddev.col(b).cwiseProduct(r.noise.col(n));
      r.initial_log_q[n] = -0.5 * r.noise.col(n).squaredNorm() - log_det - D * log_norm;
    }
  }

  Eigen::MatrixXd lambda = Eigen::MatrixXd::Zero(D, N);
  Eigen::MatrixXd trace_total = Eigen::MatrixXd::Zero(m, B);
  for (int l = 0; l < sc.steps; ++l) {
    const PosteriorBatch post = posterior_batch(ctx, states, U, r.prior.mean, r.prior.stddev, m);
    SvgdIterate it;
    it.grads.resize(D, N);
    it.bandwidth.resize(B);
    it.traces.resize(m, B);
    Eigen::MatrixXd next(D, N);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(b) * m;
      for (int i = 0; i < m; ++i)
        it.grads.col(c0 + i) = lagrangian_grad(post.grad.col(c0 + i), U.col(c0 + i), lambda.col(c0 + i),
                                               sc.penalty, r.lower.col(b), r.upper.col(b));
      const Eigen::MatrixXd Ub = U.middleCols(c0, m);
      const Eigen::MatrixXd Gb = it.grads.middleCols(c0, m);
      if (!Gb.allFinite()) {
        for (int i = 0; i < m; ++i)
          if (!Gb.col(i).allFinite())
            throw InferenceError("inference: non-finite log-posterior gradient at step " + std::to_string(l) +
                                     ", particle " + std::to_string(i),
                                 l, i);
      }
      const double h = sc.fixed_bandwidth > 0.0 ? sc.fixed_bandwidth : median_bandwidth(Ub);
      it.bandwidth[b] = h;
      if (D <= sc.exact_trace_max_dim)
        it.traces.col(b) = stein_trace_exact(Ub, Gb, h);
      else
        it.traces.col(b) = stein_trace_hutchinson(Ub, Gb, h, sc.trace_probes, rng).trace;
      next.middleCols(c0, m) = svgd_step(Ub, stein_direction(Ub, Gb, h), sc.step_size);
    }
    trace_total += it.traces;
    if (opt.keep_iterates) {
      it.particles = U;
      r.iterates.push_back(std::move(it));
    }
    U = std::move(next);
    for (Eigen::Index n = 0; n < N; ++n) {
      if (!U.col(n).allFinite())
        throw InferenceError("inference: non-finite particle after step " + std::to_string(l) + ", particle " +
                                 std::to_string(n % m),
                             l, static_cast<int>(n % m));
      const Eigen::Index b = n / m;
      lambda.col(n) =
          lambda_update(lambda.col(n), constraint_g(U.col(n), r.lower.col(b), r.upper.col(b)), sc.multiplier_step,
                        sc.lambda_max);
    }
  }
  r.final_particles = U;

  r.entropy.resize(B);
  for (int b = 0; b < B; ++b) {
    const Eigen::VectorXd lq = r.initial_log_q.segment(static_cast<Eigen::Index>(b) * m, m);
    r.entropy[b] = -(lq.sum() - sc.step_size * trace_total.col(b).sum()) / m;
  }

  const bool score = opt.score_particles || !opt.train_mode;
  if (score) {
    const PosteriorBatch post = posterior_batch(ctx, states, U, r.prior.mean, r.prior.stddev, m, false);
    r.trajectory_q = Eigen::Map<const Eigen::MatrixXd>(post.qsum.data(), m, B);
  }

  r.selected.resize(B);
  r.raw_actions.resize(du, B);
  r.actions.resize(du, B);
  std::uniform_int_distribution<int> pick(0, m - 1);
  for (int b = 0; b < B; ++b) {
    int sel = 0;
    if (opt.train_mode) {
      sel = pick(rng);
    } else {
      for (int i = 1; i < m; ++i)
        if (r.trajectory_q(i, b) > r.trajectory_q(sel, b)) sel = i;
    }
    r.selected[b] = sel;
    r.raw_actions.col(b) = U.col(static_cast<Eigen::Index>(b) * m + sel).head(du);
    r.actions.col(b) = r.raw_actions.col(b).cwiseMax(actor.action_low()).cwiseMin(actor.action_high());
  }

  r.coordinates = static_cast<long>(D) * N;
  for (Eigen::Index n = 0; n < N; ++n) {
    const Eigen::VectorXd g = constraint_g(U.col(n), r.lower.col(n / m), r.upper.col(n / m));
    r.violations += (g.array().abs() > sc.tol_g).count();
  }
  return r;
}

struct PolicySample {
  Eigen::MatrixXd particles;  // D x m, after refinement
  int selected = 0;
  Eigen::VectorXd action;      // executed (clamped) first control
  Eigen::VectorXd raw_action;  // first control of the selected particle before the clamp
  double entropy = 0.0;
  Eigen::VectorXd trajectory_q;
  GaussianPrior prior;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  long violations = 0;
};

inline PolicySample infer_particles(const Eigen::VectorXd& x, const Actor& actor, const CriticEnsemble& critic,
                                    const DynamicsModel& model, Rng& rng, bool train_mode) {
  InferenceOptions opt;
  opt.train_mode = train_mode;
  opt.score_particles = true;
  const InferenceBatch r = infer_batch(actor, critic, model, x, rng, opt);
  PolicySample s;
  s.particles = r.final_particles;
  s.selected = r.selected[0];
  s.action = r.actions.col(0);
  s.raw_action = r.raw_actions.col(0);
  s.entropy = r.entropy[0];
  s.trajectory_q = r.trajectory_q.col(0);
  s.prior = r.prior.column(0);
  s.lower = r.lower.col(0);
  s.upper = r.upper.col(0);
  s.violations = r.violations;
  return s;
}

/// Reverse pass from particle adjoints at the final iterate (and entropy
/// adjoints) to the prior network output, given as [d mean; d raw_log_std].
///
/// Through the Stein chain the bandwidths, multipliers and trace terms are
/// treated as constants. With detach_svgd the final particles are treated as
/// the initial sample plus a constant displacement.
inline Eigen::MatrixXd policy_output_grad(const Actor& actor, const CriticEnsemble& critic,
                                          const DynamicsModel& model, const InferenceBatch& r,
                                          const Eigen::MatrixXd& particle_adjoint,
                                          const Eigen::VectorXd& entropy_adjoint) {
  const ActorConfig& cfg = actor.config();
  const SvgdConfig& sc = cfg.svgd;
  const int m = r.particles;
  const int B = r.batch;
  const int D = r.dim;
  const Eigen::MatrixXd& mu = r.prior.mean;
  const Eigen::MatrixXd& sd = r.prior.stddev;
  Eigen::MatrixXd dmu = Eigen::MatrixXd::Zero(D, B);
  Eigen::MatrixXd dsd = Eigen::MatrixXd::Zero(D, B);
  Eigen::MatrixXd adj = particle_adjoint;

  if (!cfg.detach_svgd && sc.steps > 0) {
    if (static_cast<int>(r.iterates.size()) != sc.steps) throw ConfigError("backward: inference iterates not kept");
    const PosteriorContext ctx = make_context(actor, critic, model);
    const double eps = sc.step_size;
    const double c = sc.penalty;
    for (int l = sc.steps - 1; l >= 0; --l) {
      const SvgdIterate& it = r.iterates[l];
      Eigen::MatrixXd next_adj = adj;
      Eigen::MatrixXd W(D, B * static_cast<Eigen::Index>(m));
      for (int b = 0; b < B; ++b) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(b) * m;
        const Eigen::MatrixXd Ub = it.particles.middleCols(c0, m);
        const Eigen::MatrixXd Gb = it.grads.middleCols(c0, m);
        const double h = it.bandwidth[b];
        const Eigen::MatrixXd K = (-pairwise_sq_distances(Ub) / h).array().exp().matrix();
        const Eigen::MatrixXd w = (eps / m) * adj.middleCols(c0, m);
        const Eigen::MatrixXd Wb = w * K;  // W_j = sum_i K_ji w_i
        W.middleCols(c0, m) = Wb;
        // E(i, j) = K_ij [ w_i . G_j - (2/h) w_i . (U_j - U_i) ]
        const Eigen::MatrixXd wG = w.transpose() * Gb;
        const Eigen::MatrixXd wU = w.transpose() * Ub;
        const Eigen::VectorXd wself = wU.diagonal();
        const Eigen::MatrixXd E =
            K.cwiseProduct(wG - (2.0 / h) * (wU.colwise() - wself));
        const Eigen::RowVectorXd e_col = E.colwise().sum();
        const Eigen::VectorXd e_row = E.rowwise().sum();
        const Eigen::RowVectorXd k_sum = K.colwise().sum();
        Eigen::MatrixXd kernel_part = (-2.0 / h) * (Ub * e_col.asDiagonal() - Ub * E) + (-2.0 / h) * Wb +
                                      (2.0 / h) * (Ub * E.transpose() - Ub * e_row.asDiagonal()) +
                                      (2.0 / h) * w * k_sum.asDiagonal();
        next_adj.middleCols(c0, m) += kernel_part;

        // Hessian terms of the prior and penalty parts, and their direct
        // dependence on the prior mean and scale.
        for (int j = 0; j < m; ++j) {
          const Eigen::Index n = c0 + j;
          for (int d = 0; d < D; ++d) {
            const double Wd = Wb(d, j);
            const double s = sd(d, b);
            const double u = Ub(d, j);
            next_adj(d, n) -= Wd / (s * s);
            dmu(d, b) += Wd / (s * s);
            dsd(d, b) += Wd * 2.0 * (u - mu(d, b)) / (s * s * s);
            if (u > r.upper(d, b)) {
              next_adj(d, n) -= c * Wd;
              if (r.upper_active(d, b) > 0.0) {
                dmu(d, b) += c * Wd;
                dsd(d, b) += c * Wd * kBoundStds;
              }
            } else if (u < r.lower(d, b)) {
              next_adj(d, n) -= c * Wd;
              if (r.lower_active(d, b) > 0.0) {
                dmu(d, b) += c * Wd;
                dsd(d, b) -= c * Wd * kBoundStds;
              }
            }
          }
        }
      }
      if (cfg.beta != 0.0) next_adj += cfg.beta * qsum_hvp_batch(ctx, r.states, it.particles, W, m);
      adj = std::move(next_adj);
    }
  }

  for (int b = 0; b < B; ++b) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(b) * m;
    dmu.col(b) += adj.middleCols(c0, m).rowwise().sum();
    dsd.col(b) += adj.middleCols(c0, m).cwiseProduct(r.noise.middleCols(c0, m)).rowwise().sum();
    // H_hat contains +sum_d log std_d from the initial log densities.
    dsd.col(b) += entropy_adjoint[b] * sd.col(b).cwiseInverse();
  }

  Eigen::MatrixXd out(2 * D, B);
  out.topRows(D) = dmu;
  const Eigen::ArrayXXd inside =
      (r.prior.raw_log_std.array() > kLogStdMin && r.prior.raw_log_std.array() < kLogStdMax).cast<double>();
  out.bottomRows(D) = (dsd.array() * sd.array() * inside).matrix();
  return out;
}

struct ActorLossResult {
  double loss = 0.0;
  double mean_q = 0.0;
  double mean_entropy = 0.0;
  NetParams grads;
};

/// loss = mean_b [ -min_online Q(s_b, a_b) - alpha * H_hat(s_b) ] where a_b is the
/// selected particle's first control (saturated to the action box when the
/// critic input is saturated).
inline ActorLossResult actor_loss_from(const Actor& actor, const CriticEnsemble& critic, const DynamicsModel& model,
                                       const InferenceBatch& r, double alpha) {
  const int B = r.batch;
  const int du = actor.act_dim();
  const bool sat = actor.config().saturate_critic_input;
  Eigen::MatrixXd a = sat ? r.actions : r.raw_actions;
  Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(du, B);
  if (sat)
    mask = ((r.raw_actions.array() <= actor.action_high().replicate(1, B).array()) &&
            (r.raw_actions.array() >= actor.action_low().replicate(1, B).array()))
               .cast<double>();
  const QBatch q = q_value_batch(critic, stack_inputs(r.states, a), QMode::min_online, true);

  ActorLossResult res;
  res.mean_q = q.values.mean();
  res.mean_entropy = r.entropy.mean();
  res.loss = -res.mean_q - alpha * res.mean_entropy;
  if (!std::isfinite(res.loss)) throw TrainingError("actor_loss: non-finite loss");

  Eigen::MatrixXd particle_adj = Eigen::MatrixXd::Zero(r.dim, static_cast<Eigen::Index>(B) * r.particles);
  const Eigen::MatrixXd qa = q.input_grads.bottomRows(du).cwiseProduct(mask);
  for (int b = 0; b < B; ++b)
    particle_adj.col(static_cast<Eigen::Index>(b) * r.particles + r.selected[b]).head(du) = -qa.col(b) / B;
  const Eigen::VectorXd ent_adj = Eigen::VectorXd::Constant(B, -alpha / B);

  const Eigen::MatrixXd out_grad = policy_output_grad(actor, critic, model, r, particle_adj, ent_adj);
  res.grads = NetParams(actor.spec());
  backward_batch(actor.spec(), actor.params(), r.prior_trace, out_grad, &res.grads);
  return res;
}

inline ActorLossResult actor_loss(const Actor& actor, const CriticEnsemble& critic, const DynamicsModel& model,
                                  const Eigen::MatrixXd& states, double alpha, Rng& rng) {
  InferenceOptions opt;
  opt.train_mode = true;
  opt.keep_iterates = true;
  const InferenceBatch r = infer_batch(actor, critic, model, states, rng, opt);
  return actor_loss_from(actor, critic, model, r, alpha);
}

inline void actor_update(Actor& actor, const ActorLossResult& r) { adam_step(actor.params(), r.grads, actor.optimizer()); }

}  // namespace qstac
