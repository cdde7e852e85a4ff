#pragma once

// Baseline soft actor-critic policy: single-step Gaussian squashed by tanh and
// rescaled to the action box.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "qstac/critic.hpp"
#include "qstac/diffnet.hpp"
#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// log(1 - tanh(y)^2), stable for large |y|.
inline double log_tanh_jacobian(double y) { return 2.0 * (std::numbers::ln2 - y - softplus(-2.0 * y)); }

struct SacPolicyConfig {
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::relu;
  AdamConfig adam;
};

class SquashedGaussianPolicy {
 public:
  SquashedGaussianPolicy() = default;

  SquashedGaussianPolicy(int obs_dim, const Eigen::VectorXd& low, const Eigen::VectorXd& high,
                         const SacPolicyConfig& cfg, Rng& rng)
      : obs_dim_(obs_dim), low_(low), high_(high) {
    if (low.size() != high.size() || low.size() < 1) throw ConfigError("sac: bad action bounds");
    if (!(low.array() < high.array()).all()) throw ConfigError("sac: action bounds must satisfy low < high");
    spec_.layer_sizes.push_back(obs_dim);
    for (int w : cfg.hidden) spec_.layer_sizes.push_back(w);
    spec_.layer_sizes.push_back(2 * static_cast<int>(low.size()));
    spec_.activation = cfg.activation;
    spec_.validate();
    params_ = init_params(spec_, rng);
    optim_ = AdamState(params_.size(), cfg.adam);
  }

  const NetSpec& spec() const { return spec_; }
  NetParams& params() { return params_; }
  const NetParams& params() const { return params_; }
  AdamState& optimizer() { return optim_; }
  const AdamState& optimizer() const { return optim_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return static_cast<int>(low_.size()); }
  Eigen::VectorXd center() const { return 0.5 * (high_ + low_); }
  Eigen::VectorXd scale() const { return 0.5 * (high_ - low_); }
  const Eigen::VectorXd& action_low() const { return low_; }
  const Eigen::VectorXd& action_high() const { return high_; }

 private:
  NetSpec spec_;
  NetParams params_;
  AdamState optim_;
  int obs_dim_ = 0;
  Eigen::VectorXd low_;
  Eigen::VectorXd high_;
};

struct SquashedSample {
  Eigen::MatrixXd mean, stddev, raw_log_std;  // d_u x B
  Eigen::MatrixXd noise;                      // d_u x B
  Eigen::MatrixXd pre_squash;                 // mean + std * noise
  Eigen::MatrixXd actions;                    // rescaled tanh(pre_squash)
  Eigen::VectorXd log_prob;                   // B
  ForwardTrace trace;
};


/// Samples (train) or takes the mean (deterministic) for each observation column.
inline SquashedSample sac_sample(const SquashedGaussianPolicy& pi, const Eigen::MatrixXd& obs, Rng* rng,
                                 bool keep_trace = false) {
  const int du = pi.act_dim();
  const Eigen::Index B = obs.cols();
  SquashedSample s;
  const Eigen::MatrixXd out = forward_batch(pi.spec(), pi.params(), obs, keep_trace ? &s.trace : nullptr);
  if (!out.allFinite()) throw InferenceError("sac policy produced a non-finite output", -1, -1);
  s.mean = out.topRows(du);
  s.raw_log_std = out.bottomRows(du);
  s.stddev = s.raw_log_std.cwiseMax(-5.0).cwiseMin(2.0).array().exp().matrix();
  s.noise = Eigen::MatrixXd::Zero(du, B);
  if (rng)
    for (Eigen::Index b = 0; b < B; ++b) s.noise.col(b) = standard_normal(du, *rng);
  s.pre_squash = s.mean + s.stddev.cwiseProduct(s.noise);
  s.actions.resize(du, B);
  s.log_prob.resize(B);
  const Eigen::VectorXd c = pi.center(), k = pi.scale();
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi);
  for (Eigen::Index b = 0; b < B; ++b) {
    double lp = 0.0;
    for (int d = 0; d < du; ++d) {
      const double y = s.pre_squash(d, b);
      s.actions(d, b) = std::clamp(c[d] + k[d] * std::tanh(y), pi.action_low()[d], pi.action_high()[d]);
      lp += -0.5 * s.noise(d, b) * s.noise(d, b) - std::log(s.stddev(d, b)) - log_norm - log_tanh_jacobian(y) -
            std::log(k[d]);
    }
    s.log_prob[b] = lp;
  }
  return s;
}

struct SacActorLoss {
  double loss = 0.0;
  double mean_q = 0.0;
  double mean_log_prob = 0.0;
  NetParams grads;
};

/// loss = mean_b [ alpha * log pi(a_b | s_b) - min_online Q(s_b, a_b) ] with reparameterized a_b.
inline SacActorLoss sac_actor_loss(const SquashedGaussianPolicy& pi, const CriticEnsemble& critic,
                                   const Eigen::MatrixXd& states, double alpha, Rng& rng) {
  const int du = pi.act_dim();
  const Eigen::Index B = states.cols();
  SquashedSample s = sac_sample(pi, states, &rng, true);
  const QBatch q = q_value_batch(critic, stack_inputs(states, s.actions), QMode::min_online, true);
  SacActorLoss r;
  r.mean_q = q.values.mean();
  r.mean_log_prob = s.log_prob.mean();
  r.loss = alpha * r.mean_log_prob - r.mean_q;
  if (!std::isfinite(r.loss)) throw TrainingError("sac actor loss is non-finite");

  const Eigen::VectorXd k = pi.scale();
  Eigen::MatrixXd out_grad(2 * du, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int d = 0; d < du; ++d) {
      const double y = s.pre_squash(d, b);
      const double t = std::tanh(y);
      const double dq_dy = q.input_grads(pi.obs_dim() + d, b) * k[d] * (1.0 - t * t);
      // d log pi / dy through -log(1 - tanh^2 y) is 2 tanh y; d log pi / dstd has an extra -1/std
      const double dl_dy = (alpha * 2.0 * t - dq_dy) / B;
      const double sd = s.stddev(d, b);
      const double dl_dsd = dl_dy * s.noise(d, b) - alpha / (sd * B);
      const double raw = s.raw_log_std(d, b);
      out_grad(d, b) = dl_dy;
      out_grad(du + d, b) = (raw > -5.0 && raw < 2.0) ? dl_dsd * sd : 0.0;
    }
  }
  r.grads = NetParams(pi.spec());
  backward_batch(pi.spec(), pi.params(), s.trace, out_grad, &r.grads);
  return r;
}

}  // namespace qstac
