#pragma once

// Twin soft Q-networks with exponentially averaged targets and the
// soft-Bellman regression loss.

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "qstac/diffnet.hpp"
#include "qstac/envs.hpp"
#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

struct CriticConfig {
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::relu;
  bool twin = true;
  double gamma = 0.99;
  double tau = 0.005;
  AdamConfig adam;
};

class CriticEnsemble {
 public:
  CriticEnsemble() = default;

  CriticEnsemble(int obs_dim, int act_dim, const CriticConfig& cfg, Rng& rng)
      : obs_dim_(obs_dim), act_dim_(act_dim), gamma_(cfg.gamma), tau_(cfg.tau) {
    if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
    if (!(cfg.tau > 0.0 && cfg.tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    spec_.layer_sizes.push_back(obs_dim + act_dim);
    for (int w : cfg.hidden) spec_.layer_sizes.push_back(w);
    spec_.layer_sizes.push_back(1);
    spec_.activation = cfg.activation;
    spec_.validate();
    const int n = cfg.twin ? 2 : 1;
    for (int k = 0; k < n; ++k) {
      online_.push_back(init_params(spec_, rng));
      target_.push_back(online_.back());
      optim_.emplace_back(online_.back().size(), cfg.adam);
    }
  }

  const NetSpec& spec() const { return spec_; }
  int size() const { return static_cast<int>(online_.size()); }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  double gamma() const { return gamma_; }
  double tau() const { return tau_; }
  void set_gamma(double g) { gamma_ = g; }
  void set_tau(double t) { tau_ = t; }

  NetParams& online(int k) { return online_.at(k); }
  const NetParams& online(int k) const { return online_.at(k); }
  NetParams& target(int k) { return target_.at(k); }
  const NetParams& target(int k) const { return target_.at(k); }
  AdamState& optimizer(int k) { return optim_.at(k); }
  const AdamState& optimizer(int k) const { return optim_.at(k); }

 private:
  NetSpec spec_;
  int obs_dim_ = 0;
  int act_dim_ = 0;
  double gamma_ = 0.99;
  double tau_ = 0.005;
  std::vector<NetParams> online_;
  std::vector<NetParams> target_;
  std::vector<AdamState> optim_;
};

enum class QMode { min_online, min_target, each };

/// Batched Q evaluation. For the min modes the gradient of the minimum flows
/// through the achieving network only; ties go to network 0.
struct QBatch {
  Eigen::VectorXd values;             // min over networks (min modes)
  std::vector<Eigen::VectorXd> each;  // per-network values
  Eigen::VectorXi argmin;
  Eigen::MatrixXd input_grads;        // (obs+act) x N, min modes only, when requested
};

namespace detail {

inline const NetParams& pick(const CriticEnsemble& c, int k, bool target) {
  return target ? c.target(k) : c.online(k);
}

inline Eigen::MatrixXd min_masks(const Eigen::VectorXi& argmin, int nets) {
  Eigen::MatrixXd masks = Eigen::MatrixXd::Zero(nets, argmin.size());
  for (Eigen::Index j = 0; j < argmin.size(); ++j) masks(argmin[j], j) = 1.0;
  return masks;
}

}  // namespace detail

inline QBatch q_value_batch(const CriticEnsemble& c, const Eigen::MatrixXd& inputs, QMode mode,
                            bool want_input_grads = false) {
  if (inputs.rows() != c.spec().input_size()) throw ConfigError("q_value: input dimension mismatch");
  const bool target = mode == QMode::min_target;
  const int n = c.size();
  QBatch out;
  std::vector<ForwardTrace> traces(n);
  for (int k = 0; k < n; ++k)
    out.each.push_back(
        forward_batch(c.spec(), detail::pick(c, k, target), inputs, want_input_grads ? &traces[k] : nullptr)
            .row(0)
            .transpose());
  if (mode == QMode::each) return out;

  const Eigen::Index N = inputs.cols();
  out.values = out.each[0];
  out.argmin = Eigen::VectorXi::Zero(N);
  for (int k = 1; k < n; ++k)
    for (Eigen::Index j = 0; j < N; ++j)
      if (out.each[k][j] < out.values[j]) {
        out.values[j] = out.each[k][j];
        out.argmin[j] = k;
      }
  if (want_input_grads) {
    const Eigen::MatrixXd masks = detail::min_masks(out.argmin, n);
    out.input_grads = Eigen::MatrixXd::Zero(inputs.rows(), N);
    for (int k = 0; k < n; ++k)
      out.input_grads += backward_batch(c.spec(), detail::pick(c, k, target), traces[k], masks.row(k));
  }
  return out;
}

/// Input gradient of min-Q together with its directional derivative along
/// `tangents` (per column). Used when differentiating through Stein updates.
struct QCurvature {
  Eigen::VectorXd values;
  Eigen::MatrixXd input_grads;
  Eigen::MatrixXd input_hvps;
};

inline QCurvature q_min_curvature(const CriticEnsemble& c, const Eigen::MatrixXd& inputs,
                                  const Eigen::MatrixXd& tangents) {
  const int n = c.size();
  std::vector<ForwardTrace> traces(n);
  std::vector<Eigen::VectorXd> each;
  for (int k = 0; k < n; ++k)
    each.push_back(forward_batch(c.spec(), c.online(k), inputs, &traces[k]).row(0).transpose());
  const Eigen::Index N = inputs.cols();
  QCurvature out;
  out.values = each[0];
  Eigen::VectorXi argmin = Eigen::VectorXi::Zero(N);
  for (int k = 1; k < n; ++k)
    for (Eigen::Index j = 0; j < N; ++j)
      if (each[k][j] < out.values[j]) {
        out.values[j] = each[k][j];
        argmin[j] = k;
      }
  const Eigen::MatrixXd masks = detail::min_masks(argmin, n);
  out.input_grads = Eigen::MatrixXd::Zero(inputs.rows(), N);
  out.input_hvps = Eigen::MatrixXd::Zero(inputs.rows(), N);
  for (int k = 0; k < n; ++k) {
    out.input_grads += backward_batch(c.spec(), c.online(k), traces[k], masks.row(k));
    out.input_hvps += input_hvp_batch(c.spec(), c.online(k), traces[k], masks.row(k), tangents);
  }
  return out;
}

inline Eigen::VectorXd critic_input(const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
  Eigen::VectorXd z(x.size() + u.size());
  z << x, u;
  return z;
}

/// Single-sample convenience: min (or per-network) value and, for min modes,
/// the input gradient split into state and action parts.
struct QValue {
  Eigen::VectorXd values;  // one entry (min modes) or one per network
  Eigen::VectorXd grad_state;
  Eigen::VectorXd grad_action;
  int argmin = 0;
};

inline QValue q_value(const CriticEnsemble& c, const Eigen::VectorXd& x, const Eigen::VectorXd& u, QMode mode,
                      bool want_grads = false) {
  if (x.size() != c.obs_dim() || u.size() != c.act_dim()) throw ConfigError("q_value: dimension mismatch");
  QBatch b = q_value_batch(c, critic_input(x, u), mode, want_grads && mode != QMode::each);
  QValue q;
  if (mode == QMode::each) {
    q.values.resize(c.size());
    for (int k = 0; k < c.size(); ++k) q.values[k] = b.each[k][0];
    return q;
  }
  q.values = b.values;
  q.argmin = b.argmin[0];
  if (want_grads) {
    q.grad_state = b.input_grads.col(0).head(c.obs_dim());
    q.grad_action = b.input_grads.col(0).tail(c.act_dim());
  }
  return q;
}

/// Column-major minibatch of transitions.
struct TransitionBatch {
  Eigen::MatrixXd states;
  Eigen::MatrixXd actions;
  Eigen::VectorXd rewards;
  Eigen::MatrixXd next_states;
  Eigen::VectorXd dones;  // 1.0 for terminal transitions

  Eigen::Index size() const { return rewards.size(); }
};

inline TransitionBatch make_batch(const std::vector<Transition>& ts) {
  if (ts.empty()) throw ConfigError("empty transition batch");
  const Eigen::Index B = static_cast<Eigen::Index>(ts.size());
  TransitionBatch b;
  b.states.resize(ts[0].state.size(), B);
  b.actions.resize(ts[0].action.size(), B);
  b.rewards.resize(B);
  b.next_states.resize(ts[0].next_state.size(), B);
  b.dones.resize(B);
  for (Eigen::Index j = 0; j < B; ++j) {
    b.states.col(j) = ts[j].state;
    b.actions.col(j) = ts[j].action;
    b.rewards[j] = ts[j].reward;
    b.next_states.col(j) = ts[j].next_state;
    b.dones[j] = ts[j].done ? 1.0 : 0.0;
  }
  return b;
}

inline Eigen::MatrixXd stack_inputs(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions) {
  Eigen::MatrixXd z(states.rows() + actions.rows(), states.cols());
  z << states, actions;
  return z;
}

struct CriticLossResult {
  double loss = 0.0;
  Eigen::VectorXd targets;
  std::vector<NetParams> grads;  // one per online network
};

/// Soft-Bellman regression:
///   y = r + gamma (1 - done) [min_target Q(s', a') + alpha * H(s')],
///   loss = mean over batch and networks of 0.5 (Q - y)^2.
inline CriticLossResult critic_loss(const CriticEnsemble& c, const TransitionBatch& batch,
                                    const Eigen::VectorXd& next_entropy, const Eigen::MatrixXd& next_actions,
                                    double alpha) {
  const Eigen::Index B = batch.size();
  if (next_entropy.size() != B || next_actions.cols() != B) throw ConfigError("critic_loss: batch size mismatch");
  CriticLossResult out;
  const QBatch next_q = q_value_batch(c, stack_inputs(batch.next_states, next_actions), QMode::min_target);
  out.targets = batch.rewards.array() +
                c.gamma() * (1.0 - batch.dones.array()) * (next_q.values.array() + alpha * next_entropy.array());
  if (!out.targets.allFinite()) throw TrainingError("critic_loss: non-finite bootstrap target");

  const Eigen::MatrixXd inputs = stack_inputs(batch.states, batch.actions);
  const double scale = 1.0 / (static_cast<double>(B) * c.size());
  for (int k = 0; k < c.size(); ++k) {
    ForwardTrace trace;
    const Eigen::VectorXd q = forward_batch(c.spec(), c.online(k), inputs, &trace).row(0).transpose();
    const Eigen::VectorXd err = q - out.targets;
    out.loss += 0.5 * err.squaredNorm() * scale;
    NetParams g(c.spec());
    backward_batch(c.spec(), c.online(k), trace, (err * scale).transpose(), &g);
    out.grads.push_back(std::move(g));
  }
  if (!std::isfinite(out.loss)) throw TrainingError("critic_loss: non-finite loss");
  return out;
}

/// Applies one Adam step per online network from a critic_loss result.
inline void critic_update(CriticEnsemble& c, const CriticLossResult& r) {
  for (int k = 0; k < c.size(); ++k) adam_step(c.online(k), r.grads[k], c.optimizer(k));
}

/// Polyak averaging of the target networks.
inline void target_update(CriticEnsemble& c) {
  const double tau = c.tau();
  for (int k = 0; k < c.size(); ++k)
    c.target(k).flat() = tau * c.online(k).flat() + (1.0 - tau) * c.target(k).flat();
}

}  // namespace qstac
