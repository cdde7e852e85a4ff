#pragma once

// Two-state, two-action deterministic MDP: action a moves to state a.
// The evaluated policy is uniform, so its entropy is ln 2 in every state.

#include <array>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "qstac/critic.hpp"

namespace qstac::testing {

struct ToyMdp {
  std::array<std::array<double, 2>, 2> reward = {{{1.0, 0.0}, {-1.0, 2.0}}};
  double gamma = 0.9;
  double alpha = 0.5;
  double entropy = std::numbers::ln2;
};

/// Soft policy evaluation by value iteration:
///   Q(s, a) = r(s, a) + gamma * (mean_a' Q(a, a') + alpha * H).
inline std::array<std::array<double, 2>, 2> soft_value_iteration(const ToyMdp& mdp, int iterations = 2000) {
  std::array<std::array<double, 2>, 2> q{};
  for (int it = 0; it < iterations; ++it) {
    auto next = q;
    for (int s = 0; s < 2; ++s)
      for (int a = 0; a < 2; ++a)
        next[s][a] = mdp.reward[s][a] + mdp.gamma * (0.5 * (q[a][0] + q[a][1]) + mdp.alpha * mdp.entropy);
    q = next;
  }
  return q;
}

inline Eigen::VectorXd toy_state(int s) { return s == 0 ? Eigen::Vector2d(1, 0) : Eigen::Vector2d(0, 1); }
inline Eigen::VectorXd toy_action(int a) { return Eigen::VectorXd::Constant(1, a == 0 ? -1.0 : 1.0); }

/// Every (s, a) pair once per next action: the regression target averages the
/// two bootstrap values, i.e. the expectation under the uniform policy.
inline TransitionBatch toy_full_batch(const ToyMdp& mdp, Eigen::VectorXd& next_entropy, Eigen::MatrixXd& next_actions) {
  std::vector<Transition> ts;
  std::vector<int> next_a;
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a)
      for (int an = 0; an < 2; ++an) {
        ts.push_back({toy_state(s), toy_action(a), mdp.reward[s][a], toy_state(a), false, false});
        next_a.push_back(an);
      }
  next_entropy = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(ts.size()), mdp.entropy);
  next_actions.resize(1, static_cast<Eigen::Index>(ts.size()));
  for (std::size_t j = 0; j < ts.size(); ++j) next_actions(0, static_cast<Eigen::Index>(j)) = toy_action(next_a[j])[0];
  return make_batch(ts);
}

/// Trains a twin critic on the toy MDP and returns the largest |Q - Q*| over the
/// four pairs and both online networks.
inline double train_toy_critic(const ToyMdp& mdp, int iterations, std::uint64_t seed) {
  CriticConfig cfg;
  cfg.hidden = {16, 16};
  cfg.activation = Activation::tanh;
  cfg.gamma = mdp.gamma;
  cfg.tau = 0.05;
  cfg.adam.lr = 3e-3;
  Rng rng(seed);
  CriticEnsemble critic(2, 1, cfg, rng);
  Eigen::VectorXd next_entropy;
  Eigen::MatrixXd next_actions;
  const TransitionBatch batch = toy_full_batch(mdp, next_entropy, next_actions);
  for (int it = 0; it < iterations; ++it) {
    if (it == iterations / 2) {
      for (int k = 0; k < critic.size(); ++k) critic.optimizer(k).config.lr = 3e-4;
    }
    critic_update(critic, critic_loss(critic, batch, next_entropy, next_actions, mdp.alpha));
    target_update(critic);
  }
  const auto qstar = soft_value_iteration(mdp);
  double worst = 0.0;
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a) {
      const QValue q = q_value(critic, toy_state(s), toy_action(a), QMode::each);
      for (int k = 0; k < q.values.size(); ++k) worst = std::max(worst, std::abs(q.values[k] - qstar[s][a]));
    }
  return worst;
}

}  // namespace qstac::testing
