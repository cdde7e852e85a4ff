#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "qstac/sac.hpp"

using namespace qstac;
using qstac::testing::central_diff;
using qstac::testing::relative_error;

namespace {

SquashedGaussianPolicy make_policy(int obs, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, std::uint64_t seed,
                                   Activation a = Activation::tanh) {
  SacPolicyConfig c;
  c.hidden = {10, 10};
  c.activation = a;
  Rng rng(seed);
  return SquashedGaussianPolicy(obs, lo, hi, c, rng);
}

}  // namespace

TEST(LogTanhJacobian, MatchesDirectFormula) {
  EXPECT_NEAR(log_tanh_jacobian(0.0), 0.0, 1e-15);
  for (double y = -6.0; y <= 6.0; y += 0.25) {
    const double t = std::tanh(y);
    EXPECT_NEAR(log_tanh_jacobian(y), std::log(1.0 - t * t), 1e-9);
  }
  EXPECT_TRUE(std::isfinite(log_tanh_jacobian(400.0)));
  EXPECT_NEAR(log_tanh_jacobian(400.0), 2.0 * (std::numbers::ln2 - 400.0), 1e-9);
}

TEST(SacSample, SaturatedActionsStayInsideBounds) {
  const Eigen::Vector2d lo(-10, -1), hi(10, 3);
  SquashedGaussianPolicy pi = make_policy(3, lo, hi, 1);
  pi.params().flat() *= 50.0;  // drive tanh into saturation
  Rng rng(2);
  const SquashedSample s = sac_sample(pi, Eigen::MatrixXd::Random(3, 500) * 5.0, &rng);
  for (Eigen::Index b = 0; b < 500; ++b) {
    EXPECT_TRUE((s.actions.col(b).array() >= lo.array()).all());
    EXPECT_TRUE((s.actions.col(b).array() <= hi.array()).all());
  }
}

TEST(SacSample, DeterministicModeIsSquashedMean) {
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(1, -2.0), hi = Eigen::VectorXd::Constant(1, 2.0);
  const SquashedGaussianPolicy pi = make_policy(2, lo, hi, 3);
  const SquashedSample s = sac_sample(pi, Eigen::MatrixXd::Random(2, 4), nullptr);
  for (Eigen::Index b = 0; b < 4; ++b) EXPECT_NEAR(s.actions(0, b), 2.0 * std::tanh(s.mean(0, b)), 1e-15);
}

// Oracle: change of variables for a = c + k tanh(y), y ~ N(mu, sigma^2).
TEST(SacSample, LogProbIsChangeOfVariables) {
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(1, -1.0), hi = Eigen::VectorXd::Constant(1, 3.0);
  const SquashedGaussianPolicy pi = make_policy(2, lo, hi, 4);
  Rng rng(5);
  const SquashedSample s = sac_sample(pi, Eigen::MatrixXd::Random(2, 20), &rng);
  for (Eigen::Index b = 0; b < 20; ++b) {
    const double mu = s.mean(0, b), sd = s.stddev(0, b), y = s.pre_squash(0, b);
    const double normal = -0.5 * std::pow((y - mu) / sd, 2) - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi);
    const double t = std::tanh(y);
    EXPECT_NEAR(s.log_prob[b], normal - std::log(2.0 * (1.0 - t * t)), 1e-10);
  }
}

// Oracle: the squashed density integrates to one over the action interval.
TEST(SacSample, DensityIntegratesToOne) {
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(1, -1.0), hi = Eigen::VectorXd::Constant(1, 1.0);
  const double mu = 0.4, sd = 0.7;
  const int n = 200000;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = -1.0 + (i + 0.5) * 2.0 / n;
    const double y = std::atanh(a);
    const double logp = -0.5 * std::pow((y - mu) / sd, 2) - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi) -
                        log_tanh_jacobian(y);
    total += std::exp(logp) * 2.0 / n;
  }
  EXPECT_NEAR(total, 1.0, 1e-4);
}

TEST(SacActorLoss, GradientMatchesFiniteDifferences) {
  const Eigen::Vector2d lo(-2, -1), hi(2, 1);
  const SquashedGaussianPolicy pi = make_policy(3, lo, hi, 6);
  CriticConfig cc;
  cc.hidden = {8};
  cc.activation = Activation::tanh;
  Rng crng(7);
  const CriticEnsemble critic(3, 2, cc, crng);
  const Eigen::MatrixXd states = Eigen::MatrixXd::Random(3, 6);
  const Rng base(8);
  Rng r0 = base;
  const SacActorLoss l = sac_actor_loss(pi, critic, states, 0.3, r0);
  const Eigen::VectorXd fd = central_diff(
      [&](const Eigen::VectorXd& flat) {
        SquashedGaussianPolicy p = pi;
        p.params().flat() = flat;
        Rng r = base;
        return sac_actor_loss(p, critic, states, 0.3, r).loss;
      },
      pi.params().flat());
  EXPECT_LT(relative_error(l.grads.flat(), fd), 1e-5);
}

TEST(SacPolicy, RejectsEmptyOrInvertedBounds) {
  SacPolicyConfig c;
  Rng rng(9);
  EXPECT_THROW(SquashedGaussianPolicy(2, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1), c, rng), ConfigError);
  EXPECT_THROW(SquashedGaussianPolicy(2, Eigen::VectorXd(), Eigen::VectorXd(), c, rng), ConfigError);
}
