#pragma once

// Constrained Stein variational gradient descent over flat particles.
//
// Particles are the columns of a D x m matrix. The target log-density is
// augmented with bound constraints g(U) = clamp(U, lower, upper) - U through
//   L(U, lambda) = log p(U) - lambda^T g(U) - c/2 ||g(U)||^2,
// and particles ascend L along the kernelised Stein direction.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

struct KernelValue {
  double k = 0.0;
  Eigen::VectorXd grad_a;  // gradient of k with respect to its first argument
};

/// k(a, b) = exp(-||a - b||^2 / h).
inline KernelValue rbf_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double h) {
  if (!(h > 0.0)) throw ConfigError("rbf_kernel: bandwidth must be positive");
  const Eigen::VectorXd d = a - b;
  KernelValue kv;
  kv.k = std::exp(-d.squaredNorm() / h);
  kv.grad_a = (-2.0 / h) * kv.k * d;
  return kv;
}

inline Eigen::MatrixXd pairwise_sq_distances(const Eigen::MatrixXd& particles) {
  const Eigen::VectorXd sq = particles.colwise().squaredNorm().transpose();
  Eigen::MatrixXd d2 = (-2.0 * particles.transpose() * particles).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return d2.cwiseMax(0.0);
}

/// Median heuristic h = med^2 / (2 ln(m + 1)); returns 1 when all particles coincide.
inline double median_bandwidth(const Eigen::MatrixXd& particles) {
  const Eigen::Index m = particles.cols();
  if (m < 1) throw ConfigError("median_bandwidth: empty particle set");
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i + 1; j < m; ++j) dist.push_back((particles.col(i) - particles.col(j)).norm());
  if (dist.empty()) return 1.0;
  const std::size_t n = dist.size();
  std::sort(dist.begin(), dist.end());
  const double med = (n % 2 == 1) ? dist[n / 2] : 0.5 * (dist[n / 2 - 1] + dist[n / 2]);
  if (med <= 0.0) return 1.0;
  return med * med / (2.0 * std::log(static_cast<double>(m) + 1.0));
}

/// g = clamp(U, lower, upper) - U: zero inside, negative above, positive below.
inline Eigen::VectorXd constraint_g(const Eigen::VectorXd& U, const Eigen::VectorXd& lower,
                                   const Eigen::VectorXd& upper) {
  return U.cwiseMax(lower).cwiseMin(upper) - U;
}

/// Gradient of the augmented Lagrangian with respect to U. Inside the bounds g
/// is locally zero; on a violated coordinate dg/dU = -1, so the gradient there
/// is logp_grad + lambda + c g.
inline Eigen::VectorXd lagrangian_grad(const Eigen::VectorXd& logp_grad, const Eigen::VectorXd& U,
                                       const Eigen::VectorXd& lambda, double c, const Eigen::VectorXd& lower,
                                       const Eigen::VectorXd& upper) {
  const Eigen::VectorXd g = constraint_g(U, lower, upper);
  Eigen::VectorXd out = logp_grad;
  for (Eigen::Index d = 0; d < U.size(); ++d)
    if (U[d] > upper[d] || U[d] < lower[d]) out[d] += lambda[d] + c * g[d];
  return out;
}

/// lambda' = clamp(lambda + eta * dL/dlambda, -lambda_max, lambda_max) with dL/dlambda = -g.
inline Eigen::VectorXd lambda_update(const Eigen::VectorXd& lambda, const Eigen::VectorXd& g, double eta,
                                     double lambda_max = 100.0) {
  return (lambda - eta * g).cwiseMax(-lambda_max).cwiseMin(lambda_max);
}

/// phi(U_i) = 1/m sum_j [k(U_j, U_i) grad_j + grad_{U_j} k(U_j, U_i)].
inline Eigen::MatrixXd stein_direction(const Eigen::MatrixXd& particles, const Eigen::MatrixXd& grads, double h) {
  const Eigen::Index m = particles.cols();
  if (grads.rows() != particles.rows() || grads.cols() != m)
    throw ConfigError("stein_direction: gradient shape mismatch");
  if (!(h > 0.0)) throw ConfigError("stein_direction: bandwidth must be positive");
  for (Eigen::Index j = 0; j < m; ++j)
    if (!grads.col(j).allFinite()) throw InferenceError("stein_direction: non-finite gradient", -1, static_cast<int>(j));

  const Eigen::MatrixXd K = (-pairwise_sq_distances(particles) / h).array().exp().matrix();  // symmetric
  // sum_j K_ji grad_j  and  sum_j -(2/h)(U_j - U_i) K_ji
  Eigen::MatrixXd phi = grads * K;
  const Eigen::RowVectorXd ksum = K.colwise().sum();
  phi += (-2.0 / h) * (particles * K - particles * ksum.asDiagonal());
  return phi / static_cast<double>(m);
}

/// Stein field evaluated at an arbitrary point with the particle measure held fixed.
inline Eigen::VectorXd stein_field(const Eigen::MatrixXd& particles, const Eigen::MatrixXd& grads, double h,
                                   const Eigen::VectorXd& point) {
  const Eigen::Index m = particles.cols();
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(point.size());
  for (Eigen::Index j = 0; j < m; ++j) {
    const KernelValue kv = rbf_kernel(particles.col(j), point, h);
    phi += kv.k * grads.col(j) + kv.grad_a;
  }
  return phi / static_cast<double>(m);
}

inline Eigen::MatrixXd svgd_step(const Eigen::MatrixXd& particles, const Eigen::MatrixXd& directions,
                                 double step_size) {
  if (!(step_size >= 0.0) || !std::isfinite(step_size)) throw ConfigError("svgd_step: step size must be finite and >= 0");
  return particles + step_size * directions;
}

/// Exact trace of the Jacobian of the Stein field at each particle, with the
/// particle measure held fixed:
///   tr = 1/m sum_j k_ji [ (2/h) (U_j - U_i).grad_j + 2D/h - (4/h^2) ||U_j - U_i||^2 ].
inline Eigen::VectorXd stein_trace_exact(const Eigen::MatrixXd& particles, const Eigen::MatrixXd& grads, double h) {
  const Eigen::Index m = particles.cols();
  const double D = static_cast<double>(particles.rows());
  const Eigen::MatrixXd d2 = pairwise_sq_distances(particles);
  const Eigen::MatrixXd K = (-d2 / h).array().exp().matrix();
  // (U_j - U_i).grad_j = U_j.grad_j - U_i.grad_j
  const Eigen::VectorXd self = (particles.array() * grads.array()).colwise().sum().transpose();
  const Eigen::MatrixXd cross = particles.transpose() * grads;  // (i, j) = U_i . grad_j
  Eigen::VectorXd tr(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m; ++j)
      acc += K(j, i) * ((2.0 / h) * (self[j] - cross(i, j)) + 2.0 * D / h - (4.0 / (h * h)) * d2(j, i));
    tr[i] = acc / static_cast<double>(m);
  }
  return tr;
}

struct TraceEstimate {
  Eigen::VectorXd trace;           // per particle
  Eigen::VectorXd standard_error;  // per particle
};

/// Hutchinson estimate with Rademacher probes of the same trace.
inline TraceEstimate stein_trace_hutchinson(const Eigen::MatrixXd& particles, const Eigen::MatrixXd& grads, double h,
                                            int probes, Rng& rng) {
  const Eigen::Index m = particles.cols();
  const Eigen::Index D = particles.rows();
  const Eigen::MatrixXd d2 = pairwise_sq_distances(particles);
  const Eigen::MatrixXd K = (-d2 / h).array().exp().matrix();
  std::bernoulli_distribution coin(0.5);
  Eigen::MatrixXd samples(probes, m);
  for (int p = 0; p < probes; ++p) {
    Eigen::VectorXd v(D);
    for (Eigen::Index d = 0; d < D; ++d) v[d] = coin(rng) ? 1.0 : -1.0;
    const Eigen::VectorXd Uv = particles.transpose() * v;  // U_j . v
    const Eigen::VectorXd Gv = grads.transpose() * v;      // grad_j . v
    const double vv = v.squaredNorm();
    for (Eigen::Index i = 0; i < m; ++i) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double dv = Uv[j] - Uv[i];
        acc += K(j, i) * ((2.0 / h) * dv * Gv[j] + (2.0 / h) * vv - (4.0 / (h * h)) * dv * dv);
      }
      samples(p, i) = acc / static_cast<double>(m);
    }
  }
  TraceEstimate est;
  est.trace = samples.colwise().mean().transpose();
  est.standard_error.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double var = probes > 1 ? (samples.col(i).array() - est.trace[i]).square().sum() / (probes - 1) : 0.0;
    est.standard_error[i] = std::sqrt(var / probes);
  }
  return est;
}

}  // namespace qstac
