#pragma once

// Known analytic dynamics x' = f(x, u) with Jacobians, and finite-horizon
// rollouts with reverse-mode accumulation through the rollout chain.
//
// Saturated coordinates (clamped control, speed or position) are treated as
// having zero derivative, matching the executed clamp.

#include <cmath>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "qstac/dual.hpp"
#include "qstac/envs.hpp"
#include "qstac/errors.hpp"

namespace qstac {

struct ModelJacobians {
  Eigen::MatrixXd A;  // d_x x d_x
  Eigen::MatrixXd B;  // d_x x d_u
};

class DynamicsModel {
 public:
  virtual ~DynamicsModel() = default;
  virtual int state_dim() const = 0;
  virtual int control_dim() const = 0;
  virtual Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const = 0;
  virtual ModelJacobians jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const = 0;
  /// Directional derivative of (A, B) along (dx, du).
  virtual ModelJacobians jacobians_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                             const Eigen::VectorXd& dx, const Eigen::VectorXd& du) const = 0;
  virtual std::unique_ptr<DynamicsModel> clone() const = 0;
};

namespace detail {

template <class T>
bool exceeds(T x, double limit) {
  return std::abs(value_of(x)) > limit;
}

template <class T>
T saturate(T x, double limit) {
  if (value_of(x) > limit) return T(limit);
  if (value_of(x) < -limit) return T(-limit);
  return x;
}

// Jacobians of the pendulum transition in (cos, sin, omega) coordinates.
template <class T>
void pendulum_jacobians(const T* x, T u_raw, const PendulumParams& p, T* A /*3x3 row-major*/, T* B /*3*/) {
  using std::atan2, std::cos, std::sin;
  const T c = x[0], s = x[1], w = x[2];
  const T r2 = c * c + s * s;
  const T theta = atan2(s, c);
  const bool sat_u = exceeds(u_raw, p.max_torque);
  const T u = saturate(u_raw, p.max_torque);
  const double a = 3.0 * p.gravity / (2.0 * p.length);
  const double b = 3.0 / (p.mass * p.length * p.length);
  const T w_pre = w + (T(a) * sin(theta) + T(b) * u) * T(p.dt);
  const bool sat_w = exceeds(w_pre, p.max_speed);
  const T wn = saturate(w_pre, p.max_speed);
  const T thn = theta + wn * T(p.dt);

  const T dwn_dtheta = sat_w ? T(0.0) : T(a * p.dt) * cos(theta);
  const T dwn_dw = sat_w ? T(0.0) : T(1.0);
  const T dwn_du = (sat_w || sat_u) ? T(0.0) : T(b * p.dt);
  const T dthn_dtheta = T(1.0) + T(p.dt) * dwn_dtheta;
  const T dtheta_dc = -s / r2;
  const T dtheta_ds = c / r2;

  const T dthn[3] = {dthn_dtheta * dtheta_dc, dthn_dtheta * dtheta_ds, T(p.dt) * dwn_dw};
  const T dwn[3] = {dwn_dtheta * dtheta_dc, dwn_dtheta * dtheta_ds, dwn_dw};
  const T dthn_du = T(p.dt) * dwn_du;
  const T sn = sin(thn), cn = cos(thn);
  for (int j = 0; j < 3; ++j) {
    A[0 * 3 + j] = -sn * dthn[j];
    A[1 * 3 + j] = cn * dthn[j];
    A[2 * 3 + j] = dwn[j];
  }
  B[0] = -sn * dthn_du;
  B[1] = cn * dthn_du;
  B[2] = dwn_du;
}

}  // namespace detail

class PendulumModel final : public DynamicsModel {
 public:
  explicit PendulumModel(PendulumParams p = {}) : p_(p) {}

  int state_dim() const override { return 3; }
  int control_dim() const override { return 1; }

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    return pendulum_step(x, u[0], p_).next_state;
  }

  ModelJacobians jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    double A[9], B[3];
    detail::pendulum_jacobians<double>(x.data(), u[0], p_, A, B);
    ModelJacobians J{Eigen::MatrixXd(3, 3), Eigen::MatrixXd(3, 1)};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) J.A(i, j) = A[i * 3 + j];
      J.B(i, 0) = B[i];
    }
    return J;
  }

  ModelJacobians jacobians_derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u, const Eigen::VectorXd& dx,
                                      const Eigen::VectorXd& du) const override {
    Dual xd[3] = {{x[0], dx[0]}, {x[1], dx[1]}, {x[2], dx[2]}};
    Dual A[9], B[3];
    detail::pendulum_jacobians<Dual>(xd, Dual(u[0], du[0]), p_, A, B);
    ModelJacobians J{Eigen::MatrixXd(3, 3), Eigen::MatrixXd(3, 1)};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) J.A(i, j) = A[i * 3 + j].d;
      J.B(i, 0) = B[i].d;
    }
    return J;
  }

  std::unique_ptr<DynamicsModel> clone() const override { return std::make_unique<PendulumModel>(*this); }
  const PendulumParams& params() const { return p_; }

 private:
  PendulumParams p_;
};

/// Double integrator acting on the navigation observation (x, y, vx, vy, gx, gy);
/// the goal coordinates pass through unchanged.
class Particle2dModel final : public DynamicsModel {
 public:
  Particle2dModel(Particle2dPhysics ph, std::vector<GaussianObstacle> obstacles)
      : ph_(ph), obstacles_(std::move(obstacles)) {}

  int state_dim() const override { return 6; }
  int control_dim() const override { return 2; }

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    Eigen::VectorXd next = x;
    const Eigen::Vector2d goal = x.tail<2>();
    detail::particle2d_advance(next.data(), goal, u.data(), ph_, obstacles_);
    return next;
  }

  ModelJacobians jacobians(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    ModelJacobians J{Eigen::MatrixXd::Zero(6, 6), Eigen::MatrixXd::Zero(6, 2)};
    J.A(4, 4) = 1.0;
    J.A(5, 5) = 1.0;
    for (int k = 0; k < 2; ++k) {
      const bool sat_u = std::abs(u[k]) > ph_.max_force;
      const double uk = std::clamp(u[k], -ph_.max_force, ph_.max_force);
      const double v_pre = x[k + 2] + (uk / ph_.mass) * ph_.dt;
      const bool sat_v = std::abs(v_pre) > ph_.max_speed;
      const double vn = std::clamp(v_pre, -ph_.max_speed, ph_.max_speed);
      const bool sat_p = std::abs(x[k] + vn * ph_.dt) > ph_.max_position;

      const double dv_dv = sat_v ? 0.0 : 1.0;
      const double dv_du = (sat_v || sat_u) ? 0.0 : ph_.dt / ph_.mass;
      J.A(k + 2, k + 2) = dv_dv;
      J.B(k + 2, k) = dv_du;
      if (!sat_p) {
        J.A(k, k) = 1.0;
        J.A(k, k + 2) = ph_.dt * dv_dv;
        J.B(k, k) = ph_.dt * dv_du;
      }
    }
    return J;
  }

  // Piecewise linear: the Jacobians are locally constant.
  ModelJacobians jacobians_derivative(const Eigen::VectorXd&, const Eigen::VectorXd&, const Eigen::VectorXd&,
                                      const Eigen::VectorXd&) const override {
    return {Eigen::MatrixXd::Zero(6, 6), Eigen::MatrixXd::Zero(6, 2)};
  }

  std::unique_ptr<DynamicsModel> clone() const override { return std::make_unique<Particle2dModel>(*this); }

 private:
  Particle2dPhysics ph_;
  std::vector<GaussianObstacle> obstacles_;
};

/// Model that reproduces `env` exactly.
inline std::unique_ptr<DynamicsModel> make_model(const Environment& env) {
  if (const auto* p = dynamic_cast<const PendulumEnv*>(&env)) return std::make_unique<PendulumModel>(p->params());
  if (const auto* q = dynamic_cast<const Particle2dEnv*>(&env)) {
    std::vector<GaussianObstacle> obs(q->obstacles().begin(), q->obstacles().end());
    return std::make_unique<Particle2dModel>(q->physics(), std::move(obs));
  }
  throw ConfigError("no dynamics model for this environment");
}

/// States X (d_x x (H+1)) and controls U (d_u x H) with X[:, h+1] = f(X[:, h], U[:, h]).
struct Trajectory {
  Eigen::MatrixXd states;
  Eigen::MatrixXd controls;

  int horizon() const { return static_cast<int>(controls.cols()); }
};

inline Trajectory rollout(const DynamicsModel& f, const Eigen::VectorXd& x0, const Eigen::MatrixXd& controls) {
  if (x0.size() != f.state_dim()) throw ConfigError("rollout: initial state dimension mismatch");
  if (controls.cols() > 0 && controls.rows() != f.control_dim())
    throw ConfigError("rollout: control dimension mismatch");
  const int H = static_cast<int>(controls.cols());
  Trajectory tr;
  tr.controls = controls;
  tr.states.resize(f.state_dim(), H + 1);
  tr.states.col(0) = x0;
  for (int h = 0; h < H; ++h) {
    Eigen::VectorXd next;
    try {
      next = f.step(tr.states.col(h), controls.col(h));
    } catch (const DomainError& e) {
      throw RolloutError(std::string("rollout: ") + e.what() + " at step " + std::to_string(h), h);
    }
    if (!next.allFinite()) throw RolloutError("rollout: non-finite state at step " + std::to_string(h + 1), h + 1);
    tr.states.col(h + 1) = next;
  }
  return tr;
}

/// Gradient w.r.t. the controls of
///   sum_h <state_grads[:, h], X[:, h]> + <control_grads[:, h], U[:, h]>.
/// `state_grads` may have H or H + 1 columns; the initial state is fixed.
inline Eigen::MatrixXd rollout_grad(const DynamicsModel& f, const Trajectory& tr, const Eigen::MatrixXd& state_grads,
                                    const Eigen::MatrixXd& control_grads) {
  const int H = tr.horizon();
  if (control_grads.rows() != f.control_dim() || control_grads.cols() != H)
    throw ConfigError("rollout_grad: control gradient shape mismatch");
  if (state_grads.rows() != f.state_dim() || (state_grads.cols() != H && state_grads.cols() != H + 1))
    throw ConfigError("rollout_grad: state gradient shape mismatch");
  Eigen::MatrixXd out(f.control_dim(), H);
  Eigen::VectorXd adj = Eigen::VectorXd::Zero(f.state_dim());
  if (state_grads.cols() == H + 1) adj = state_grads.col(H);
  for (int h = H - 1; h >= 0; --h) {
    const ModelJacobians J = f.jacobians(tr.states.col(h), tr.controls.col(h));
    out.col(h) = control_grads.col(h) + J.B.transpose() * adj;
    adj = state_grads.col(h) + J.A.transpose() * adj;
  }
  return out;
}

/// Forward tangent of the rollout states along a control perturbation V.
inline Eigen::MatrixXd rollout_tangent(const DynamicsModel& f, const Trajectory& tr, const Eigen::MatrixXd& V) {
  const int H = tr.horizon();
  Eigen::MatrixXd dX = Eigen::MatrixXd::Zero(f.state_dim(), H + 1);
  for (int h = 0; h < H; ++h) {
    const ModelJacobians J = f.jacobians(tr.states.col(h), tr.controls.col(h));
    dX.col(h + 1) = J.A * dX.col(h) + J.B * V.col(h);
  }
  return dX;
}

/// Directional derivative (along V, with state tangent dX from rollout_tangent)
/// of rollout_grad, given the directional derivatives of the supplied gradients.
inline Eigen::MatrixXd rollout_grad_tangent(const DynamicsModel& f, const Trajectory& tr, const Eigen::MatrixXd& V,
                                            const Eigen::MatrixXd& dX, const Eigen::MatrixXd& state_grads,
                                            const Eigen::MatrixXd& state_grads_dot,
                                            const Eigen::MatrixXd& control_grads_dot) {
  const int H = tr.horizon();
  Eigen::MatrixXd out(f.control_dim(), H);
  Eigen::VectorXd adj = Eigen::VectorXd::Zero(f.state_dim());
  Eigen::VectorXd adj_dot = Eigen::VectorXd::Zero(f.state_dim());
  if (state_grads.cols() == H + 1) {
    adj = state_grads.col(H);
    adj_dot = state_grads_dot.col(H);
  }
  for (int h = H - 1; h >= 0; --h) {
    const Eigen::VectorXd x = tr.states.col(h);
    const Eigen::VectorXd u = tr.controls.col(h);
    const ModelJacobians J = f.jacobians(x, u);
    const ModelJacobians dJ = f.jacobians_derivative(x, u, dX.col(h), V.col(h));
    out.col(h) = control_grads_dot.col(h) + dJ.B.transpose() * adj + J.B.transpose() * adj_dot;
    Eigen::VectorXd next_adj = state_grads.col(h) + J.A.transpose() * adj;
    adj_dot = state_grads_dot.col(h) + dJ.A.transpose() * adj + J.A.transpose() * adj_dot;
    adj = std::move(next_adj);
  }
  return out;
}

}  // namespace qstac
