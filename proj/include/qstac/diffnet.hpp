#pragma once

// Minimal differentiable multilayer perceptron: batched forward evaluation,
// reverse-mode parameter/input gradients, input Hessian-vector products and
// an Adam optimiser over the flat parameter vector.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

struct NetSpec {
  std::vector<int> layer_sizes;
  Activation activation = Activation::relu;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  /// Number of affine layers.
  int depth() const { return static_cast<int>(layer_sizes.size()) - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < depth(); ++l)
      n += static_cast<std::size_t>(layer_sizes[l + 1]) * (layer_sizes[l] + 1);
    return n;
  }

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("network needs at least an input and an output layer");
    for (int s : layer_sizes)
      if (s < 1) throw ConfigError("network layer sizes must be >= 1");
  }
};

/// Weights and biases stored contiguously; layer l holds W_l (out x in,
/// column-major) followed by b_l.
class NetParams {
 public:
  NetParams() = default;

  explicit NetParams(const NetSpec& spec) : sizes_(spec.layer_sizes) {
    spec.validate();
    std::size_t offset = 0;
    for (int l = 0; l < spec.depth(); ++l) {
      offsets_.push_back(offset);
      offset += static_cast<std::size_t>(sizes_[l + 1]) * (sizes_[l] + 1);
    }
    flat_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
  }

  int depth() const { return static_cast<int>(sizes_.size()) - 1; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  Eigen::Index size() const { return flat_.size(); }

  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }

  Eigen::Map<Eigen::MatrixXd> weight(int l) {
    return {flat_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
    return {flat_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int l) {
    return {flat_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const {
    return {flat_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]};
  }

  bool matches(const NetSpec& spec) const { return sizes_ == spec.layer_sizes; }

  void set_zero() { flat_.setZero(); }

 private:
  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  Eigen::VectorXd flat_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline NetParams init_params(const NetSpec& spec, Rng& rng) {
  NetParams p(spec);
  for (int l = 0; l < spec.depth(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.layer_sizes[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    auto w = p.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    auto b = p.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = u(rng);
  }
  return p;
}

/// Per-layer activations of a batched forward pass (column = sample);
/// activations[0] is the input, activations.back() the output.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> activations;
};

namespace detail {

inline void check_params(const NetSpec& spec, const NetParams& params) {
  if (!params.matches(spec)) throw ConfigError("network parameters do not match the network spec");
}

// Derivative of the hidden activation expressed through its output a.
inline Eigen::ArrayXXd activation_slope(Activation act, const Eigen::MatrixXd& a) {
  if (act == Activation::relu) return (a.array() > 0.0).cast<double>();
  return 1.0 - a.array().square();
}

}  // namespace detail

inline Eigen::MatrixXd forward_batch(const NetSpec& spec, const NetParams& params, const Eigen::MatrixXd& inputs,
                                     ForwardTrace* trace = nullptr) {
  detail::check_params(spec, params);
  if (inputs.rows() != spec.input_size())
    throw ConfigError("network input has " + std::to_string(inputs.rows()) + " rows, expected " +
                      std::to_string(spec.input_size()));
  if (trace) {
    trace->activations.clear();
    trace->activations.reserve(spec.depth() + 1);
    trace->activations.push_back(inputs);
  }
  Eigen::MatrixXd a = inputs;
  for (int l = 0; l < spec.depth(); ++l) {
    Eigen::MatrixXd z = params.weight(l) * a;
    z.colwise() += params.bias(l);
    if (l + 1 < spec.depth()) {
      if (spec.activation == Activation::relu)
        z = z.cwiseMax(0.0);
      else
        z = z.array().tanh().matrix();
    }
    a = std::move(z);
    if (trace) trace->activations.push_back(a);
  }
  return a;
}

inline Eigen::VectorXd net_forward(const NetSpec& spec, const NetParams& params, const Eigen::VectorXd& input) {
  return forward_batch(spec, params, input);
}

/// Reverse pass for a traced batch. Returns input gradients (one column per
/// sample) of <upstream, output>; parameter gradients summed over the batch
/// are accumulated into `param_grads` when given.
inline Eigen::MatrixXd backward_batch(const NetSpec& spec, const NetParams& params, const ForwardTrace& trace,
                                      const Eigen::MatrixXd& upstream, NetParams* param_grads = nullptr) {
  const auto& acts = trace.activations;
  if (static_cast<int>(acts.size()) != spec.depth() + 1) throw ConfigError("forward trace does not match network");
  if (upstream.rows() != spec.output_size() || upstream.cols() != acts.back().cols())
    throw ConfigError("upstream gradient shape does not match network output");
  if (param_grads && !param_grads->matches(spec)) throw ConfigError("gradient buffer does not match network");

  Eigen::MatrixXd delta = upstream;
  for (int l = spec.depth() - 1; l >= 0; --l) {
    if (param_grads) {
      param_grads->weight(l).noalias() += delta * acts[l].transpose();
      param_grads->bias(l) += delta.rowwise().sum();
    }
    Eigen::MatrixXd g = params.weight(l).transpose() * delta;
    if (l > 0) {
      if (spec.activation == Activation::relu)
        g = (acts[l].array() > 0.0).select(g, 0.0);
      else
        g.array() *= 1.0 - acts[l].array().square();
    }
    delta = std::move(g);
  }
  return delta;
}

struct BackwardResult {
  NetParams param_grads;
  Eigen::VectorXd input_grad;
};

inline BackwardResult net_backward(const NetSpec& spec, const NetParams& params, const Eigen::VectorXd& input,
                                   const Eigen::VectorXd& upstream) {
  ForwardTrace trace;
  forward_batch(spec, params, input, &trace);
  if (upstream.size() != spec.output_size()) throw ConfigError("upstream gradient length does not match output");
  BackwardResult r{NetParams(spec), {}};
  r.input_grad = backward_batch(spec, params, trace, upstream, &r.param_grads);
  return r;
}

/// Directional derivative of the input gradient of <upstream, output> along
/// `tangents` (one column per sample), i.e. a Hessian-vector product per sample.
/// `upstream` is treated as constant.
inline Eigen::MatrixXd input_hvp_batch(const NetSpec& spec, const NetParams& params, const ForwardTrace& trace,
                                       const Eigen::MatrixXd& upstream, const Eigen::MatrixXd& tangents) {
  const auto& acts = trace.activations;
  const int depth = spec.depth();
  if (tangents.rows() != spec.input_size() || tangents.cols() != acts.front().cols())
    throw ConfigError("tangent shape does not match network input");
  // piecewise-linear network: the input Hessian vanishes almost everywhere
  if (spec.activation == Activation::relu) return Eigen::MatrixXd::Zero(spec.input_size(), tangents.cols());

  // forward tangents of pre-activations
  std::vector<Eigen::MatrixXd> zdot(depth);
  Eigen::MatrixXd adot = tangents;
  for (int l = 0; l < depth; ++l) {
    zdot[l] = params.weight(l) * adot;
    if (l + 1 < depth)
      adot = (detail::activation_slope(spec.activation, acts[l + 1]) * zdot[l].array()).matrix();
  }

  Eigen::MatrixXd g = upstream;
  Eigen::MatrixXd gdot = Eigen::MatrixXd::Zero(upstream.rows(), upstream.cols());
  for (int l = depth - 1; l >= 0; --l) {
    Eigen::MatrixXd back = params.weight(l).transpose() * g;
    Eigen::MatrixXd backdot = params.weight(l).transpose() * gdot;
    if (l > 0) {
      const Eigen::MatrixXd& a = acts[l];
      Eigen::ArrayXXd slope = detail::activation_slope(spec.activation, a);
      Eigen::ArrayXXd curvature;
      if (spec.activation == Activation::tanh)
        curvature = -2.0 * a.array() * slope;
      else
        curvature = Eigen::ArrayXXd::Zero(a.rows(), a.cols());
      backdot = (backdot.array() * slope + back.array() * curvature * zdot[l - 1].array()).matrix();
      back = (back.array() * slope).matrix();
    }
    g = std::move(back);
    gdot = std::move(backdot);
  }
  return gdot;
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  AdamState() = default;
  AdamState(Eigen::Index n, AdamConfig cfg)
      : config(cfg), m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

/// Bias-corrected Adam on a flat parameter vector.
inline void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
                      AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ConfigError("adam: gradient/parameter/state sizes disagree");
  if (!grads.allFinite()) throw TrainingError("adam: non-finite gradient");
  const AdamConfig& c = state.config;
  ++state.step;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  params.array() -= c.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.eps);
}

inline void adam_step(NetParams& params, const NetParams& grads, AdamState& state) {
  adam_step(params.flat(), grads.flat(), state);
}

}  // namespace qstac
