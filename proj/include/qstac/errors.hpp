#pragma once

#include <stdexcept>
#include <string>

namespace qstac {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatches, invalid hyperparameters, unknown config keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise invalid numeric input to a pure function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite gradients, losses or targets during optimisation.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Non-finite state produced while rolling out a control sequence.
class RolloutError : public Error {
 public:
  RolloutError(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Non-finite particle during Stein refinement.
class InferenceError : public Error {
 public:
  InferenceError(const std::string& what, int svgd_step, int particle)
      : Error(what), svgd_step_(svgd_step), particle_(particle) {}
  int svgd_step() const noexcept { return svgd_step_; }
  int particle() const noexcept { return particle_; }

 private:
  int svgd_step_;
  int particle_;
};

/// Malformed files: checkpoints, CSV curves, config documents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace qstac
