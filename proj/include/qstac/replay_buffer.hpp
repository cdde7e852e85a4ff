#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "qstac/critic.hpp"
#include "qstac/envs.hpp"
#include "qstac/errors.hpp"
#include "qstac/random.hpp"

namespace qstac {

/// Fixed-capacity FIFO of transitions with uniform sampling with replacement.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
    data_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t inserted() const { return inserted_; }

  void store(Transition t) {
    if (!std::isfinite(t.reward)) throw TrainingError("replay buffer: non-finite reward");
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
    ++inserted_;
  }

  /// i-th record in insertion order among those still held (0 = oldest).
  const Transition& at(std::size_t i) const {
    if (i >= data_.size()) throw ConfigError("replay buffer index out of range");
    return data_[(head_ + i) % data_.size()];
  }

  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
    if (data_.empty()) throw TrainingError("cannot sample from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    return idx;
  }

  TransitionBatch sample(std::size_t n, Rng& rng) const {
    if (n == 0) throw ConfigError("batch size must be positive");
    std::vector<Transition> picked;
    picked.reserve(n);
    for (std::size_t i : sample_indices(n, rng)) picked.push_back(data_[i]);
    return make_batch(picked);
  }

 private:
  std::size_t capacity_;
  std::vector<Transition> data_;
  std::size_t head_ = 0;  // oldest record once full
  std::size_t inserted_ = 0;
};

inline void buffer_store(ReplayBuffer& b, Transition t) { b.store(std::move(t)); }
inline TransitionBatch buffer_sample(const ReplayBuffer& b, std::size_t n, Rng& rng) { return b.sample(n, rng); }

}  // namespace qstac
