#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace qstac {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named rng streams derived from one master seed.
enum class Stream : std::uint64_t { env = 1, policy = 2, init = 3, batch = 4, eval = 5, warmup = 6 };

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream) {
  return mix_seed(mix_seed(master) ^ (static_cast<std::uint64_t>(stream) * 0xd1342543de82ef95ULL));
}

inline Rng make_rng(std::uint64_t master, Stream stream) { return Rng(derive_seed(master, stream)); }

inline Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
  return z;
}

inline double uniform(double lo, double hi, Rng& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace qstac
