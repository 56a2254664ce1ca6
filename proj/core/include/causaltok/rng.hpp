#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "causaltok/tensor.hpp"

namespace causaltok {

/// Seeded random stream. Normal draws use Box-Muller on top of
/// mt19937_64 so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  double uniform();  // [0, 1)
  double normal();
  int uniform_int(int lo, int hi);  // inclusive bounds
  bool bernoulli(double p) { return uniform() < p; }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);

  /// Derive an independent stream (used to give each subsystem its own seed).
  Rng fork();

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace causaltok
