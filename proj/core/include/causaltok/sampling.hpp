#pragma once

// Inference: one-step mean-velocity sampling, multi-step instantaneous Euler
// sampling with classifier-free guidance, and subpath reconstruction.

#include <cstdint>

#include "causaltok/nets.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

/// Number of decoder evaluations per branch.
struct QueryCounter {
  std::int64_t cond = 0;
  std::int64_t uncond = 0;
};

/// eps - u(eps, 0, 1 | all tokens). Guidance is never applied here.
Matrix one_step(const VelocityModel& model, const Matrix& tokens, const Matrix& eps,
                QueryCounter* counter = nullptr);

/// Euler integration from t = 1 to 0 on a uniform grid, querying the
/// instantaneous velocity v(z, t_i, t_i | all tokens). The null branch is
/// only evaluated when cfg_scale != 1.
Matrix multi_step(const VelocityModel& model, const Matrix& tokens, const Matrix& eps, int n_steps,
                  double cfg_scale, QueryCounter* counter = nullptr);

/// uncond + scale * (cond - uncond).
Matrix cfg_combine(const Matrix& cond, const Matrix& uncond, double scale);

/// z_t - (t - r) u(z_t, r, t | tokens in the interval) with z_t on the
/// straight path from x to eps. Throws std::domain_error unless r < t.
Matrix subpath_reconstruct(const VelocityModel& model, const Matrix& x, const TimePair& pair,
                           const Matrix& tokens, const Matrix& eps);
/// Pair (0, k / K).
Matrix prefix_reconstruct(const VelocityModel& model, const Matrix& x, int k, const Matrix& tokens,
                          const Matrix& eps);
/// Pair (a / K, b / K).
Matrix segment_reconstruct(const VelocityModel& model, const Matrix& x, int a, int b,
                           const Matrix& tokens, const Matrix& eps);

}  // namespace causaltok
