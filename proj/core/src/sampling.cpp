#include "causaltok/sampling.hpp"

#include <stdexcept>
#include <string>

namespace causaltok {

Matrix one_step(const VelocityModel& model, const Matrix& tokens, const Matrix& eps,
                QueryCounter* counter) {
  const TimePair pair = TimePair::make(0.0, 1.0);
  const Matrix u = decode_velocity(model, eps, pair, TokenConditionData::all(tokens)).u;
  if (counter) ++counter->cond;
  return eps - u;
}

Matrix multi_step(const VelocityModel& model, const Matrix& tokens, const Matrix& eps, int n_steps,
                  double cfg_scale, QueryCounter* counter) {
  if (n_steps < 1) throw std::invalid_argument("multi_step: n_steps must be >= 1");
  if (!(cfg_scale >= 0.0)) throw std::invalid_argument("multi_step: cfg_scale must be >= 0");
  const TokenConditionData cond = TokenConditionData::all(tokens);
  const TokenConditionData null_cond = TokenConditionData::null();
  Matrix z = eps;
  for (int i = 0; i < n_steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / n_steps;
    const double r = (i + 1 == n_steps) ? 0.0 : 1.0 - static_cast<double>(i + 1) / n_steps;
    const TimePair now = TimePair::make(t, t);
    Matrix v = decode_velocity(model, z, now, cond).u;
    if (counter) ++counter->cond;
    if (cfg_scale != 1.0) {
      const Matrix vu = decode_velocity(model, z, now, null_cond).u;
      if (counter) ++counter->uncond;
      v = cfg_combine(v, vu, cfg_scale);
    }
    z = euler_step(z, v, t, r);
  }
  return z;
}

Matrix cfg_combine(const Matrix& cond, const Matrix& uncond, double scale) {
  require_same_shape(cond, uncond, "cfg_combine");
  return uncond + scale * (cond - uncond);
}

Matrix subpath_reconstruct(const VelocityModel& model, const Matrix& x, const TimePair& pair,
                           const Matrix& tokens, const Matrix& eps) {
  if (!(pair.r < pair.t)) throw std::domain_error("subpath_reconstruct: requires r < t");
  const Matrix z_t = interpolate(x, eps, pair.t);
  const auto slice = select_tokens(static_cast<int>(tokens.rows()), pair);
  const Matrix u = decode_velocity(model, z_t, pair, TokenConditionData::slice(tokens, slice)).u;
  return z_t - pair.width() * u;
}

Matrix prefix_reconstruct(const VelocityModel& model, const Matrix& x, int k, const Matrix& tokens,
                          const Matrix& eps) {
  const int K = static_cast<int>(tokens.rows());
  if (k < 1 || k > K) throw std::domain_error("prefix_reconstruct: k must lie in [1, K]");
  return subpath_reconstruct(model, x, TimePair::make(0.0, static_cast<double>(k) / K), tokens, eps);
}

Matrix segment_reconstruct(const VelocityModel& model, const Matrix& x, int a, int b,
                           const Matrix& tokens, const Matrix& eps) {
  const int K = static_cast<int>(tokens.rows());
  if (a < 0 || b > K || a >= b) {
    throw std::domain_error("segment_reconstruct: need 0 <= a < b <= K, got a=" + std::to_string(a) +
                            " b=" + std::to_string(b));
  }
  return subpath_reconstruct(model, x,
                             TimePair::make(static_cast<double>(a) / K, static_cast<double>(b) / K),
                             tokens, eps);
}

}  // namespace causaltok
