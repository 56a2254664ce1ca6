#include "causaltok/flowmath.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "causaltok/errors.hpp"

namespace causaltok {

namespace {

void require_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error(std::string(what) + ": time " + std::to_string(t) +
                            " outside [0, 1]");
  }
}

double draw_time(Rng& rng, const TimeSamplerConfig& dist) {
  if (dist.kind == TimeDistribution::Uniform) return rng.uniform();
  const double n = dist.logit_mean + dist.logit_std * rng.normal();
  return 1.0 / (1.0 + std::exp(-n));
}

}  // namespace

TimePair TimePair::make(double r, double t) {
  require_unit_time(r, "TimePair");
  require_unit_time(t, "TimePair");
  if (r > t) throw std::domain_error("TimePair: r must not exceed t");
  return TimePair{r, t};
}

FlowSample FlowSample::make(const Matrix& x, const Matrix& eps, double t) {
  FlowSample s;
  s.x = x;
  s.eps = eps;
  s.t = t;
  s.z_t = interpolate(x, eps, t);
  s.v = conditional_velocity(x, eps);
  return s;
}

void AdaptiveLossConfig::validate() const {
  if (!(c > 0.0)) throw ConfigError("adaptive loss: c must be > 0");
  if (!(w >= 0.0)) throw ConfigError("adaptive loss: w must be >= 0");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("adaptive loss: q must lie in [0, 1]");
}

Matrix interpolate(const Matrix& x, const Matrix& eps, double t) {
  require_same_shape(x, eps, "interpolate");
  require_unit_time(t, "interpolate");
  if (t == 0.0) return x;
  if (t == 1.0) return eps;
  return (1.0 - t) * x + t * eps;
}

Matrix conditional_velocity(const Matrix& x, const Matrix& eps) {
  require_same_shape(x, eps, "conditional_velocity");
  return eps - x;
}

Matrix euler_step(const Matrix& z_t, const Matrix& v, double t, double r) {
  require_same_shape(z_t, v, "euler_step");
  if (r > t) throw std::domain_error("euler_step: r must not exceed t");
  if (r == t) return z_t;
  return z_t - (t - r) * v;
}

TimePair sample_time_pair(Rng& rng, const AdaptiveLossConfig& cfg, const TimeSamplerConfig& dist) {
  const double a = draw_time(rng, dist);
  const double b = draw_time(rng, dist);
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  if (rng.bernoulli(cfg.q) || lo == hi) return TimePair{hi, hi};
  return TimePair{lo, hi};
}

double adaptive_l2(const Matrix& delta, const AdaptiveLossConfig& cfg) {
  if (!delta.allFinite()) throw NumericalError("adaptive_l2: non-finite regression error");
  const double sq = delta.squaredNorm();
  return sq / std::pow(sq + cfg.c, cfg.w);
}

double adaptive_l2(std::span<const Matrix> deltas, const AdaptiveLossConfig& cfg) {
  if (deltas.empty()) throw std::invalid_argument("adaptive_l2: empty batch");
  double total = 0.0;
  for (const Matrix& d : deltas) total += adaptive_l2(d, cfg);
  return total / static_cast<double>(deltas.size());
}

Matrix adaptive_l2_grad(const Matrix& delta, const AdaptiveLossConfig& cfg) {
  if (!delta.allFinite()) throw NumericalError("adaptive_l2_grad: non-finite regression error");
  const double sq = delta.squaredNorm();
  return delta * (2.0 / std::pow(sq + cfg.c, cfg.w));
}

ad::Var adaptive_l2(ad::Var delta, const AdaptiveLossConfig& cfg) {
  if (!delta.value().allFinite()) throw NumericalError("adaptive_l2: non-finite regression error");
  ad::Var sq = ad::sum_squares(delta);
  const double weight = 1.0 / std::pow(sq.scalar() + cfg.c, cfg.w);
  return ad::scale(sq, weight);
}

Matrix meanflow_target(const Matrix& v, const Matrix& jvp_u, double t, double r) {
  require_same_shape(v, jvp_u, "meanflow_target");
  if (r > t) throw std::domain_error("meanflow_target: r must not exceed t");
  if (r == t) return v;
  return v - (t - r) * jvp_u;
}

Matrix average_velocity_oracle(const VelocityFieldFn& field, const Matrix& z_t,
                               const TimePair& pair, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("average_velocity_oracle: n_steps must be >= 1");
  if (!(pair.r < pair.t)) {
    throw std::domain_error("average_velocity_oracle: requires r < t");
  }
  const double h = -(pair.t - pair.r) / n_steps;  // integrate backward in time
  Matrix z = z_t;
  for (int i = 0; i < n_steps; ++i) {
    const double tau = pair.t + i * h;
    const Matrix k1 = field(z, tau);
    const Matrix k2 = field(z + 0.5 * h * k1, tau + 0.5 * h);
    const Matrix k3 = field(z + 0.5 * h * k2, tau + 0.5 * h);
    const Matrix k4 = field(z + h * k3, tau + h);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return (z_t - z) / (pair.t - pair.r);
}

}  // namespace causaltok
