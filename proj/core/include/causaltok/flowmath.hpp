#pragma once

// Straight-path flow matching primitives: interpolation, velocities, the
// Euler step, (r, t) sampling, the adaptive L2 loss, the mean-velocity
// regression target and a brute-force average-velocity oracle.

#include <functional>
#include <span>

#include "causaltok/autodiff.hpp"
#include "causaltok/rng.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

/// A pair of times with 0 <= r <= t <= 1. r == t selects the instantaneous
/// velocity; r < t the average velocity over [r, t].
struct TimePair {
  double r = 0.0;
  double t = 1.0;

  /// Validating constructor; throws std::domain_error on an illegal pair.
  static TimePair make(double r, double t);
  bool instantaneous() const { return r == t; }
  double width() const { return t - r; }
};

/// One point on the conditional path between data x and noise eps.
struct FlowSample {
  Matrix x;
  Matrix eps;
  double t = 0.0;
  Matrix z_t;
  Matrix v;

  static FlowSample make(const Matrix& x, const Matrix& eps, double t);
};

struct AdaptiveLossConfig {
  double c = 1e-3;
  double w = 1.0;
  double q = 0.75;  // fraction of pairs collapsed to r == t

  void validate() const;
};

enum class TimeDistribution { Uniform, LogitNormal };

struct TimeSamplerConfig {
  TimeDistribution kind = TimeDistribution::Uniform;
  // Parameters of the logit-normal mapping t = sigmoid(mean + std * n).
  double logit_mean = -0.4;
  double logit_std = 1.0;
};

/// (1 - t) x + t eps.
Matrix interpolate(const Matrix& x, const Matrix& eps, double t);

/// eps - x, the velocity of the straight conditional path.
Matrix conditional_velocity(const Matrix& x, const Matrix& eps);

/// z_r = z_t - (t - r) v.
Matrix euler_step(const Matrix& z_t, const Matrix& v, double t, double r);

/// Two independent draws; with probability q the pair collapses to
/// (max, max), otherwise it is sorted so r < t.
TimePair sample_time_pair(Rng& rng, const AdaptiveLossConfig& cfg,
                          const TimeSamplerConfig& dist = {});

/// |delta|^2 / sg[(|delta|^2 + c)^w] for one sample (sum over all entries).
double adaptive_l2(const Matrix& delta, const AdaptiveLossConfig& cfg);
/// Batch form: per-sample adaptive loss, then the batch mean.
double adaptive_l2(std::span<const Matrix> deltas, const AdaptiveLossConfig& cfg);
/// Gradient of the single-sample loss w.r.t. delta (denominator held fixed).
Matrix adaptive_l2_grad(const Matrix& delta, const AdaptiveLossConfig& cfg);
/// Graph form for one sample; the weight is a constant on the tape.
ad::Var adaptive_l2(ad::Var delta, const AdaptiveLossConfig& cfg);

/// Detached regression target v - (t - r) * du, where du is the derivative
/// of u along the tangent (v, 0, 1) in (z, r, t).
Matrix meanflow_target(const Matrix& v, const Matrix& jvp_u, double t, double r);

using VelocityFieldFn = std::function<Matrix(const Matrix& z, double tau)>;

/// (z_t - z_r) / (t - r), where z_r comes from integrating dz/dtau = field
/// backward from t to r with n_steps classical RK4 steps. Test oracle only.
Matrix average_velocity_oracle(const VelocityFieldFn& field, const Matrix& z_t,
                               const TimePair& pair, int n_steps);

}  // namespace causaltok
