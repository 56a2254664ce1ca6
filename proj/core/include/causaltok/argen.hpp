#pragma once

// Autoregressive generator over continuous tokens: a causal transformer over
// [class embedding, V_0, ..., V_{k-1}] whose output at position k conditions a
// small per-token flow head for V_k.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "causaltok/autodiff.hpp"
#include "causaltok/nets.hpp"
#include "causaltok/rng.hpp"
#include "causaltok/sampling.hpp"
#include "causaltok/traintok.hpp"

namespace causaltok {

struct ARConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int num_tokens = 16;  // K
  int token_dim = 16;
  int n_classes = 4;
  int null_class_id = 4;  // must be >= n_classes
  int mlp_ratio = 4;
  int head_hidden = 128;
  int head_depth = 2;
  int diff_train_steps = 1000;  // noise levels are drawn from {0, 1/T, ..., 1}
  int diff_sample_steps = 100;
  int time_freq_dim = 32;
  double time_max_freq = 100.0;

  void validate() const;
};

class ARModel {
 public:
  ARModel() = default;
  ARModel(const ARConfig& cfg, Rng& rng);

  const ARConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::vector<NamedStore> stores() { return {{"ar", &params_}}; }

  /// (k + 1) x width condition rows for a k-row prefix; row i conditions V_i.
  ad::Var conditions(ad::Tape& tape, ad::Var prefix, int class_id) const;
  /// Velocity prediction of the token head for noised rows x_s at levels s
  /// (n x 1), one condition row per token row.
  ad::Var head_velocity(ad::Tape& tape, ad::Var cond, ad::Var x_s, ad::Var s) const;

 private:
  ARConfig cfg_;
  ParamStore params_;
  std::vector<std::shared_ptr<const BoolMatrix>> masks_;  // masks_[n - 1] is n x n
};

/// Matrix form of ARModel::conditions. Throws std::invalid_argument for a
/// prefix longer than K or an unknown class id.
Matrix ar_conditions(const ARModel& model, const Matrix& prefix, int class_id);

/// Sum over rows of |head(x_s, s | cond) - (eps - target)|^2 with
/// x_s = (1 - s) target + s eps.
ad::Var diffusion_head_loss(ad::Tape& tape, const ARModel& model, ad::Var cond,
                            const Matrix& targets, const Matrix& s, const Matrix& eps);
/// Draws s and eps per row from `rng`.
ad::Var diffusion_head_loss(ad::Tape& tape, const ARModel& model, ad::Var cond,
                            const Matrix& targets, Rng& rng);

/// Teacher-forced loss of one K-token sequence: sum of the per-position head
/// losses with conditions computed from the ground-truth prefix.
ad::Var ar_sequence_loss(ad::Tape& tape, const ARModel& model, const Matrix& tokens, int class_id,
                         Rng& rng);

/// 1 + (s_max - 1)(k + 1) / K.
double cfg_schedule(int k, int K, double s_max);

/// Sequential sampling with guidance cfg_schedule(k, K, s_max); each sampled
/// token is renormalised to unit length. `counter->uncond` counts null-class
/// transformer evaluations.
Matrix ar_generate(const ARModel& model, int class_id, double s_max, Rng& rng,
                   QueryCounter* counter = nullptr);

struct GeneratedImage {
  Matrix tokens;
  Matrix image;
};

/// tokens = ar_generate(...), image = codec.decode(one_step(decoder, tokens, eps)).
GeneratedImage generate_image(const ARModel& ar, const VelocityModel& decoder,
                              const ImageShape& latent_shape, const LatentCodec& codec,
                              int class_id, double s_max, Rng& rng, QueryCounter* counter = nullptr);

struct ARTrainState {
  ARModel model;
  ARModel ema;
  AdamW optimizer;
  std::int64_t step = 0;
  std::int64_t skipped_steps = 0;
  Rng rng;

  ARTrainState() = default;
  ARTrainState(const ARConfig& cfg, const AdamWConfig& adam, std::uint64_t seed);
};

struct TokenSequence {
  Matrix tokens;  // K x token_dim
  int label = 0;
};

struct ARStepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;
};

/// Mean sequence loss over the batch; labels are replaced by the null class
/// with probability schedule.p_uncond.
ARStepRecord train_ar_step(ARTrainState& state, std::span<const TokenSequence> batch,
                           const TrainSchedule& schedule, std::int64_t total_steps);

}  // namespace causaltok
