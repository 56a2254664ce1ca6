#pragma once

// Joint tokenizer training: the decoder's directional derivative, loss
// assembly with the staged curriculum, AdamW with global-norm clipping, and
// the EMA copy.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "causaltok/autodiff.hpp"
#include "causaltok/data.hpp"
#include "causaltok/flowmath.hpp"
#include "causaltok/nets.hpp"
#include "causaltok/repa.hpp"
#include "causaltok/rng.hpp"

namespace causaltok {

struct LossWeights {
  double repa = 1.0;
  double repa_a = 0.8;
};

/// total = l_mf + l_rf + weights.repa * l_repa + weights.repa_a * l_repa_a.
/// l_mf and l_rf are sums over their subsets divided by the batch size, so
/// together they form one pooled flow loss.
struct LossBundle {
  double l_mf = 0.0;
  double l_rf = 0.0;
  double l_repa = 0.0;
  double l_repa_a = 0.0;
  double total = 0.0;
  LossWeights weights;
  int n_mf = 0;
  int n_rf = 0;
  int n_uncond = 0;
};

enum class LrSchedule { Cosine, Constant };

struct TrainSchedule {
  int total_epochs = 16;
  int mf_start_epoch = 2;
  int interval_start_epoch = 8;
  double lr = 1e-4;
  double min_lr = 0.0;
  LrSchedule lr_schedule = LrSchedule::Cosine;
  double warmup_fraction = 0.0;  // of total steps, linear from 0
  int batch_size = 16;
  double weight_decay = 0.05;
  double grad_clip = 3.0;
  double ema = 0.999;
  double p_uncond = 0.1;

  /// Defaults with the staging epochs at 1/8 and 1/2 of `total_epochs`.
  static TrainSchedule with_ratios(int total_epochs);
  void validate() const;
  double lr_at(std::int64_t step, std::int64_t total_steps) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct TokenizerTrainConfig {
  TrainSchedule schedule;
  AdaptiveLossConfig adaptive;
  TimeSamplerConfig time;
  LossWeights weights;
  AdamWConfig adam;
};

struct TokenizerConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  int repa_hidden = 128;
  int vfm_dim = 64;

  void validate() const;
};

struct NamedStore {
  std::string name;
  ParamStore* store;
};

class TokenizerModel {
 public:
  TokenizerModel() = default;
  TokenizerModel(const TokenizerConfig& cfg, Rng& rng);

  const TokenizerConfig& config() const { return cfg_; }
  Encoder encoder;
  Decoder decoder;
  RepaProjector projector;

  /// Stores in canonical order; pointers are into this object.
  std::vector<NamedStore> stores();
  std::map<std::string, Matrix> export_tensors(const std::string& prefix = "") const;
  void import_tensors(const std::map<std::string, Matrix>& tensors, const std::string& prefix = "");

 private:
  TokenizerConfig cfg_;
};

/// u(z_t, r, t | cond) on `tape` with the tangent (v, 0, 1) seeded on
/// (z, r, t); the returned u carries du as its tangent. Requires r < t.
DecoderVars jvp_decoder(ad::Tape& tape, const VelocityModel& model, const Matrix& z_t,
                        const TimePair& pair, const TokenCondition& cond, const Matrix& v);

struct JvpValue {
  Matrix u;
  Matrix du;
};
JvpValue jvp_decoder(const VelocityModel& model, const Matrix& z_t, const TimePair& pair,
                     const TokenConditionData& cond, const Matrix& v);

struct LossCounters {
  std::int64_t jvp_calls = 0;
};

struct LossGraph {
  ad::Var total;
  LossBundle bundle;
};

/// Builds the full loss for `batch` on `tape`. Per sample: encode, draw eps
/// and a time pair, choose the token condition (null with p_uncond, all
/// tokens before interval_start_epoch, the interval slice after), then add
/// the mean-velocity loss (r < t) or the instantaneous loss (r == t) and the
/// two alignment terms. Before mf_start_epoch every pair is collapsed to
/// r == t. A non-finite loss throws NumericalError.
LossGraph compute_losses(ad::Tape& tape, const TokenizerModel& model, std::span<const Sample> batch,
                         const VfmBackend& vfm, const TokenizerTrainConfig& cfg, Rng& rng, int epoch,
                         LossCounters* counters = nullptr);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

  /// Decoupled decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
  void step(std::span<const NamedStore> stores, double lr, double weight_decay);
  std::int64_t steps() const { return t_; }

  void export_state(std::map<std::string, Matrix>& out, const std::string& prefix) const;
  void import_state(const std::map<std::string, Matrix>& in, const std::string& prefix,
                    std::int64_t steps);

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

/// Copies tape gradients into Parameter::grad (zero for unused parameters).
void collect_gradients(const ad::Tape& tape, std::span<const NamedStore> stores);
double global_grad_norm(std::span<const NamedStore> stores);
/// Rescales all gradients so the global norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(std::span<const NamedStore> stores, double max_norm);
/// ema <- decay * ema + (1 - decay) * params, store by store.
void ema_update(std::span<const NamedStore> ema, std::span<const NamedStore> params, double decay);

struct TrainState {
  TokenizerModel model;
  TokenizerModel ema;
  AdamW optimizer;
  std::int64_t step = 0;
  int epoch = 0;
  std::int64_t skipped_steps = 0;
  LossCounters counters;
  Rng rng;

  TrainState() = default;
  TrainState(const TokenizerConfig& model_cfg, const AdamWConfig& adam, std::uint64_t seed);
};

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  LossBundle losses;
  double lr = 0.0;
  double grad_norm = 0.0;
  bool mf_active = false;
  bool interval_active = false;
  bool skipped = false;
  std::string diagnostic;
};

/// One optimisation step. Non-finite losses or gradients skip the update
/// and increment state.skipped_steps.
StepRecord train_step(TrainState& state, std::span<const Sample> batch, const VfmBackend& vfm,
                      const TokenizerTrainConfig& cfg, std::int64_t total_steps);

/// One JSON object per line.
std::string to_json_line(const StepRecord& record);

}  // namespace causaltok
