#include "causaltok/traintok.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "causaltok/archive.hpp"
#include "causaltok/errors.hpp"
#include "json.hpp"

namespace causaltok {

TrainSchedule TrainSchedule::with_ratios(int total_epochs) {
  TrainSchedule s;
  s.total_epochs = total_epochs;
  s.mf_start_epoch = total_epochs / 8;
  s.interval_start_epoch = total_epochs / 2;
  return s;
}

void TrainSchedule::validate() const {
  if (total_epochs < 1) throw ConfigError("schedule: total_epochs must be positive");
  if (mf_start_epoch < 0 || mf_start_epoch > interval_start_epoch ||
      interval_start_epoch > total_epochs) {
    throw ConfigError("schedule: need 0 <= mf_start_epoch <= interval_start_epoch <= total_epochs");
  }
  if (!(lr > 0.0) || min_lr < 0.0 || min_lr > lr) throw ConfigError("schedule: need 0 <= min_lr <= lr, lr > 0");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
    throw ConfigError("schedule: warmup_fraction must lie in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be positive");
  if (weight_decay < 0.0) throw ConfigError("schedule: weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("schedule: grad_clip must be positive");
  if (ema < 0.0 || ema >= 1.0) throw ConfigError("schedule: ema must lie in [0, 1)");
  if (p_uncond < 0.0 || p_uncond > 1.0) throw ConfigError("schedule: p_uncond must lie in [0, 1]");
}

double TrainSchedule::lr_at(std::int64_t step, std::int64_t total_steps) const {
  const double total = static_cast<double>(std::max<std::int64_t>(total_steps, 1));
  const double warmup = std::floor(warmup_fraction * total);
  const double s = static_cast<double>(step);
  if (s < warmup) return lr * (s + 1.0) / warmup;
  if (lr_schedule == LrSchedule::Constant) return lr;
  const double span = std::max(total - warmup, 1.0);
  const double progress = std::clamp((s - warmup) / span, 0.0, 1.0);
  return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void TokenizerConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (!(decoder.latent == encoder.image)) {
    throw ConfigError("tokenizer: decoder latent shape must equal the encoder image shape");
  }
  if (decoder.token_dim != encoder.token_dim) {
    throw ConfigError("tokenizer: decoder token_dim " + std::to_string(decoder.token_dim) +
                      " != encoder token_dim " + std::to_string(encoder.token_dim));
  }
  if (decoder.max_tokens < encoder.num_tokens) {
    throw ConfigError("tokenizer: decoder max_tokens is smaller than the token count");
  }
  if (decoder.num_patches() != encoder.num_patches()) {
    throw ConfigError("tokenizer: encoder and decoder patch grids differ");
  }
  if (repa_hidden < 1 || vfm_dim < 1) throw ConfigError("tokenizer: repa_hidden and vfm_dim must be positive");
  if (encoder.width != vfm_dim) {
    throw ConfigError("tokenizer: encoder width " + std::to_string(encoder.width) +
                      " must equal vfm_dim " + std::to_string(vfm_dim) +
                      " (encoder features are aligned without a projection)");
  }
}

TokenizerModel::TokenizerModel(const TokenizerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  encoder = Encoder(cfg_.encoder, rng);
  decoder = Decoder(cfg_.decoder, rng);
  projector = RepaProjector(cfg_.decoder.width, cfg_.repa_hidden, cfg_.vfm_dim, rng);
}

std::vector<NamedStore> TokenizerModel::stores() {
  return {{"encoder", &encoder.params()}, {"decoder", &decoder.params()}, {"projector", &projector.params()}};
}

std::map<std::string, Matrix> TokenizerModel::export_tensors(const std::string& prefix) const {
  std::map<std::string, Matrix> out;
  export_params(encoder.params(), prefix + "encoder/", out);
  export_params(decoder.params(), prefix + "decoder/", out);
  export_params(projector.params(), prefix + "projector/", out);
  return out;
}

void TokenizerModel::import_tensors(const std::map<std::string, Matrix>& tensors,
                                    const std::string& prefix) {
  import_params(encoder.params(), prefix + "encoder/", tensors);
  import_params(decoder.params(), prefix + "decoder/", tensors);
  import_params(projector.params(), prefix + "projector/", tensors);
}

DecoderVars jvp_decoder(ad::Tape& tape, const VelocityModel& model, const Matrix& z_t,
                        const TimePair& pair, const TokenCondition& cond, const Matrix& v) {
  if (!(pair.r < pair.t)) throw std::domain_error("jvp_decoder: requires r < t");
  require_same_shape(z_t, v, "jvp_decoder tangent");
  ad::Var z = tape.input(z_t, v);
  ad::Var r = tape.scalar(pair.r, 0.0);
  ad::Var t = tape.scalar(pair.t, 1.0);
  return model.forward(tape, z, r, t, cond);
}

JvpValue jvp_decoder(const VelocityModel& model, const Matrix& z_t, const TimePair& pair,
                     const TokenConditionData& cond, const Matrix& v) {
  ad::Tape tape(false);
  DecoderVars out = jvp_decoder(tape, model, z_t, pair, to_graph(tape, cond), v);
  JvpValue res;
  res.u = out.u.value();
  res.du = out.u.has_tangent() ? out.u.tangent() : Matrix::Zero(res.u.rows(), res.u.cols());
  return res;
}

namespace {

ad::Var accumulate(ad::Var sum, ad::Var term) { return sum.valid() ? ad::add(sum, term) : term; }

double value_or_zero(ad::Var v) { return v.valid() ? v.scalar() : 0.0; }

}  // namespace

LossGraph compute_losses(ad::Tape& tape, const TokenizerModel& model, std::span<const Sample> batch,
                         const VfmBackend& vfm, const TokenizerTrainConfig& cfg, Rng& rng, int epoch,
                         LossCounters* counters) {
  if (batch.empty()) throw std::invalid_argument("compute_losses: empty batch");
  const bool mf_active = epoch >= cfg.schedule.mf_start_epoch;
  const bool interval_active = epoch >= cfg.schedule.interval_start_epoch;
  const int K = model.encoder.config().num_tokens;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  LossGraph g;
  g.bundle.weights = cfg.weights;
  ad::Var mf_sum, rf_sum, repa_sum, repa_a_sum;

  for (const Sample& s : batch) {
    const Matrix& x = s.image;
    const Matrix eps = rng.normal_matrix(x.rows(), x.cols());
    TimePair pair = sample_time_pair(rng, cfg.adaptive, cfg.time);
    if (!mf_active) pair.r = pair.t;
    const bool uncond = rng.bernoulli(cfg.schedule.p_uncond);

    EncoderVars enc = model.encoder.forward(tape, x);
    TokenCondition cond;
    if (uncond) {
      cond = null_condition();
      ++g.bundle.n_uncond;
    } else if (pair.instantaneous() || !interval_active) {
      cond = slice_condition(enc.tokens, TokenSlice{0, K});
    } else {
      cond = slice_condition(enc.tokens, select_tokens(K, pair));
    }

    const Matrix z_t = interpolate(x, eps, pair.t);
    const Matrix v = conditional_velocity(x, eps);
    DecoderVars out;
    if (pair.instantaneous()) {
      out = model.decoder.forward(tape, tape.constant(z_t), tape.scalar(pair.r), tape.scalar(pair.t), cond);
      rf_sum = accumulate(rf_sum, adaptive_l2(ad::sub(out.u, tape.constant(v)), cfg.adaptive));
      ++g.bundle.n_rf;
    } else {
      out = jvp_decoder(tape, model.decoder, z_t, pair, cond, v);
      if (counters) ++counters->jvp_calls;
      const Matrix target = meanflow_target(v, out.u.tangent(), pair.t, pair.r);
      mf_sum = accumulate(mf_sum, adaptive_l2(ad::sub(out.u, tape.constant(target)), cfg.adaptive));
      ++g.bundle.n_mf;
    }

    if (cfg.weights.repa != 0.0 || cfg.weights.repa_a != 0.0) {
      const Matrix h_vfm = vfm.features(x, s.id);
      if (cfg.weights.repa != 0.0) {
        repa_sum = accumulate(repa_sum, repa_loss(tape, model.projector, out.repa_hidden, h_vfm));
      }
      if (cfg.weights.repa_a != 0.0) {
        repa_a_sum = accumulate(repa_a_sum, repa_a_loss(tape, enc.features, h_vfm));
      }
    }
  }

  ad::Var total;
  if (mf_sum.valid()) total = accumulate(total, ad::scale(mf_sum, inv_b));
  if (rf_sum.valid()) total = accumulate(total, ad::scale(rf_sum, inv_b));
  if (repa_sum.valid()) total = accumulate(total, ad::scale(repa_sum, cfg.weights.repa * inv_b));
  if (repa_a_sum.valid()) total = accumulate(total, ad::scale(repa_a_sum, cfg.weights.repa_a * inv_b));
  g.total = total;

  g.bundle.l_mf = value_or_zero(mf_sum) * inv_b;
  g.bundle.l_rf = value_or_zero(rf_sum) * inv_b;
  g.bundle.l_repa = value_or_zero(repa_sum) * inv_b;
  g.bundle.l_repa_a = value_or_zero(repa_a_sum) * inv_b;
  g.bundle.total = total.scalar();
  if (!std::isfinite(g.bundle.total)) {
    throw NumericalError("non-finite loss: l_mf=" + std::to_string(g.bundle.l_mf) +
                         " l_rf=" + std::to_string(g.bundle.l_rf) +
                         " l_repa=" + std::to_string(g.bundle.l_repa) +
                         " l_repa_a=" + std::to_string(g.bundle.l_repa_a));
  }
  return g;
}

void AdamW::step(std::span<const NamedStore> stores, double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& ns : stores) {
    for (auto& [name, p] : *ns.store) {
      const std::string key = ns.name + "/" + name;
      auto& m = m_[key];
      auto& v = v_[key];
      if (m.size() == 0) {
        m = Matrix::Zero(p.value.rows(), p.value.cols());
        v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      if (p.grad.size() != 0) {
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      } else {
        m *= cfg_.beta1;
        v *= cfg_.beta2;
      }
      const Matrix update =
          ((m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps)).matrix() + weight_decay * p.value;
      p.value -= lr * update;
    }
  }
}

void AdamW::export_state(std::map<std::string, Matrix>& out, const std::string& prefix) const {
  for (const auto& [k, m] : m_) out[prefix + "m/" + k] = m;
  for (const auto& [k, v] : v_) out[prefix + "v/" + k] = v;
}

void AdamW::import_state(const std::map<std::string, Matrix>& in, const std::string& prefix,
                         std::int64_t steps) {
  m_.clear();
  v_.clear();
  const std::string pm = prefix + "m/";
  const std::string pv = prefix + "v/";
  for (const auto& [k, m] : in) {
    if (k.rfind(pm, 0) == 0) m_[k.substr(pm.size())] = m;
    if (k.rfind(pv, 0) == 0) v_[k.substr(pv.size())] = m;
  }
  t_ = steps;
}

void collect_gradients(const ad::Tape& tape, std::span<const NamedStore> stores) {
  for (const auto& ns : stores) {
    for (auto& [_, p] : *ns.store) {
      const Matrix* g = tape.param_grad(p);
      if (g != nullptr && g->size() != 0) {
        p.grad = *g;
      } else {
        p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
      }
    }
  }
}

double global_grad_norm(std::span<const NamedStore> stores) {
  double sq = 0.0;
  for (const auto& ns : stores) {
    for (const auto& [_, p] : *ns.store) {
      if (p.grad.size() != 0) sq += p.grad.squaredNorm();
    }
  }
  return std::sqrt(sq);
}

double clip_gradients(std::span<const NamedStore> stores, double max_norm) {
  const double norm = global_grad_norm(stores);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& ns : stores) {
      for (auto& [_, p] : *ns.store) {
        if (p.grad.size() != 0) p.grad *= s;
      }
    }
  }
  return norm;
}

void ema_update(std::span<const NamedStore> ema, std::span<const NamedStore> params, double decay) {
  if (ema.size() != params.size()) throw std::invalid_argument("ema_update: store lists differ");
  for (std::size_t i = 0; i < ema.size(); ++i) {
    for (auto& [name, e] : *ema[i].store) {
      const Parameter& p = params[i].store->at(name);
      e.value = decay * e.value + (1.0 - decay) * p.value;
    }
  }
}

TrainState::TrainState(const TokenizerConfig& model_cfg, const AdamWConfig& adam, std::uint64_t seed)
    : optimizer(adam), rng(seed) {
  Rng init = rng.fork();
  model = TokenizerModel(model_cfg, init);
  ema = model;
}

StepRecord train_step(TrainState& state, std::span<const Sample> batch, const VfmBackend& vfm,
                      const TokenizerTrainConfig& cfg, std::int64_t total_steps) {
  StepRecord rec;
  rec.step = state.step;
  rec.epoch = state.epoch;
  rec.lr = cfg.schedule.lr_at(state.step, total_steps);
  rec.mf_active = state.epoch >= cfg.schedule.mf_start_epoch;
  rec.interval_active = state.epoch >= cfg.schedule.interval_start_epoch;
  rec.losses.weights = cfg.weights;

  auto stores = state.model.stores();
  for (auto& ns : stores) ns.store->zero_grad();

  auto skip = [&](std::string why) {
    rec.skipped = true;
    rec.diagnostic = std::move(why);
    ++state.skipped_steps;
    ++state.step;
    return rec;
  };

  try {
    ad::Tape tape;
    LossGraph g = compute_losses(tape, state.model, batch, vfm, cfg, state.rng, state.epoch,
                                 &state.counters);
    rec.losses = g.bundle;
    tape.backward(g.total);
    collect_gradients(tape, stores);
  } catch (const NumericalError& e) {
    return skip(e.what());
  }

  rec.grad_norm = clip_gradients(stores, cfg.schedule.grad_clip);
  if (!std::isfinite(rec.grad_norm)) return skip("non-finite gradient norm");

  state.optimizer.step(stores, rec.lr, cfg.schedule.weight_decay);
  auto ema_stores = state.ema.stores();
  ema_update(ema_stores, stores, cfg.schedule.ema);
  ++state.step;
  return rec;
}

std::string to_json_line(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["l_mf"] = r.losses.l_mf;
  j["l_rf"] = r.losses.l_rf;
  j["l_repa"] = r.losses.l_repa;
  j["l_repa_a"] = r.losses.l_repa_a;
  j["total"] = r.losses.total;
  j["n_mf"] = r.losses.n_mf;
  j["n_rf"] = r.losses.n_rf;
  j["lr"] = r.lr;
  j["grad_norm"] = r.grad_norm;
  j["mf_active"] = r.mf_active;
  j["interval_active"] = r.interval_active;
  j["skipped"] = r.skipped;
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
  return j.dump();
}

}  // namespace causaltok
