#include "causaltok/argen.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "causaltok/errors.hpp"
#include "causaltok/layers.hpp"

namespace causaltok {

void ARConfig::validate() const {
  if (width <= 0 || heads <= 0 || width % heads != 0) throw ConfigError("ar: width must be divisible by heads");
  if (depth < 1 || num_tokens < 1 || token_dim < 1 || mlp_ratio < 1) {
    throw ConfigError("ar: depth, num_tokens, token_dim and mlp_ratio must be positive");
  }
  if (n_classes < 1) throw ConfigError("ar: n_classes must be positive");
  if (null_class_id < n_classes) throw ConfigError("ar: null_class_id must not collide with a real class");
  if (head_hidden < 1 || head_depth < 0) throw ConfigError("ar: invalid head dimensions");
  if (diff_train_steps < 1 || diff_sample_steps < 1) throw ConfigError("ar: diffusion step counts must be positive");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) throw ConfigError("ar: time_freq_dim must be even");
}

ARModel::ARModel(const ARConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  params_.add("class_embed", rng.normal_matrix(cfg_.null_class_id + 1, cfg_.width, 0.02));
  layers::init_linear(params_, "token_in", cfg_.token_dim, cfg_.width, rng);
  params_.add("pos_embed", rng.normal_matrix(cfg_.num_tokens + 1, cfg_.width, 0.02));
  for (int i = 0; i < cfg_.depth; ++i) {
    layers::init_vit_block(params_, "blocks." + std::to_string(i), cfg_.width, cfg_.mlp_ratio, rng);
  }
  layers::init_linear(params_, "head.in", cfg_.token_dim, cfg_.head_hidden, rng);
  layers::init_linear(params_, "head.cond", cfg_.width, cfg_.head_hidden, rng);
  layers::init_scalar_embedder(params_, "head.t", cfg_.time_freq_dim, cfg_.head_hidden, rng);
  for (int i = 0; i < cfg_.head_depth; ++i) {
    const std::string p = "head.blocks." + std::to_string(i);
    layers::init_linear(params_, p + ".fc1", cfg_.head_hidden, cfg_.head_hidden, rng);
    layers::init_linear(params_, p + ".fc2", cfg_.head_hidden, cfg_.head_hidden, rng);
  }
  layers::init_linear(params_, "head.out", cfg_.head_hidden, cfg_.token_dim, rng, /*zero=*/true);
  for (int n = 1; n <= cfg_.num_tokens + 1; ++n) {
    masks_.push_back(std::make_shared<const BoolMatrix>(lower_triangular_mask(n)));
  }
}

ad::Var ARModel::conditions(ad::Tape& tape, ad::Var prefix, int class_id) const {
  const bool is_class = class_id >= 0 && class_id < cfg_.n_classes;
  if (!is_class && class_id != cfg_.null_class_id) {
    throw std::invalid_argument("ar_conditions: unknown class id " + std::to_string(class_id));
  }
  const int k = prefix.valid() ? static_cast<int>(prefix.rows()) : 0;
  if (k > cfg_.num_tokens) throw std::invalid_argument("ar_conditions: prefix longer than K");
  ad::Var seq = ad::gather_rows(tape.param(params_.at("class_embed")), {class_id});
  if (k > 0) {
    if (prefix.cols() != cfg_.token_dim) throw std::invalid_argument("ar_conditions: token width mismatch");
    const ad::Var parts[] = {seq, layers::linear(tape, params_, "token_in", prefix)};
    seq = ad::concat_rows(parts);
  }
  seq = ad::add(seq, ad::slice_rows(tape.param(params_.at("pos_embed")), 0, k + 1));
  for (int i = 0; i < cfg_.depth; ++i) {
    seq = layers::vit_block(tape, params_, "blocks." + std::to_string(i), seq, cfg_.heads, masks_[k]);
  }
  return ad::layer_norm(seq);
}

ad::Var ARModel::head_velocity(ad::Tape& tape, ad::Var cond, ad::Var x_s, ad::Var s) const {
  ad::Var h = ad::add(layers::linear(tape, params_, "head.in", x_s),
                      layers::linear(tape, params_, "head.cond", cond));
  h = ad::add(h, layers::scalar_embedder(tape, params_, "head.t", s, cfg_.time_freq_dim, cfg_.time_max_freq));
  for (int i = 0; i < cfg_.head_depth; ++i) {
    const std::string p = "head.blocks." + std::to_string(i);
    ad::Var inner = layers::linear(tape, params_, p + ".fc1", ad::layer_norm(h));
    h = ad::add(h, layers::linear(tape, params_, p + ".fc2", ad::silu(inner)));
  }
  return layers::linear(tape, params_, "head.out", ad::layer_norm(h));
}

Matrix ar_conditions(const ARModel& model, const Matrix& prefix, int class_id) {
  ad::Tape tape(false);
  ad::Var p = prefix.rows() > 0 ? tape.constant(prefix) : ad::Var{};
  return model.conditions(tape, p, class_id).value();
}

ad::Var diffusion_head_loss(ad::Tape& tape, const ARModel& model, ad::Var cond,
                            const Matrix& targets, const Matrix& s, const Matrix& eps) {
  require_same_shape(targets, eps, "diffusion_head_loss");
  if (s.rows() != targets.rows() || s.cols() != 1 || cond.rows() != targets.rows()) {
    throw std::invalid_argument("diffusion_head_loss: one noise level and condition per row");
  }
  const Matrix x_s = ((1.0 - s.array()).matrix().asDiagonal() * targets) + s.asDiagonal() * eps;
  ad::Var pred = model.head_velocity(tape, cond, tape.constant(x_s), tape.constant(s));
  return ad::sum_squares(ad::sub(pred, tape.constant(eps - targets)));
}

ad::Var diffusion_head_loss(ad::Tape& tape, const ARModel& model, ad::Var cond,
                            const Matrix& targets, Rng& rng) {
  const int T = model.config().diff_train_steps;
  Matrix s(targets.rows(), 1);
  for (Eigen::Index i = 0; i < s.rows(); ++i) s(i, 0) = static_cast<double>(rng.uniform_int(0, T)) / T;
  const Matrix eps = rng.normal_matrix(targets.rows(), targets.cols());
  return diffusion_head_loss(tape, model, cond, targets, s, eps);
}

ad::Var ar_sequence_loss(ad::Tape& tape, const ARModel& model, const Matrix& tokens, int class_id,
                         Rng& rng) {
  const int K = model.config().num_tokens;
  if (tokens.rows() != K || tokens.cols() != model.config().token_dim) {
    throw std::invalid_argument("ar_sequence_loss: expected a K x token_dim sequence");
  }
  ad::Var prefix = K > 1 ? tape.constant(tokens.topRows(K - 1)) : ad::Var{};
  ad::Var cond = model.conditions(tape, prefix, class_id);
  return diffusion_head_loss(tape, model, cond, tokens, rng);
}

double cfg_schedule(int k, int K, double s_max) {
  if (K < 1 || k < 0 || k >= K) throw std::invalid_argument("cfg_schedule: need 0 <= k < K");
  if (s_max < 1.0) throw std::invalid_argument("cfg_schedule: s_max must be >= 1");
  return 1.0 + (s_max - 1.0) * static_cast<double>(k + 1) / K;
}

namespace {

Matrix head_velocity_value(const ARModel& model, const Matrix& cond, const Matrix& x, double s) {
  ad::Tape tape(false);
  return model
      .head_velocity(tape, tape.constant(cond), tape.constant(x), tape.constant(Matrix::Constant(1, 1, s)))
      .value();
}

}  // namespace

Matrix ar_generate(const ARModel& model, int class_id, double s_max, Rng& rng, QueryCounter* counter) {
  const ARConfig& cfg = model.config();
  const int K = cfg.num_tokens;
  const int n = cfg.diff_sample_steps;
  Matrix seq(K, cfg.token_dim);
  for (int k = 0; k < K; ++k) {
    const double scale = cfg_schedule(k, K, s_max);
    const bool guided = scale != 1.0;
    const Matrix prefix = seq.topRows(k);
    const Matrix cond = ar_conditions(model, prefix, class_id).row(k);
    if (counter) ++counter->cond;
    Matrix uncond;
    if (guided) {
      uncond = ar_conditions(model, prefix, cfg.null_class_id).row(k);
      if (counter) ++counter->uncond;
    }
    Matrix x = rng.normal_matrix(1, cfg.token_dim);
    for (int i = 0; i < n; ++i) {
      const double s = 1.0 - static_cast<double>(i) / n;
      const double s_next = 1.0 - static_cast<double>(i + 1) / n;
      Matrix v = head_velocity_value(model, cond, x, s);
      if (guided) v = cfg_combine(v, head_velocity_value(model, uncond, x, s), scale);
      x -= (s - s_next) * v;
    }
    seq.row(k) = normalize_tokens(x).row(0);
  }
  return seq;
}

GeneratedImage generate_image(const ARModel& ar, const VelocityModel& decoder,
                              const ImageShape& latent_shape, const LatentCodec& codec,
                              int class_id, double s_max, Rng& rng, QueryCounter* counter) {
  GeneratedImage g;
  g.tokens = ar_generate(ar, class_id, s_max, rng, counter);
  const Matrix eps = rng.normal_matrix(latent_shape.channels, latent_shape.pixels());
  g.image = codec.decode(one_step(decoder, g.tokens, eps));
  return g;
}

ARTrainState::ARTrainState(const ARConfig& cfg, const AdamWConfig& adam, std::uint64_t seed)
    : optimizer(adam), rng(seed) {
  Rng init = rng.fork();
  model = ARModel(cfg, init);
  ema = model;
}

ARStepRecord train_ar_step(ARTrainState& state, std::span<const TokenSequence> batch,
                           const TrainSchedule& schedule, std::int64_t total_steps) {
  if (batch.empty()) throw std::invalid_argument("train_ar_step: empty batch");
  ARStepRecord rec;
  rec.step = state.step;
  rec.lr = schedule.lr_at(state.step, total_steps);
  auto stores = state.model.stores();
  for (auto& ns : stores) ns.store->zero_grad();

  ad::Tape tape;
  ad::Var total;
  for (const auto& seq : batch) {
    const int label = state.rng.bernoulli(schedule.p_uncond) ? state.model.config().null_class_id : seq.label;
    ad::Var l = ar_sequence_loss(tape, state.model, seq.tokens, label, state.rng);
    total = total.valid() ? ad::add(total, l) : l;
  }
  total = ad::scale(total, 1.0 / static_cast<double>(batch.size()));
  rec.loss = total.scalar();
  if (!std::isfinite(rec.loss)) {
    rec.skipped = true;
    ++state.skipped_steps;
    ++state.step;
    return rec;
  }
  tape.backward(total);
  collect_gradients(tape, stores);
  rec.grad_norm = clip_gradients(stores, schedule.grad_clip);
  if (!std::isfinite(rec.grad_norm)) {
    rec.skipped = true;
    ++state.skipped_steps;
    ++state.step;
    return rec;
  }
  state.optimizer.step(stores, rec.lr, schedule.weight_decay);
  auto ema_stores = state.ema.stores();
  ema_update(ema_stores, stores, schedule.ema);
  ++state.step;
  return rec;
}

}  // namespace causaltok
