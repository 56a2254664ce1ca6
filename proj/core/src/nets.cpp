#include "causaltok/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "causaltok/errors.hpp"
#include "causaltok/image.hpp"
#include "causaltok/layers.hpp"

namespace causaltok {

BoolMatrix build_causal_mask(int n_patches, int num_tokens) {
  if (n_patches < 1 || num_tokens < 1) {
    throw std::invalid_argument("build_causal_mask: sizes must be positive");
  }
  const int n = n_patches + num_tokens;
  BoolMatrix mask = BoolMatrix::Constant(n, n, false);
  mask.leftCols(n_patches).setConstant(true);
  for (int k = 0; k < num_tokens; ++k) {
    for (int j = 0; j <= k; ++j) mask(n_patches + k, n_patches + j) = true;
  }
  return mask;
}

BoolMatrix lower_triangular_mask(int n) {
  BoolMatrix mask = BoolMatrix::Constant(n, n, false);
  for (int i = 0; i < n; ++i) mask.row(i).head(i + 1).setConstant(true);
  return mask;
}

Matrix normalize_tokens(const Matrix& raw, double eps) {
  Matrix out = raw;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) /= std::sqrt(out.row(i).squaredNorm() + eps);
  }
  return out;
}

TokenSlice select_tokens(int num_tokens, const TimePair& pair) {
  if (num_tokens < 1) throw std::invalid_argument("select_tokens: no tokens");
  if (pair.instantaneous()) return TokenSlice{0, num_tokens};
  int begin = static_cast<int>(std::floor(pair.r * num_tokens));
  int end = static_cast<int>(std::ceil(pair.t * num_tokens));
  begin = std::clamp(begin, 0, num_tokens - 1);
  end = std::clamp(end, begin + 1, num_tokens);
  return TokenSlice{begin, end};
}

Matrix select_tokens(const Matrix& tokens, const TimePair& pair) {
  const TokenSlice s = select_tokens(static_cast<int>(tokens.rows()), pair);
  return tokens.middleRows(s.begin, s.size());
}

void EncoderConfig::validate() const {
  if (patch_size <= 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ConfigError("encoder: image side must be divisible by patch_size");
  }
  if (width <= 0 || heads <= 0 || width % heads != 0) {
    throw ConfigError("encoder: width must be divisible by heads");
  }
  if (depth < 1 || num_tokens < 1 || token_dim < 1 || mlp_ratio < 1) {
    throw ConfigError("encoder: depth, num_tokens, token_dim and mlp_ratio must be positive");
  }
}

void DecoderConfig::validate() const {
  if (patch_size <= 0 || latent.height % patch_size != 0 || latent.width % patch_size != 0) {
    throw ConfigError("decoder: latent side must be divisible by patch_size");
  }
  if (width <= 0 || heads <= 0 || width % heads != 0) {
    throw ConfigError("decoder: width must be divisible by heads");
  }
  if (depth < 1 || token_dim < 1 || max_tokens < 1 || mlp_ratio < 1) {
    throw ConfigError("decoder: depth, token_dim, max_tokens and mlp_ratio must be positive");
  }
  if (repa_layer < 1 || repa_layer > depth) throw ConfigError("decoder: repa_layer must lie in [1, depth]");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) {
    throw ConfigError("decoder: time_freq_dim must be a positive even number");
  }
}

TokenConditionData TokenConditionData::null() { return TokenConditionData{}; }

TokenConditionData TokenConditionData::all(const Matrix& tokens) {
  return slice(tokens, TokenSlice{0, static_cast<int>(tokens.rows())});
}

TokenConditionData TokenConditionData::slice(const Matrix& tokens, TokenSlice s) {
  if (s.begin < 0 || s.end > tokens.rows() || s.size() <= 0) {
    throw std::invalid_argument("TokenConditionData::slice: invalid range");
  }
  TokenConditionData d;
  d.is_null = false;
  d.values = tokens.middleRows(s.begin, s.size());
  for (int k = s.begin; k < s.end; ++k) d.indices.push_back(k);
  return d;
}

TokenCondition null_condition() { return TokenCondition{}; }

TokenCondition slice_condition(ad::Var tokens, TokenSlice s) {
  TokenCondition c;
  c.is_null = false;
  c.values = ad::slice_rows(tokens, s.begin, s.size());
  for (int k = s.begin; k < s.end; ++k) c.indices.push_back(k);
  return c;
}

TokenCondition to_graph(ad::Tape& tape, const TokenConditionData& data) {
  if (data.is_null) return null_condition();
  if (static_cast<Eigen::Index>(data.indices.size()) != data.values.rows()) {
    throw std::invalid_argument("TokenConditionData: one index per token row required");
  }
  TokenCondition c;
  c.is_null = false;
  c.values = tape.constant(data.values);
  c.indices = data.indices;
  return c;
}

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int patch_dim = cfg_.image.channels * cfg_.patch_size * cfg_.patch_size;
  layers::init_linear(params_, "patch_embed", patch_dim, cfg_.width, rng);
  params_.add("pos_embed", rng.normal_matrix(cfg_.num_patches(), cfg_.width, 0.02));
  params_.add("registers", rng.normal_matrix(cfg_.num_tokens, cfg_.width, 0.02));
  for (int i = 0; i < cfg_.depth; ++i) {
    layers::init_vit_block(params_, "blocks." + std::to_string(i), cfg_.width, cfg_.mlp_ratio, rng);
  }
  layers::init_linear(params_, "token_proj", cfg_.width, cfg_.token_dim, rng);
  mask_ = std::make_shared<const BoolMatrix>(build_causal_mask(cfg_.num_patches(), cfg_.num_tokens));
}

EncoderVars Encoder::forward(ad::Tape& tape, const Matrix& image) const {
  if (image.rows() != cfg_.image.channels || image.cols() != cfg_.image.pixels()) {
    throw std::invalid_argument("encode: image does not match the encoder's image shape");
  }
  const int n = cfg_.num_patches();
  ad::Var patches = tape.constant(patchify(image, cfg_.image, cfg_.patch_size));
  ad::Var x = layers::linear(tape, params_, "patch_embed", patches);
  x = ad::add(x, tape.param(params_.at("pos_embed")));
  const ad::Var parts[] = {x, tape.param(params_.at("registers"))};
  ad::Var seq = ad::concat_rows(parts);
  for (int i = 0; i < cfg_.depth; ++i) {
    seq = layers::vit_block(tape, params_, "blocks." + std::to_string(i), seq, cfg_.heads, mask_);
  }
  seq = ad::layer_norm(seq);
  EncoderVars out;
  out.features = ad::slice_rows(seq, 0, n);
  ad::Var raw = layers::linear(tape, params_, "token_proj", ad::slice_rows(seq, n, cfg_.num_tokens));
  out.tokens = ad::normalize_rows(raw);
  return out;
}

EncoderOutput Encoder::encode(const Matrix& image) const {
  ad::Tape tape(false);
  EncoderVars v = forward(tape, image);
  return EncoderOutput{v.features.value(), v.tokens.value()};
}

// ---------------------------------------------------------------------------
// Decoder

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int patch_dim = cfg_.latent.channels * cfg_.patch_size * cfg_.patch_size;
  layers::init_linear(params_, "latent_embed", patch_dim, cfg_.width, rng);
  params_.add("pos_embed", rng.normal_matrix(cfg_.num_patches(), cfg_.width, 0.02));
  layers::init_scalar_embedder(params_, "t_embed", cfg_.time_freq_dim, cfg_.width, rng);
  layers::init_scalar_embedder(params_, "dt_embed", cfg_.time_freq_dim, cfg_.width, rng);
  layers::init_linear(params_, "token_embed", cfg_.token_dim, cfg_.width, rng);
  params_.add("index_embed", rng.normal_matrix(cfg_.max_tokens, cfg_.width, 0.02));
  params_.add("null_token", rng.normal_matrix(1, cfg_.width, 0.02));
  for (int i = 0; i < cfg_.depth; ++i) {
    layers::init_dit_block(params_, "blocks." + std::to_string(i), cfg_.width, cfg_.mlp_ratio, rng);
  }
  layers::init_linear(params_, "final.ada", cfg_.width, 2 * cfg_.width, rng, /*zero=*/true);
  layers::init_linear(params_, "final.out", cfg_.width, patch_dim, rng, /*zero=*/true);
  patch_index_ = patchify_index(cfg_.latent, cfg_.patch_size);
  unpatch_index_ = unpatchify_index(cfg_.latent, cfg_.patch_size);
}

DecoderVars Decoder::forward(ad::Tape& tape, ad::Var z, ad::Var r, ad::Var t,
                             const TokenCondition& cond) const {
  if (z.rows() != cfg_.latent.channels || z.cols() != cfg_.latent.pixels()) {
    throw std::invalid_argument("decode_velocity: z_t does not match the decoder's latent shape");
  }
  const int m = cfg_.num_patches();
  const int patch_dim = cfg_.latent.channels * cfg_.patch_size * cfg_.patch_size;

  ad::Var x = ad::gather(z, patch_index_, m, patch_dim);
  x = layers::linear(tape, params_, "latent_embed", x);
  x = ad::add(x, tape.param(params_.at("pos_embed")));

  ad::Var c = ad::add(
      layers::scalar_embedder(tape, params_, "t_embed", t, cfg_.time_freq_dim, cfg_.time_max_freq),
      layers::scalar_embedder(tape, params_, "dt_embed", ad::sub(t, r), cfg_.time_freq_dim,
                              cfg_.time_max_freq));
  ad::Var c_act = ad::silu(c);

  ad::Var context;
  if (cond.is_null) {
    context = tape.param(params_.at("null_token"));
  } else {
    if (cond.values.cols() != cfg_.token_dim) {
      throw std::invalid_argument("decode_velocity: token dimension " +
                                  std::to_string(cond.values.cols()) + " != " +
                                  std::to_string(cfg_.token_dim));
    }
    for (int k : cond.indices) {
      if (k < 0 || k >= cfg_.max_tokens) throw std::invalid_argument("decode_velocity: token index out of range");
    }
    ad::Var emb = layers::linear(tape, params_, "token_embed", cond.values);
    context = ad::add(emb, ad::gather_rows(tape.param(params_.at("index_embed")), cond.indices));
  }
  const Eigen::Index ctx_rows = context.rows();
  const ad::Var parts[] = {context, x};
  ad::Var seq = ad::concat_rows(parts);

  DecoderVars out;
  for (int i = 0; i < cfg_.depth; ++i) {
    seq = layers::dit_block(tape, params_, "blocks." + std::to_string(i), seq, c_act, cfg_.heads);
    if (i + 1 == cfg_.repa_layer) out.repa_hidden = ad::slice_rows(seq, ctx_rows, m);
  }
  ad::Var latent_rows = ad::slice_rows(seq, ctx_rows, m);
  ad::Var mod = layers::linear(tape, params_, "final.ada", c_act);
  ad::Var h = ad::modulate(ad::layer_norm(latent_rows), ad::slice_cols(mod, 0, cfg_.width),
                           ad::slice_cols(mod, cfg_.width, cfg_.width));
  h = layers::linear(tape, params_, "final.out", h);
  out.u = ad::gather(h, unpatch_index_, cfg_.latent.channels, cfg_.latent.pixels());
  return out;
}

VelocityPrediction decode_velocity(const VelocityModel& model, const Matrix& z_t,
                                   const TimePair& pair, const TokenConditionData& cond) {
  ad::Tape tape(false);
  ad::Var z = tape.constant(z_t);
  DecoderVars v =
      model.forward(tape, z, tape.scalar(pair.r), tape.scalar(pair.t), to_graph(tape, cond));
  VelocityPrediction p;
  p.u = v.u.value();
  if (v.repa_hidden.valid()) p.repa_hidden = v.repa_hidden.value();
  return p;
}

}  // namespace causaltok
