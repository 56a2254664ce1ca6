#pragma once

// The causal encoder (image patches + K registers under a causal mask) and the
// mean-velocity decoder (DiT over noised latent patches, modulated by (t, t-r)
// and conditioned in-context on a slice of 1D tokens).

#include <memory>
#include <vector>

#include "causaltok/autodiff.hpp"
#include "causaltok/flowmath.hpp"
#include "causaltok/rng.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

/// (n_patches + K)^2 mask, true where attention is allowed. Patch rows see
/// every patch and no token; token row k sees every patch and tokens j <= k.
BoolMatrix build_causal_mask(int n_patches, int num_tokens);

/// Standard lower-triangular mask (row i sees columns j <= i).
BoolMatrix lower_triangular_mask(int n);

/// Divide each row by its (epsilon-stabilised) L2 norm.
Matrix normalize_tokens(const Matrix& raw, double eps = 1e-12);

/// Half-open index range [begin, end) of token rows.
struct TokenSlice {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool operator==(const TokenSlice&) const = default;
};

/// r == t selects every token. Otherwise rows floor(rK) <= k < ceil(tK),
/// which is non-empty whenever r < t.
TokenSlice select_tokens(int num_tokens, const TimePair& pair);
Matrix select_tokens(const Matrix& tokens, const TimePair& pair);

struct EncoderConfig {
  ImageShape image{3, 32, 32};
  int patch_size = 4;
  int width = 64;
  int depth = 2;
  int heads = 4;
  int num_tokens = 16;
  int token_dim = 16;
  int mlp_ratio = 4;

  int grid() const { return image.height / patch_size; }
  int num_patches() const { return (image.height / patch_size) * (image.width / patch_size); }
  void validate() const;
};

struct DecoderConfig {
  ImageShape latent{3, 32, 32};
  int patch_size = 4;
  int width = 64;
  int depth = 4;
  int heads = 4;
  int token_dim = 16;
  int max_tokens = 16;  // size of the absolute index embedding table
  int repa_layer = 2;   // 1-based block index whose output feeds REPA
  int mlp_ratio = 4;
  int time_freq_dim = 64;
  double time_max_freq = 100.0;

  int num_patches() const { return (latent.height / patch_size) * (latent.width / patch_size); }
  void validate() const;
};

/// Graph-side token condition: either the null sentinel or a set of token
/// rows tagged with their absolute indices.
struct TokenCondition {
  bool is_null = true;
  ad::Var values;
  std::vector<int> indices;
};

/// Data-side counterpart used by inference entry points.
struct TokenConditionData {
  bool is_null = true;
  Matrix values;
  std::vector<int> indices;

  static TokenConditionData null();
  static TokenConditionData all(const Matrix& tokens);
  static TokenConditionData slice(const Matrix& tokens, TokenSlice slice);
};

TokenCondition null_condition();
TokenCondition slice_condition(ad::Var tokens, TokenSlice slice);
TokenCondition to_graph(ad::Tape& tape, const TokenConditionData& data);

struct EncoderVars {
  ad::Var features;  // N x width (H_e, post final norm)
  ad::Var tokens;    // K x token_dim, unit rows
};

struct EncoderOutput {
  Matrix image_features;
  Matrix tokens;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  EncoderVars forward(ad::Tape& tape, const Matrix& image) const;
  EncoderOutput encode(const Matrix& image) const;

 private:
  EncoderConfig cfg_;
  ParamStore params_;
  std::shared_ptr<const BoolMatrix> mask_;
};

struct DecoderVars {
  ad::Var u;            // latent shape (channels x pixels)
  ad::Var repa_hidden;  // N x width; invalid for models without one
};

/// Anything that maps (z, r, t, condition) to a velocity through tape ops.
/// Implemented by Decoder and by analytic stand-ins in tests.
class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual DecoderVars forward(ad::Tape& tape, ad::Var z, ad::Var r, ad::Var t,
                              const TokenCondition& cond) const = 0;
};

struct VelocityPrediction {
  Matrix u;
  Matrix repa_hidden;
};

class Decoder : public VelocityModel {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng);

  const DecoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  DecoderVars forward(ad::Tape& tape, ad::Var z, ad::Var r, ad::Var t,
                      const TokenCondition& cond) const override;

 private:
  DecoderConfig cfg_;
  ParamStore params_;
  std::shared_ptr<const std::vector<int>> patch_index_;
  std::shared_ptr<const std::vector<int>> unpatch_index_;
};

/// Inference helper: evaluate a velocity model without recording gradients.
VelocityPrediction decode_velocity(const VelocityModel& model, const Matrix& z_t,
                                   const TimePair& pair, const TokenConditionData& cond);

/// Maps pixels to the space the flow operates in. Identity at desk scale.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual Matrix encode(const Matrix& image) const = 0;
  virtual Matrix decode(const Matrix& latent) const = 0;
};

class IdentityCodec final : public LatentCodec {
 public:
  Matrix encode(const Matrix& image) const override { return image; }
  Matrix decode(const Matrix& latent) const override { return latent; }
};

}  // namespace causaltok
