#pragma once

// Parameter initialisation and transformer building blocks shared by the
// encoder, the decoder and the autoregressive generator.

#include <memory>
#include <string>

#include "causaltok/autodiff.hpp"
#include "causaltok/rng.hpp"

namespace causaltok::layers {

/// `name.w` (in x out, Xavier-uniform or zero) and `name.b` (1 x out, zero).
void init_linear(ParamStore& params, const std::string& name, int in, int out, Rng& rng,
                 bool zero = false);
ad::Var linear(ad::Tape& tape, const ParamStore& params, const std::string& name, ad::Var x);

/// Pre-norm transformer block: attention then a GELU MLP, both residual.
void init_vit_block(ParamStore& params, const std::string& prefix, int width, int mlp_ratio,
                    Rng& rng);
ad::Var vit_block(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var x,
                  int heads, std::shared_ptr<const BoolMatrix> mask);

/// Block with adaLN-Zero modulation from a conditioning row (already passed
/// through SiLU by the caller).
void init_dit_block(ParamStore& params, const std::string& prefix, int width, int mlp_ratio,
                    Rng& rng);
ad::Var dit_block(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var x,
                  ad::Var cond_act, int heads);

/// Sinusoidal features followed by Linear-SiLU-Linear.
void init_scalar_embedder(ParamStore& params, const std::string& prefix, int freq_dim, int width,
                          Rng& rng);
ad::Var scalar_embedder(ad::Tape& tape, const ParamStore& params, const std::string& prefix,
                        ad::Var s, int freq_dim, double max_freq);

}  // namespace causaltok::layers
