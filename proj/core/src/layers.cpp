#include "causaltok/layers.hpp"

#include <cmath>

namespace causaltok::layers {

void init_linear(ParamStore& params, const std::string& name, int in, int out, Rng& rng, bool zero) {
  Matrix w = Matrix::Zero(in, out);
  if (!zero) {
    const double bound = std::sqrt(6.0 / (in + out));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Matrix::Zero(1, out));
}

ad::Var linear(ad::Tape& tape, const ParamStore& params, const std::string& name, ad::Var x) {
  return ad::linear(x, tape.param(params.at(name + ".w")), tape.param(params.at(name + ".b")));
}

void init_vit_block(ParamStore& params, const std::string& prefix, int width, int mlp_ratio,
                    Rng& rng) {
  init_linear(params, prefix + ".qkv", width, 3 * width, rng);
  init_linear(params, prefix + ".proj", width, width, rng);
  init_linear(params, prefix + ".fc1", width, mlp_ratio * width, rng);
  init_linear(params, prefix + ".fc2", mlp_ratio * width, width, rng);
}

namespace {

ad::Var self_attention(ad::Tape& tape, const ParamStore& params, const std::string& prefix,
                       ad::Var h, int heads, std::shared_ptr<const BoolMatrix> mask) {
  const Eigen::Index d = h.cols();
  ad::Var qkv = linear(tape, params, prefix + ".qkv", h);
  ad::Var q = ad::slice_cols(qkv, 0, d);
  ad::Var k = ad::slice_cols(qkv, d, d);
  ad::Var v = ad::slice_cols(qkv, 2 * d, d);
  ad::Var a = ad::attention(q, k, v, heads, std::move(mask));
  return linear(tape, params, prefix + ".proj", a);
}

ad::Var mlp(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var h) {
  return linear(tape, params, prefix + ".fc2", ad::gelu(linear(tape, params, prefix + ".fc1", h)));
}

}  // namespace

ad::Var vit_block(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var x,
                  int heads, std::shared_ptr<const BoolMatrix> mask) {
  x = ad::add(x, self_attention(tape, params, prefix, ad::layer_norm(x), heads, std::move(mask)));
  return ad::add(x, mlp(tape, params, prefix, ad::layer_norm(x)));
}

void init_dit_block(ParamStore& params, const std::string& prefix, int width, int mlp_ratio,
                    Rng& rng) {
  init_vit_block(params, prefix, width, mlp_ratio, rng);
  init_linear(params, prefix + ".ada", width, 6 * width, rng, /*zero=*/true);
}

ad::Var dit_block(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var x,
                  ad::Var cond_act, int heads) {
  const Eigen::Index d = x.cols();
  ad::Var mod = linear(tape, params, prefix + ".ada", cond_act);
  auto chunk = [&](int i) { return ad::slice_cols(mod, i * d, d); };
  ad::Var h = ad::modulate(ad::layer_norm(x), chunk(0), chunk(1));
  x = ad::add(x, ad::gate(self_attention(tape, params, prefix, h, heads, nullptr), chunk(2)));
  h = ad::modulate(ad::layer_norm(x), chunk(3), chunk(4));
  return ad::add(x, ad::gate(mlp(tape, params, prefix, h), chunk(5)));
}

void init_scalar_embedder(ParamStore& params, const std::string& prefix, int freq_dim, int width,
                          Rng& rng) {
  init_linear(params, prefix + ".fc1", freq_dim, width, rng);
  init_linear(params, prefix + ".fc2", width, width, rng);
}

ad::Var scalar_embedder(ad::Tape& tape, const ParamStore& params, const std::string& prefix,
                        ad::Var s, int freq_dim, double max_freq) {
  ad::Var f = ad::sinusoidal(s, freq_dim, max_freq);
  return linear(tape, params, prefix + ".fc2", ad::silu(linear(tape, params, prefix + ".fc1", f)));
}

}  // namespace causaltok::layers
