#pragma once

// Representation alignment against a frozen vision foundation model (VFM):
// REPA aligns projected decoder hidden states, REPA-A aligns the encoder's
// image features directly.

#include <filesystem>
#include <string>

#include "causaltok/autodiff.hpp"
#include "causaltok/rng.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

/// Frozen per-patch feature extractor. Implementations are deterministic and
/// never receive gradients.
class VfmBackend {
 public:
  virtual ~VfmBackend() = default;
  /// N x dim() features for an image (channels x pixels). `image_id` lets
  /// file-backed implementations look up precomputed features.
  virtual Matrix features(const Matrix& image, const std::string& image_id) const = 0;
  virtual int dim() const = 0;
  virtual int num_patches() const = 0;
};

struct StubVfmConfig {
  ImageShape image{3, 32, 32};
  int patch_size = 4;
  int dim = 64;
  int hidden = 64;
  std::uint64_t seed = 1234;
};

/// Randomly initialised (seeded) patch network: per-patch tanh MLP with a
/// 3x3 neighbourhood average between the two layers.
class StubVfm final : public VfmBackend {
 public:
  explicit StubVfm(const StubVfmConfig& cfg);

  Matrix features(const Matrix& image, const std::string& image_id = {}) const override;
  int dim() const override { return cfg_.dim; }
  int num_patches() const override;

 private:
  StubVfmConfig cfg_;
  Matrix w1_, b1_, w2_, b2_;
};

/// Shorthand for StubVfm({shape, patch, dim, hidden, seed}).features(image).
Matrix stub_vfm(const Matrix& image, std::uint64_t seed, const ImageShape& shape = {},
                int patch_size = 4, int dim = 64);

/// Precomputed features stored as `<dir>/<image_id>.feat` archives holding a
/// single tensor named "features" (N x dim).
class FeatureDirVfm final : public VfmBackend {
 public:
  FeatureDirVfm(std::filesystem::path dir, int num_patches, int dim);

  Matrix features(const Matrix& image, const std::string& image_id) const override;
  int dim() const override { return dim_; }
  int num_patches() const override { return num_patches_; }

  static void write(const std::filesystem::path& dir, const std::string& image_id,
                    const Matrix& features);

 private:
  std::filesystem::path dir_;
  int num_patches_;
  int dim_;
};

/// Trainable two-layer map from decoder width to VFM width.
class RepaProjector {
 public:
  RepaProjector() = default;
  RepaProjector(int in_dim, int hidden, int out_dim, Rng& rng);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ad::Var forward(ad::Tape& tape, ad::Var hidden) const;

 private:
  ParamStore params_;
};

/// -mean_n cos(h_vfm[n], proj(hidden[n])).
ad::Var repa_loss(ad::Tape& tape, const RepaProjector& proj, ad::Var repa_hidden,
                  const Matrix& h_vfm);
double repa_loss(const RepaProjector& proj, const Matrix& repa_hidden, const Matrix& h_vfm);

/// -mean_n cos(h_vfm[n], h_e[n]); requires equal widths.
ad::Var repa_a_loss(ad::Tape& tape, ad::Var h_e, const Matrix& h_vfm);
double repa_a_loss(const Matrix& h_e, const Matrix& h_vfm);

/// Mean cosine similarity between matching rows, as a plain function.
double mean_row_cosine(const Matrix& a, const Matrix& b);

}  // namespace causaltok
