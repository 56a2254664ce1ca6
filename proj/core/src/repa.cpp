#include "causaltok/repa.hpp"

#include <cmath>
#include <stdexcept>

#include "causaltok/archive.hpp"
#include "causaltok/errors.hpp"
#include "causaltok/image.hpp"
#include "causaltok/layers.hpp"

namespace causaltok {

StubVfm::StubVfm(const StubVfmConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed);
  const int in = cfg_.image.channels * cfg_.patch_size * cfg_.patch_size;
  w1_ = rng.normal_matrix(in, cfg_.hidden, 1.0 / std::sqrt(static_cast<double>(in)));
  b1_ = rng.normal_matrix(1, cfg_.hidden, 0.1);
  w2_ = rng.normal_matrix(cfg_.hidden, cfg_.dim, 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));
  b2_ = rng.normal_matrix(1, cfg_.dim, 0.1);
}

int StubVfm::num_patches() const {
  return (cfg_.image.height / cfg_.patch_size) * (cfg_.image.width / cfg_.patch_size);
}

Matrix StubVfm::features(const Matrix& image, const std::string&) const {
  // Centre pixels so the random projection sees signed inputs.
  const Matrix patches = (patchify(image, cfg_.image, cfg_.patch_size).array() - 0.5).matrix();
  Matrix h = patches * w1_;
  h.rowwise() += b1_.row(0);
  h = h.array().tanh().matrix();
  const int gh = cfg_.image.height / cfg_.patch_size;
  const int gw = cfg_.image.width / cfg_.patch_size;
  Matrix mixed(h.rows(), h.cols());
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(h.cols());
      int count = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          if (yy < 0 || yy >= gh || xx < 0 || xx >= gw) continue;
          acc += h.row(yy * gw + xx);
          ++count;
        }
      }
      mixed.row(y * gw + x) = 0.5 * h.row(y * gw + x) + 0.5 * acc / count;
    }
  }
  Matrix out = mixed * w2_;
  out.rowwise() += b2_.row(0);
  return out;
}

Matrix stub_vfm(const Matrix& image, std::uint64_t seed, const ImageShape& shape, int patch_size,
                int dim) {
  StubVfmConfig cfg;
  cfg.image = shape;
  cfg.patch_size = patch_size;
  cfg.dim = dim;
  cfg.seed = seed;
  return StubVfm(cfg).features(image);
}

FeatureDirVfm::FeatureDirVfm(std::filesystem::path dir, int num_patches, int dim)
    : dir_(std::move(dir)), num_patches_(num_patches), dim_(dim) {
  if (!std::filesystem::is_directory(dir_)) {
    throw ConfigError("vfm feature directory does not exist: " + dir_.string());
  }
}

Matrix FeatureDirVfm::features(const Matrix&, const std::string& image_id) const {
  const auto path = dir_ / (image_id + ".feat");
  Matrix f = load_archive(path).tensor("features");
  if (f.rows() != num_patches_ || f.cols() != dim_) {
    throw ConfigError("vfm features for '" + image_id + "' have shape " + std::to_string(f.rows()) +
                      "x" + std::to_string(f.cols()) + ", expected " + std::to_string(num_patches_) +
                      "x" + std::to_string(dim_));
  }
  return f;
}

void FeatureDirVfm::write(const std::filesystem::path& dir, const std::string& image_id,
                          const Matrix& features) {
  Archive a;
  a.metadata_json = R"({"kind":"vfm-features"})";
  a.tensors.emplace("features", features);
  save_archive(dir / (image_id + ".feat"), a);
}

RepaProjector::RepaProjector(int in_dim, int hidden, int out_dim, Rng& rng) {
  layers::init_linear(params_, "fc1", in_dim, hidden, rng);
  layers::init_linear(params_, "fc2", hidden, out_dim, rng);
}

ad::Var RepaProjector::forward(ad::Tape& tape, ad::Var hidden) const {
  return layers::linear(tape, params_, "fc2", ad::silu(layers::linear(tape, params_, "fc1", hidden)));
}

ad::Var repa_loss(ad::Tape& tape, const RepaProjector& proj, ad::Var repa_hidden,
                  const Matrix& h_vfm) {
  if (repa_hidden.rows() != h_vfm.rows()) {
    throw std::invalid_argument("repa_loss: decoder and VFM patch counts differ");
  }
  return ad::neg_mean_cosine(proj.forward(tape, repa_hidden), tape.constant(h_vfm));
}

double repa_loss(const RepaProjector& proj, const Matrix& repa_hidden, const Matrix& h_vfm) {
  ad::Tape tape(false);
  return repa_loss(tape, proj, tape.constant(repa_hidden), h_vfm).scalar();
}

ad::Var repa_a_loss(ad::Tape& tape, ad::Var h_e, const Matrix& h_vfm) {
  if (h_e.cols() != h_vfm.cols()) {
    throw ConfigError("repa_a_loss: encoder width " + std::to_string(h_e.cols()) +
                      " must equal the VFM width " + std::to_string(h_vfm.cols()));
  }
  if (h_e.rows() != h_vfm.rows()) {
    throw std::invalid_argument("repa_a_loss: encoder and VFM patch counts differ");
  }
  return ad::neg_mean_cosine(h_e, tape.constant(h_vfm));
}

double repa_a_loss(const Matrix& h_e, const Matrix& h_vfm) {
  ad::Tape tape(false);
  return repa_a_loss(tape, tape.constant(h_e), h_vfm).scalar();
}

double mean_row_cosine(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "mean_row_cosine");
  ad::Tape tape(false);
  return -ad::neg_mean_cosine(tape.constant(a), tape.constant(b)).scalar();
}

}  // namespace causaltok
