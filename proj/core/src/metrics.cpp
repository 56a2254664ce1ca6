#include "causaltok/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "causaltok/sampling.hpp"

namespace causaltok {

double psnr(const Matrix& a, const Matrix& b, double peak) {
  require_same_shape(a, b, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  if (a.size() == 0) throw std::invalid_argument("psnr: empty images");
  const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

namespace {

constexpr int kSsimWindow = 11;

std::vector<double> gaussian_window() {
  std::vector<double> w(kSsimWindow);
  const double sigma = 1.5;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Separable "valid" filtering of an h x w plane.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const std::vector<double>& w) {
  const Eigen::Index oh = plane.rows() - kSsimWindow + 1;
  const Eigen::Index ow = plane.cols() - kSsimWindow + 1;
  Eigen::MatrixXd rows_f(plane.rows(), ow);
  for (Eigen::Index y = 0; y < plane.rows(); ++y) {
    for (Eigen::Index x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += w[i] * plane(y, x + i);
      rows_f(y, x) = acc;
    }
  }
  Eigen::MatrixXd out(oh, ow);
  for (Eigen::Index y = 0; y < oh; ++y) {
    for (Eigen::Index x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += w[i] * rows_f(y + i, x);
      out(y, x) = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const Matrix& a, const Matrix& b, const ImageShape& shape) {
  require_same_shape(a, b, "ssim");
  if (a.rows() != shape.channels || a.cols() != shape.pixels()) {
    throw std::invalid_argument("ssim: images do not match the given shape");
  }
  if (shape.height < kSsimWindow || shape.width < kSsimWindow) {
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  }
  const double c1 = std::pow(0.01 * 1.0, 2);
  const double c2 = std::pow(0.03 * 1.0, 2);
  const auto w = gaussian_window();
  double total = 0.0;
  for (int c = 0; c < shape.channels; ++c) {
    Eigen::MatrixXd pa(shape.height, shape.width), pb(shape.height, shape.width);
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        pa(y, x) = a(c, y * shape.width + x);
        pb(y, x) = b(c, y * shape.width + x);
      }
    }
    const Eigen::MatrixXd mu_a = filter_valid(pa, w);
    const Eigen::MatrixXd mu_b = filter_valid(pb, w);
    const Eigen::MatrixXd saa = filter_valid(pa.cwiseProduct(pa), w) - mu_a.cwiseProduct(mu_a);
    const Eigen::MatrixXd sbb = filter_valid(pb.cwiseProduct(pb), w) - mu_b.cwiseProduct(mu_b);
    const Eigen::MatrixXd sab = filter_valid(pa.cwiseProduct(pb), w) - mu_a.cwiseProduct(mu_b);
    const Eigen::ArrayXXd num =
        (2.0 * mu_a.cwiseProduct(mu_b).array() + c1) * (2.0 * sab.array() + c2);
    const Eigen::ArrayXXd den = (mu_a.array().square() + mu_b.array().square() + c1) *
                                (saa.array() + sbb.array() + c2);
    total += (num / den).mean();
  }
  return total / shape.channels;
}

namespace {

void gaussian_fit(const Matrix& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  const Eigen::Index n = f.rows();
  mu = f.colwise().mean().transpose();
  const Eigen::MatrixXd centred = f.rowwise() - mu.transpose();
  cov = n > 1 ? Eigen::MatrixXd(centred.transpose() * centred / static_cast<double>(n - 1))
              : Eigen::MatrixXd::Zero(f.cols(), f.cols());
  cov += 1e-6 * Eigen::MatrixXd::Identity(f.cols(), f.cols());
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Matrix& features_a, const Matrix& features_b) {
  if (features_a.rows() == 0 || features_b.rows() == 0) {
    throw std::invalid_argument("frechet_distance: empty feature set");
  }
  if (features_a.cols() != features_b.cols()) {
    throw std::invalid_argument("frechet_distance: feature dimensions differ");
  }
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  gaussian_fit(features_a, mu_a, cov_a);
  gaussian_fit(features_b, mu_b, cov_b);
  // Tr (A B)^{1/2} = Tr (A^{1/2} B A^{1/2})^{1/2}, where the inner matrix is
  // symmetric positive semi-definite.
  const Eigen::MatrixXd sa = sym_sqrt(cov_a);
  const Eigen::MatrixXd inner = sa * cov_b * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

Matrix pooled_features(const VfmBackend& vfm, std::span<const Matrix> images) {
  Matrix out(static_cast<Eigen::Index>(images.size()), vfm.dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = vfm.features(images[i], "").colwise().mean();
  }
  return out;
}

std::vector<double> token_usage_histogram(int K, int n_draws, TokenSelector selector, Rng& rng,
                                          const AdaptiveLossConfig& adaptive,
                                          const TimeSamplerConfig& time) {
  if (K < 1 || n_draws < 1) throw std::invalid_argument("token_usage_histogram: K and n_draws must be positive");
  std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
  for (int d = 0; d < n_draws; ++d) {
    TokenSlice s{0, K};
    switch (selector) {
      case TokenSelector::All:
        break;
      case TokenSelector::FirstK:
        s.end = rng.uniform_int(1, K);
        break;
      case TokenSelector::Interval:
        s = select_tokens(K, sample_time_pair(rng, adaptive, time));
        break;
    }
    for (int k = s.begin; k < s.end; ++k) counts[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& c : counts) c /= n_draws;
  return counts;
}

std::vector<ProbePoint> causality_probe(const Encoder& encoder, const VelocityModel& decoder,
                                        std::span<const Matrix> images, std::span<const int> ks,
                                        Rng& rng) {
  if (images.empty()) throw std::invalid_argument("causality_probe: no images");
  std::vector<ProbePoint> curve;
  for (int k : ks) curve.push_back({k, 0.0});
  for (const Matrix& x : images) {
    const Matrix tokens = encoder.encode(x).tokens;
    const Matrix eps = rng.normal_matrix(x.rows(), x.cols());
    for (auto& p : curve) p.error += (prefix_reconstruct(decoder, x, p.k, tokens, eps) - x).squaredNorm();
  }
  for (auto& p : curve) p.error /= static_cast<double>(images.size());
  return curve;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) r[order[m]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: need two equally long series of length >= 2");
  }
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Eigen::VectorXd cx = x.array() - x.mean();
  const Eigen::VectorXd cy = y.array() - y.mean();
  const double den = std::sqrt(cx.squaredNorm() * cy.squaredNorm());
  if (den == 0.0) return 0.0;
  return cx.dot(cy) / den;
}

}  // namespace causaltok
