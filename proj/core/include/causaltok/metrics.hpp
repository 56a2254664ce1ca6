#pragma once

// Reconstruction and generation metrics, the token-usage balance statistic
// and the prefix-reconstruction causality probe.

#include <span>
#include <vector>

#include "causaltok/flowmath.hpp"
#include "causaltok/nets.hpp"
#include "causaltok/repa.hpp"
#include "causaltok/rng.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / mse), capped at kPsnrCap.
double psnr(const Matrix& a, const Matrix& b, double peak = 1.0);

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1, averaged over every fully contained window
/// position and over channels.
double ssim(const Matrix& a, const Matrix& b, const ImageShape& shape);

/// Squared 2-Wasserstein distance between Gaussian fits of two sample sets
/// (one sample per row). Covariances get +1e-6 I.
double frechet_distance(const Matrix& features_a, const Matrix& features_b);

/// One row per image: the VFM features averaged over patches.
Matrix pooled_features(const VfmBackend& vfm, std::span<const Matrix> images);

enum class TokenSelector {
  Interval,  // training-time rule: sample_time_pair then select_tokens
  All,
  FirstK,    // k uniform in {1..K}, tokens [0, k)
};

/// Per-index inclusion frequency over n_draws simulated selections.
std::vector<double> token_usage_histogram(int K, int n_draws, TokenSelector selector, Rng& rng,
                                          const AdaptiveLossConfig& adaptive = {},
                                          const TimeSamplerConfig& time = {});

struct ProbePoint {
  int k = 0;
  double error = 0.0;
};

/// Mean over images of |prefix_reconstruct(x, k) - x|^2 (sum over entries)
/// for each k. One eps per image, shared across ks.
std::vector<ProbePoint> causality_probe(const Encoder& encoder, const VelocityModel& decoder,
                                        std::span<const Matrix> images, std::span<const int> ks,
                                        Rng& rng);

/// Rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace causaltok
