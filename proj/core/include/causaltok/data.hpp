#pragma once

// Datasets: a seeded synthetic generator of coloured primitives (class =
// shape kind) and an ingester for a folder of PNM images plus a labels file.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "causaltok/rng.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

struct Sample {
  Matrix image;  // channels x pixels, values in [0, 1]
  int label = 0;
  std::string id;
};

enum class ShapeKind { Disc = 0, Square = 1, Triangle = 2, Ring = 3 };
inline constexpr int kNumShapeKinds = 4;

struct SyntheticConfig {
  ImageShape image{3, 32, 32};
  int count = 256;
  std::uint64_t seed = 7;
};

/// Deterministic given the config: background gradient with low-amplitude
/// stripes, one primitive of random colour, position and size.
Sample synthetic_sample(const ImageShape& shape, ShapeKind kind, Rng& rng, std::string id);
std::vector<Sample> synthetic_dataset(const SyntheticConfig& cfg);

/// Reads `labels.txt` in `dir` (lines "<file> <label>", '#' comments) and the
/// referenced PPM/PGM files, which must all have shape `shape`. The id of a
/// sample is its file stem.
std::vector<Sample> load_folder_dataset(const std::filesystem::path& dir, const ImageShape& shape);

/// Deterministic minibatch order: a fresh permutation per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, int batch_size, std::uint64_t seed);

  int batches_per_epoch() const;
  /// Indices of batch `b` of epoch `epoch`. The final partial batch is dropped.
  std::vector<std::size_t> batch(int epoch, int b) const;

 private:
  std::size_t size_;
  int batch_size_;
  std::uint64_t seed_;
};

std::vector<Sample> gather_batch(std::span<const Sample> data, std::span<const std::size_t> idx);

}  // namespace causaltok
