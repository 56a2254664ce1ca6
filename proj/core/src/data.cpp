#include "causaltok/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "causaltok/errors.hpp"
#include "causaltok/image.hpp"

namespace causaltok {

namespace {

bool inside(ShapeKind kind, double dx, double dy, double radius) {
  switch (kind) {
    case ShapeKind::Disc:
      return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::Square:
      return std::abs(dx) <= 0.8 * radius && std::abs(dy) <= 0.8 * radius;
    case ShapeKind::Triangle: {
      // Upward triangle with apex at -radius and base at +0.7 radius.
      if (dy < -radius || dy > 0.7 * radius) return false;
      const double half = (dy + radius) / 1.7 * 0.9;
      return std::abs(dx) <= half;
    }
    case ShapeKind::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= radius * radius && d2 >= 0.36 * radius * radius;
    }
  }
  return false;
}

}  // namespace

Sample synthetic_sample(const ImageShape& shape, ShapeKind kind, Rng& rng, std::string id) {
  Sample s;
  s.label = static_cast<int>(kind);
  s.id = std::move(id);
  s.image.resize(shape.channels, shape.pixels());

  std::vector<double> base(shape.channels), slope_x(shape.channels), slope_y(shape.channels);
  std::vector<double> colour(shape.channels);
  for (int c = 0; c < shape.channels; ++c) {
    base[c] = 0.25 + 0.3 * rng.uniform();
    slope_x[c] = 0.3 * (rng.uniform() - 0.5);
    slope_y[c] = 0.3 * (rng.uniform() - 0.5);
    colour[c] = rng.uniform();
  }
  // Keep the primitive distinguishable from the background.
  const double lift = rng.bernoulli(0.5) ? 0.45 : -0.45;
  for (int c = 0; c < shape.channels; ++c) colour[c] = std::clamp(base[c] + lift + 0.3 * (colour[c] - 0.5), 0.0, 1.0);

  const double side = std::min(shape.height, shape.width);
  const double radius = side * (0.18 + 0.14 * rng.uniform());
  const double cx = radius + (shape.width - 2.0 * radius) * rng.uniform();
  const double cy = radius + (shape.height - 2.0 * radius) * rng.uniform();
  const double stripe_freq = 0.3 + 0.5 * rng.uniform();
  const double stripe_phase = 6.283185307179586 * rng.uniform();

  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      const double u = static_cast<double>(x) / shape.width - 0.5;
      const double v = static_cast<double>(y) / shape.height - 0.5;
      const double stripes = 0.04 * std::sin(stripe_freq * (x + y) + stripe_phase);
      const bool in = inside(kind, x + 0.5 - cx, y + 0.5 - cy, radius);
      for (int c = 0; c < shape.channels; ++c) {
        const double bg = base[c] + slope_x[c] * u + slope_y[c] * v + stripes;
        s.image(c, y * shape.width + x) = std::clamp(in ? colour[c] : bg, 0.0, 1.0);
      }
    }
  }
  return s;
}

std::vector<Sample> synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.count < 1) throw ConfigError("synthetic dataset: count must be positive");
  Rng rng(cfg.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    const auto kind = static_cast<ShapeKind>(i % kNumShapeKinds);
    out.push_back(synthetic_sample(cfg.image, kind, rng, "syn" + std::to_string(i)));
  }
  return out;
}

std::vector<Sample> load_folder_dataset(const std::filesystem::path& dir, const ImageShape& shape) {
  const auto labels_path = dir / "labels.txt";
  std::ifstream in(labels_path);
  if (!in) throw ConfigError("dataset: cannot open " + labels_path.string());
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string file;
    int label = 0;
    if (!(ls >> file)) continue;
    if (!(ls >> label) || label < 0) {
      throw ConfigError("dataset: " + labels_path.string() + ":" + std::to_string(line_no) +
                        ": expected '<file> <non-negative label>'");
    }
    ImageShape got;
    Sample s;
    s.image = read_pnm(dir / file, got);
    if (!(got == shape)) {
      throw ConfigError("dataset: " + file + " is " + std::to_string(got.channels) + "x" +
                        std::to_string(got.height) + "x" + std::to_string(got.width) +
                        ", configured image shape differs");
    }
    s.label = label;
    s.id = std::filesystem::path(file).stem().string();
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ConfigError("dataset: no images listed in " + labels_path.string());
  return out;
}

BatchSampler::BatchSampler(std::size_t dataset_size, int batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ < 1) throw ConfigError("batch_size must be positive");
  if (size_ < static_cast<std::size_t>(batch_size_)) {
    throw ConfigError("dataset has fewer samples than one batch");
  }
}

int BatchSampler::batches_per_epoch() const { return static_cast<int>(size_ / batch_size_); }

std::vector<std::size_t> BatchSampler::batch(int epoch, int b) const {
  if (b < 0 || b >= batches_per_epoch()) throw std::invalid_argument("BatchSampler: batch out of range");
  std::vector<std::size_t> perm(size_);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed_ * 1000003ull + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = size_; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)));
    std::swap(perm[i - 1], perm[j]);
  }
  const auto begin = perm.begin() + static_cast<std::ptrdiff_t>(b) * batch_size_;
  return {begin, begin + batch_size_};
}

std::vector<Sample> gather_batch(std::span<const Sample> data, std::span<const std::size_t> idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

}  // namespace causaltok
