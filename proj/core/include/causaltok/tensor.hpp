#pragma once

#include <Eigen/Dense>

#include <string>

namespace causaltok {

/// Every tensor in the library is a row-major double matrix. Images and
/// latents are stored channels x (height * width).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ImageShape {
  int channels = 3;
  int height = 32;
  int width = 32;

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index size() const { return pixels() * channels; }
  bool operator==(const ImageShape&) const = default;
};

/// Throws std::invalid_argument naming `what` when the shapes differ.
void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what);

bool all_finite(const Matrix& m);

}  // namespace causaltok
