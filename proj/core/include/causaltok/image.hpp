#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "causaltok/tensor.hpp"

namespace causaltok {

/// Flat source index for each entry of the patch matrix. The patch matrix has
/// one row per patch (raster order) and channels * patch^2 columns ordered
/// (channel, dy, dx).
std::shared_ptr<const std::vector<int>> patchify_index(const ImageShape& shape, int patch);
/// Inverse map: flat patch-matrix index for each image entry.
std::shared_ptr<const std::vector<int>> unpatchify_index(const ImageShape& shape, int patch);

Matrix patchify(const Matrix& image, const ImageShape& shape, int patch);
Matrix unpatchify(const Matrix& patches, const ImageShape& shape, int patch);

/// Binary PPM (3 channels) or PGM (1 channel); values clamped to [0, 1].
void write_pnm(const std::filesystem::path& path, const Matrix& image, const ImageShape& shape);
Matrix read_pnm(const std::filesystem::path& path, ImageShape& shape);

struct Grid {
  Matrix image;
  ImageShape shape;
};

/// Tiles equally shaped images row-major into `columns` columns with a
/// `pad`-pixel white gutter.
Grid make_grid(std::span<const Matrix> images, const ImageShape& shape, int columns, int pad = 1);

}  // namespace causaltok
