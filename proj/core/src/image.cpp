#include "causaltok/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace causaltok {

namespace {

void check_patch(const ImageShape& shape, int patch) {
  if (patch <= 0 || shape.height % patch != 0 || shape.width % patch != 0) {
    throw std::invalid_argument("patchify: image side must be divisible by the patch size");
  }
}

void check_image(const Matrix& image, const ImageShape& shape) {
  if (image.rows() != shape.channels || image.cols() != shape.pixels()) {
    throw std::invalid_argument("image: expected " + std::to_string(shape.channels) + "x" +
                                std::to_string(shape.pixels()) + " matrix");
  }
}

}  // namespace

std::shared_ptr<const std::vector<int>> patchify_index(const ImageShape& shape, int patch) {
  check_patch(shape, patch);
  const int gw = shape.width / patch;
  const int gh = shape.height / patch;
  const int feat = shape.channels * patch * patch;
  auto index = std::make_shared<std::vector<int>>(static_cast<std::size_t>(gh * gw * feat));
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const int row = py * gw + px;
      for (int c = 0; c < shape.channels; ++c) {
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) {
            const int col = (c * patch + dy) * patch + dx;
            const int y = py * patch + dy;
            const int x = px * patch + dx;
            (*index)[static_cast<std::size_t>(row * feat + col)] =
                c * shape.height * shape.width + y * shape.width + x;
          }
        }
      }
    }
  }
  return index;
}

std::shared_ptr<const std::vector<int>> unpatchify_index(const ImageShape& shape, int patch) {
  const auto fwd = patchify_index(shape, patch);
  auto inv = std::make_shared<std::vector<int>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[static_cast<std::size_t>((*fwd)[i])] = static_cast<int>(i);
  return inv;
}

Matrix patchify(const Matrix& image, const ImageShape& shape, int patch) {
  check_image(image, shape);
  const auto index = patchify_index(shape, patch);
  const int n = (shape.height / patch) * (shape.width / patch);
  Matrix out(n, shape.channels * patch * patch);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = image.data()[(*index)[static_cast<std::size_t>(i)]];
  return out;
}

Matrix unpatchify(const Matrix& patches, const ImageShape& shape, int patch) {
  const auto index = patchify_index(shape, patch);
  if (static_cast<std::size_t>(patches.size()) != index->size()) {
    throw std::invalid_argument("unpatchify: patch matrix does not match the image shape");
  }
  Matrix out(shape.channels, shape.pixels());
  for (Eigen::Index i = 0; i < patches.size(); ++i) out.data()[(*index)[static_cast<std::size_t>(i)]] = patches.data()[i];
  return out;
}

void write_pnm(const std::filesystem::path& path, const Matrix& image, const ImageShape& shape) {
  check_image(image, shape);
  if (shape.channels != 1 && shape.channels != 3) {
    throw std::invalid_argument("write_pnm: only 1- or 3-channel images are supported");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pnm: cannot open " + path.string());
  out << (shape.channels == 3 ? "P6\n" : "P5\n") << shape.width << ' ' << shape.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(shape.size()));
  std::size_t k = 0;
  for (Eigen::Index p = 0; p < shape.pixels(); ++p) {
    for (int c = 0; c < shape.channels; ++c) {
      const double v = std::clamp(image(c, p), 0.0, 1.0);
      bytes[k++] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Matrix read_pnm(const std::filesystem::path& path, ImageShape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pnm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw std::runtime_error("read_pnm: unsupported format in " + path.string());
  auto next_int = [&in]() {
    int v = 0;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      in >> v;
      return v;
    }
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  in.get();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pnm: malformed header in " + path.string());
  }
  shape = ImageShape{magic == "P6" ? 3 : 1, h, w};
  std::vector<unsigned char> bytes(static_cast<std::size_t>(shape.size()));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error("read_pnm: truncated pixel data in " + path.string());
  Matrix image(shape.channels, shape.pixels());
  std::size_t k = 0;
  for (Eigen::Index p = 0; p < shape.pixels(); ++p) {
    for (int c = 0; c < shape.channels; ++c) image(c, p) = bytes[k++] / static_cast<double>(maxval);
  }
  return image;
}

Grid make_grid(std::span<const Matrix> images, const ImageShape& shape, int columns, int pad) {
  if (images.empty()) throw std::invalid_argument("make_grid: no images");
  columns = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
  const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
  Grid g;
  g.shape = ImageShape{shape.channels, rows * shape.height + (rows + 1) * pad,
                       columns * shape.width + (columns + 1) * pad};
  g.image = Matrix::Ones(g.shape.channels, g.shape.pixels());
  for (std::size_t i = 0; i < images.size(); ++i) {
    check_image(images[i], shape);
    const int gy = static_cast<int>(i) / columns;
    const int gx = static_cast<int>(i) % columns;
    const int oy = pad + gy * (shape.height + pad);
    const int ox = pad + gx * (shape.width + pad);
    for (int c = 0; c < shape.channels; ++c) {
      for (int y = 0; y < shape.height; ++y) {
        for (int x = 0; x < shape.width; ++x) {
          g.image(c, (oy + y) * g.shape.width + ox + x) = images[i](c, y * shape.width + x);
        }
      }
    }
  }
  return g;
}

}  // namespace causaltok
