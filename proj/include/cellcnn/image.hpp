#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

#include "cellcnn/common.hpp"

namespace cellcnn {

// Interleaved 8-bit image, row-major, channel-last.
struct ImageU8 {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int r, int c, int ch, std::uint8_t fill = 0)
      : rows(r), cols(c), channels(ch),
        pixels(static_cast<std::size_t>(r) * c * ch, fill) {}

  std::uint8_t& at(int r, int c, int ch) {
    return pixels[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }
  std::uint8_t at(int r, int c, int ch) const {
    return pixels[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }
  bool same_dims(const ImageU8& o) const {
    return rows == o.rows && cols == o.cols && channels == o.channels;
  }
};

// Binary mask; values are 0 or 1.
using MaskU8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rgb = std::array<std::uint8_t, 3>;

inline Rgb pixel_rgb(const ImageU8& img, int r, int c) {
  return {img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2)};
}

}  // namespace cellcnn
