#pragma once

#include <filesystem>

#include "cellcnn/image.hpp"

namespace cellcnn {

// Loads an 8-bit BMP or PNG (by extension) as a 3-channel RGB image.
// Grayscale and paletted inputs are expanded; alpha is dropped.
ImageU8 load_image(const std::filesystem::path& path);

// Writes a 3-channel image as 24-bit BMP or 8-bit RGB PNG (by extension).
// The BMP writer is byte-deterministic for identical pixel data.
void save_image(const std::filesystem::path& path, const ImageU8& img);

}  // namespace cellcnn
