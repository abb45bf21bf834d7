#include "cellcnn/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace cellcnn {
namespace {

std::string lower_ext(const std::filesystem::path& path) {
  std::string e = path.extension().string();
  std::transform(e.begin(), e.end(), e.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

std::uint16_t rd16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t rd32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
void wr16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void wr32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

[[noreturn]] void bad(const std::filesystem::path& p, const std::string& why) {
  throw DataError("BadImage", p.string() + ": " + why);
}

ImageU8 load_bmp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("MissingFile", "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 54 || buf[0] != 'B' || buf[1] != 'M') bad(path, "not a BMP file");

  const std::uint32_t data_offset = rd32(&buf[10]);
  const std::uint32_t dib_size = rd32(&buf[14]);
  if (dib_size < 40) bad(path, "unsupported BMP header");
  const std::int32_t width = static_cast<std::int32_t>(rd32(&buf[18]));
  const std::int32_t height_raw = static_cast<std::int32_t>(rd32(&buf[22]));
  const std::uint16_t bpp = rd16(&buf[28]);
  const std::uint32_t compression = rd32(&buf[30]);
  if (compression != 0) bad(path, "compressed BMP not supported");
  if (width <= 0 || height_raw == 0) bad(path, "bad dimensions");
  const bool top_down = height_raw < 0;
  const int height = top_down ? -height_raw : height_raw;

  const std::uint8_t* palette = nullptr;
  std::uint32_t palette_n = 0;
  if (bpp == 8) {
    palette_n = rd32(&buf[46]);
    if (palette_n == 0) palette_n = 256;
    palette = buf.data() + 14 + dib_size;
    if (14 + dib_size + 4 * palette_n > buf.size()) bad(path, "truncated palette");
  } else if (bpp != 24 && bpp != 32) {
    bad(path, "unsupported bit depth " + std::to_string(bpp));
  }

  const std::size_t row_bytes = ((static_cast<std::size_t>(width) * bpp + 31) / 32) * 4;
  if (data_offset + row_bytes * height > buf.size()) bad(path, "truncated pixel data");

  ImageU8 img(height, width, 3);
  for (int r = 0; r < height; ++r) {
    const int src_row = top_down ? r : (height - 1 - r);
    const std::uint8_t* row = buf.data() + data_offset + row_bytes * src_row;
    for (int c = 0; c < width; ++c) {
      std::uint8_t rr, gg, bb;
      if (bpp == 8) {
        const std::uint8_t idx = row[c];
        if (idx >= palette_n) bad(path, "palette index out of range");
        const std::uint8_t* e = palette + 4 * idx;  // BGRA
        bb = e[0]; gg = e[1]; rr = e[2];
      } else {
        const std::uint8_t* px = row + static_cast<std::size_t>(c) * (bpp / 8);
        bb = px[0]; gg = px[1]; rr = px[2];
      }
      img.at(r, c, 0) = rr;
      img.at(r, c, 1) = gg;
      img.at(r, c, 2) = bb;
    }
  }
  return img;
}

void save_bmp(const std::filesystem::path& path, const ImageU8& img) {
  const std::size_t row_bytes = ((static_cast<std::size_t>(img.cols) * 24 + 31) / 32) * 4;
  const std::uint32_t data_size = static_cast<std::uint32_t>(row_bytes * img.rows);
  std::vector<std::uint8_t> out;
  out.reserve(54 + data_size);
  out.push_back('B');
  out.push_back('M');
  wr32(out, 54 + data_size);
  wr32(out, 0);
  wr32(out, 54);
  wr32(out, 40);
  wr32(out, static_cast<std::uint32_t>(img.cols));
  wr32(out, static_cast<std::uint32_t>(img.rows));
  wr16(out, 1);
  wr16(out, 24);
  wr32(out, 0);
  wr32(out, data_size);
  wr32(out, 2835);  // 72 dpi
  wr32(out, 2835);
  wr32(out, 0);
  wr32(out, 0);
  for (int r = img.rows - 1; r >= 0; --r) {
    const std::size_t row_start = out.size();
    for (int c = 0; c < img.cols; ++c) {
      out.push_back(img.at(r, c, 2));
      out.push_back(img.at(r, c, 1));
      out.push_back(img.at(r, c, 0));
    }
    while (out.size() - row_start < row_bytes) out.push_back(0);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("UnwritableFile", "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("UnwritableFile", "write failed for " + path.string());
}

ImageU8 load_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw DataError("MissingFile", "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    bad(path, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    bad(path, "libpng decode failed");
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int height = static_cast<int>(png_get_image_height(png, info));
  const int width = static_cast<int>(png_get_image_width(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    bad(path, "unexpected channel count after expansion");
  }

  ImageU8 img(height, width, 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r)
    rows[static_cast<std::size_t>(r)] = img.pixels.data() + static_cast<std::size_t>(r) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

void save_png(const std::filesystem::path& path, const ImageU8& img) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("UnwritableFile", "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("UnwritableFile", "libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("UnwritableFile", "libpng encode failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols), static_cast<png_uint_32>(img.rows),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.rows));
  for (int r = 0; r < img.rows; ++r)
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(r) * img.cols * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

ImageU8 load_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".bmp") return load_bmp(path);
  if (ext == ".png") return load_png(path);
  throw DataError("BadImage", path.string() + ": unsupported extension (want .bmp or .png)");
}

void save_image(const std::filesystem::path& path, const ImageU8& img) {
  if (img.channels != 3)
    throw DataError("BadImage", "save_image expects a 3-channel image");
  const std::string ext = lower_ext(path);
  if (ext == ".bmp") return save_bmp(path, img);
  if (ext == ".png") return save_png(path, img);
  throw DataError("BadImage", path.string() + ": unsupported extension (want .bmp or .png)");
}

}  // namespace cellcnn
