#include "hded/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

namespace hded {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIoError("cannot open " + path.string());
  return f;
}

}  // namespace

PngImage read_png(const std::filesystem::path& path) {
  File file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  PngImage img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("malformed PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = buffer.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (img.channels != 1 && img.channels != 3) {
    throw ImageIoError(path.string() + ": unsupported channel count " + std::to_string(img.channels));
  }
  const std::size_t n = img.width * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      img.samples[i] = static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = buffer[i];
  }
  return img;
}

void write_png(const std::filesystem::path& path, const PngImage& image) {
  if (image.channels != 1 && image.channels != 3) throw ImageIoError("PNG writer supports 1 or 3 channels");
  if (image.bit_depth != 8 && image.bit_depth != 16) throw ImageIoError("PNG writer supports 8 or 16 bits");
  if (image.samples.size() != image.width * image.height * image.channels) {
    throw ImageIoError("PNG sample count does not match its dimensions");
  }
  const std::size_t bytes = image.bit_depth / 8;
  const std::size_t rowbytes = image.width * image.channels * bytes;
  std::vector<png_byte> buffer(rowbytes * image.height);
  for (std::size_t i = 0; i < image.samples.size(); ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<png_byte>(image.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<png_byte>(image.samples[i] & 0xFF);
    } else {
      buffer[i] = static_cast<png_byte>(std::min<std::uint16_t>(image.samples[i], 255));
    }
  }
  std::vector<png_bytep> rows(image.height);
  for (std::size_t r = 0; r < image.height; ++r) rows[r] = buffer.data() + r * rowbytes;

  File file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               image.bit_depth, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

PfmImage read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + path.string());
  std::string magic;
  PfmImage img;
  double scale = 0.0;
  if (!(is >> magic >> img.width >> img.height >> scale)) {
    throw ImageIoError("malformed PFM header in " + path.string());
  }
  if (magic == "Pf") {
    img.channels = 1;
  } else if (magic == "PF") {
    img.channels = 3;
  } else {
    throw ImageIoError(path.string() + " is not a PFM file (magic '" + magic + "')");
  }
  if (img.width == 0 || img.height == 0 || scale == 0.0) {
    throw ImageIoError("malformed PFM header in " + path.string());
  }
  is.get();  // single whitespace byte before the raster
  const bool little = scale < 0.0;
  const std::size_t row = img.width * img.channels;
  img.data.resize(row * img.height);
  std::vector<unsigned char> bytes(row * 4);
  for (std::size_t r = 0; r < img.height; ++r) {
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
      throw ImageIoError("truncated PFM raster in " + path.string());
    }
    // PFM stores the bottom row first.
    float* dst = img.data.data() + (img.height - 1 - r) * row;
    for (std::size_t k = 0; k < row; ++k) {
      unsigned char b[4];
      std::memcpy(b, bytes.data() + 4 * k, 4);
      const bool swap = little != (std::endian::native == std::endian::little);
      if (swap) std::reverse(b, b + 4);
      std::memcpy(dst + k, b, 4);
    }
  }
  return img;
}

void write_pfm(const std::filesystem::path& path, const PfmImage& image) {
  if (image.channels != 1 && image.channels != 3) throw ImageIoError("PFM supports 1 or 3 channels");
  if (image.data.size() != image.width * image.height * image.channels) {
    throw ImageIoError("PFM value count does not match its dimensions");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageIoError("cannot open " + path.string() + " for writing");
  os << (image.channels == 3 ? "PF" : "Pf") << '\n' << image.width << ' ' << image.height << "\n-1.0\n";
  const std::size_t row = image.width * image.channels;
  for (std::size_t r = image.height; r-- > 0;) {
    for (std::size_t k = 0; k < row; ++k) {
      unsigned char b[4];
      std::memcpy(b, image.data.data() + r * row + k, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!os) throw ImageIoError("write failed for " + path.string());
}

Tensor<float> png_to_tensor(const PngImage& image) {
  const double maxv = image.bit_depth == 16 ? 65535.0 : 255.0;
  const std::size_t h = image.height, w = image.width, c = image.channels;
  Tensor<float> t(Shape{1, c, h, w});
  auto d = t.data_mut();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        d[(k * h + i) * w + j] = static_cast<float>(image.samples[(i * w + j) * c + k] / maxv);
      }
    }
  }
  return t;
}

PngImage tensor_to_png(const Tensor<float>& image, int bit_depth) {
  const auto& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3)) {
    throw ImageIoError("tensor_to_png expects [1,1|3,H,W], got " + to_string(s));
  }
  PngImage img;
  img.channels = s[1];
  img.height = s[2];
  img.width = s[3];
  img.bit_depth = bit_depth;
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  img.samples.resize(image.numel());
  const auto d = image.data();
  for (std::size_t i = 0; i < img.height; ++i) {
    for (std::size_t j = 0; j < img.width; ++j) {
      for (std::size_t k = 0; k < img.channels; ++k) {
        const double v = std::clamp(static_cast<double>(d[(k * img.height + i) * img.width + j]), 0.0, 1.0);
        img.samples[(i * img.width + j) * img.channels + k] = static_cast<std::uint16_t>(std::lround(v * maxv));
      }
    }
  }
  return img;
}

Tensor<float> pfm_to_tensor(const PfmImage& image) {
  const std::size_t h = image.height, w = image.width, c = image.channels;
  Tensor<float> t(Shape{1, c, h, w});
  auto d = t.data_mut();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t k = 0; k < c; ++k) d[(k * h + i) * w + j] = image.data[(i * w + j) * c + k];
    }
  }
  return t;
}

PfmImage tensor_to_pfm(const Tensor<float>& image) {
  const auto& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3)) {
    throw ImageIoError("tensor_to_pfm expects [1,1|3,H,W], got " + to_string(s));
  }
  PfmImage img;
  img.channels = s[1];
  img.height = s[2];
  img.width = s[3];
  img.data.resize(image.numel());
  const auto d = image.data();
  for (std::size_t i = 0; i < img.height; ++i) {
    for (std::size_t j = 0; j < img.width; ++j) {
      for (std::size_t k = 0; k < img.channels; ++k) {
        img.data[(i * img.width + j) * img.channels + k] = d[(k * img.height + i) * img.width + j];
      }
    }
  }
  return img;
}

}  // namespace hded
