#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "hded/tensor.hpp"

namespace hded {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved (HWC) raster with 8- or 16-bit samples.
struct PngImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  int bit_depth = 8;         // 8 or 16
  std::vector<std::uint16_t> samples;
};

PngImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const PngImage& image);

/// Portable float map. Rows are stored top-to-bottom in memory.
struct PfmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 ("Pf") or 3 ("PF")
  std::vector<float> data;   // HWC
};

PfmImage read_pfm(const std::filesystem::path& path);
/// Writes little-endian (negative scale) PFM.
void write_pfm(const std::filesystem::path& path, const PfmImage& image);

/// [1,C,H,W] tensor with values scaled from [0, 2^bits - 1] to [0, 1].
Tensor<float> png_to_tensor(const PngImage& image);
/// Clamps to [0,1] and quantizes a [1,C,H,W] tensor (C = 1 or 3).
PngImage tensor_to_png(const Tensor<float>& image, int bit_depth = 8);

Tensor<float> pfm_to_tensor(const PfmImage& image);
PfmImage tensor_to_pfm(const Tensor<float>& image);

}  // namespace hded
