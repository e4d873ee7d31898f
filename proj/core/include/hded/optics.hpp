#pragma once

#include <cstddef>
#include <vector>

#include "hded/tensor.hpp"

namespace hded {

/// Thin-lens camera used to synthesize defocus from depth.
struct ThinLensCamera {
  double focal_length_m = 0.07;
  double aperture_m = 0.0448;
  double focus_distance_m = 1.0;
  double coc_to_pixel = 1000.0;  // pixels per meter of blur-circle diameter

  void validate() const;

  // alpha = (f / S) * D
  double alpha() const { return focal_length_m / focus_distance_m * aperture_m; }
};

/// Blur-circle diameter in meters for an object at `depth_m`:
/// alpha * |x - S| / x. Zero on the focus plane, saturating at alpha as x grows.
double coc_diameter(const ThinLensCamera& camera, double depth_m);

/// Per-pixel blur-circle diameters, in pixels.
struct CocMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double min() const;
  double max() const;
};

/// depth_m is [1,1,H,W] in meters; every depth must be positive.
template <typename T>
CocMap coc_map(const ThinLensCamera& camera, const Tensor<T>& depth_m);

struct GaussianKernel {
  std::size_t radius = 0;
  std::vector<double> weights;  // (2r+1) x (2r+1), row-major, sums to 1

  std::size_t size() const { return 2 * radius + 1; }
  double at(std::size_t row, std::size_t col) const { return weights[row * size() + col]; }
};

inline constexpr double kDefaultTruncate = 3.0;
inline constexpr double kDefaultRhoMin = 0.25;

/// Normalized 1-D Gaussian taps of radius ceil(truncate * rho); a single unit
/// tap when rho < rho_min.
std::vector<double> gaussian_taps(double rho, double truncate = kDefaultTruncate,
                                  double rho_min = kDefaultRhoMin);

/// 2-D kernel as the outer product of gaussian_taps.
GaussianKernel gaussian_kernel(double rho, double truncate = kDefaultTruncate,
                               double rho_min = kDefaultRhoMin);

/// Mirror index into [0, n) without repeating the edge sample (… 2 1 | 0 1 2 … ).
std::size_t reflect_index(long i, std::size_t n);

/// Separable Gaussian blur of every [H,W] plane with reflect padding.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& image, double rho, double truncate = kDefaultTruncate,
                        double rho_min = kDefaultRhoMin);

struct DefocusOptions {
  std::size_t levels = 16;
  double truncate = kDefaultTruncate;
  double rho_min = kDefaultRhoMin;
};

/// Depth-dependent Gaussian defocus with sigma = coc_px / 4 per pixel.
///
/// The blur-circle range of the image is split into `levels` evenly spaced
/// values; the whole image is blurred once per level and every pixel linearly
/// blends the two levels bracketing its own blur circle. Pixels whose blur
/// circle equals a level exactly (e.g. the focus plane, or every pixel of a
/// fronto-parallel plane at the range ends) copy that level unchanged.
///
/// aif is [1,C,H,W]; depth_m is [1,1,H,W].
template <typename T>
Tensor<T> defocus_image(const Tensor<T>& aif, const Tensor<T>& depth_m,
                        const ThinLensCamera& camera, const DefocusOptions& options = {});

}  // namespace hded
