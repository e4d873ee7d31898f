#include "hded/optics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hded {

void ThinLensCamera::validate() const {
  if (!(focal_length_m > 0.0)) throw DomainError("camera focal length must be positive");
  if (!(aperture_m > 0.0)) throw DomainError("camera aperture must be positive");
  if (!(focus_distance_m > focal_length_m)) {
    throw DomainError("camera focus distance (" + std::to_string(focus_distance_m) +
                      " m) must exceed the focal length (" + std::to_string(focal_length_m) +
                      " m)");
  }
  if (!(coc_to_pixel > 0.0)) throw DomainError("camera coc_to_pixel must be positive");
}

double coc_diameter(const ThinLensCamera& camera, double depth_m) {
  if (!(depth_m > 0.0)) {
    throw DomainError("blur circle undefined for non-positive depth " + std::to_string(depth_m));
  }
  return camera.alpha() * std::abs(depth_m - camera.focus_distance_m) / depth_m;
}

double CocMap::min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
double CocMap::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

template <typename T>
CocMap coc_map(const ThinLensCamera& camera, const Tensor<T>& depth_m) {
  camera.validate();
  const auto& s = depth_m.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 1) {
    throw ShapeError("coc_map expects a [1,1,H,W] depth map, got " + to_string(s));
  }
  std::size_t bad = 0;
  for (T d : depth_m.data()) {
    if (!(d > T{0})) ++bad;
  }
  if (bad) {
    throw DomainError("depth map has " + std::to_string(bad) + " non-positive pixel(s)");
  }
  CocMap map;
  map.height = s[2];
  map.width = s[3];
  map.values.reserve(depth_m.numel());
  for (T d : depth_m.data()) {
    map.values.push_back(camera.coc_to_pixel * coc_diameter(camera, static_cast<double>(d)));
  }
  return map;
}

std::vector<double> gaussian_taps(double rho, double truncate, double rho_min) {
  if (!(rho >= 0.0)) throw DomainError("gaussian kernel needs rho >= 0");
  if (rho < rho_min) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(truncate * rho));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    taps[i] = std::exp(-d * d / (2.0 * rho * rho));
    sum += taps[i];
  }
  for (auto& t : taps) t /= sum;
  // Exact mirror symmetry regardless of summation order.
  for (std::size_t i = 0; i < radius; ++i) taps[taps.size() - 1 - i] = taps[i];
  return taps;
}

GaussianKernel gaussian_kernel(double rho, double truncate, double rho_min) {
  const auto taps = gaussian_taps(rho, truncate, rho_min);
  GaussianKernel k;
  k.radius = taps.size() / 2;
  k.weights.resize(taps.size() * taps.size());
  for (std::size_t r = 0; r < taps.size(); ++r) {
    for (std::size_t c = 0; c < taps.size(); ++c) k.weights[r * taps.size() + c] = taps[r] * taps[c];
  }
  return k;
}

std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& image, double rho, double truncate, double rho_min) {
  const auto& s = image.shape();
  if (s.size() != 4) throw ShapeError("gaussian_blur expects NCHW, got " + to_string(s));
  const auto taps = gaussian_taps(rho, truncate, rho_min);
  Tensor<T> out = image.clone();
  if (taps.size() == 1) return out;
  const long r = static_cast<long>(taps.size() / 2);
  const std::size_t h = s[2], w = s[3], planes = s[0] * s[1];
  std::vector<double> tmp(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = image.data().data() + p * h * w;
    T* dst = out.data_mut().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (long k = -r; k <= r; ++k) {
          acc += taps[k + r] * src[i * w + reflect_index(static_cast<long>(j) + k, w)];
        }
        tmp[i * w + j] = acc;
      }
    }
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (long k = -r; k <= r; ++k) {
          acc += taps[k + r] * tmp[reflect_index(static_cast<long>(i) + k, h) * w + j];
        }
        dst[i * w + j] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> defocus_image(const Tensor<T>& aif, const Tensor<T>& depth_m,
                        const ThinLensCamera& camera, const DefocusOptions& options) {
  const auto& s = aif.shape();
  if (s.size() != 4 || s[0] != 1) {
    throw ShapeError("defocus_image expects a [1,C,H,W] image, got " + to_string(s));
  }
  const auto coc = coc_map(camera, depth_m);
  if (coc.height != s[2] || coc.width != s[3]) {
    throw ShapeError("defocus_image: dimension mismatch between image " + to_string(s) +
                     " and depth " + to_string(depth_m.shape()));
  }
  if (options.levels < 1) throw DomainError("defocus_image needs at least one blur level");

  const double lo = coc.min();
  const double hi = coc.max();
  const std::size_t levels = hi > lo ? std::max<std::size_t>(options.levels, 2) : 1;
  std::vector<Tensor<T>> layers;
  layers.reserve(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    double eps = lo;
    if (levels > 1) {
      eps = l + 1 == levels ? hi : lo + (hi - lo) * static_cast<double>(l) / static_cast<double>(levels - 1);
    }
    layers.push_back(gaussian_blur(aif, eps / 4.0, options.truncate, options.rho_min));
  }
  if (levels == 1) return layers.front();

  Tensor<T> out(s);
  const std::size_t plane = s[2] * s[3];
  const double step = (hi - lo) / static_cast<double>(levels - 1);
  T* y = out.data_mut().data();
  for (std::size_t px = 0; px < plane; ++px) {
    const double v = coc.values[px];
    const double t = (v - lo) / step;
    auto idx = static_cast<std::size_t>(std::floor(t));
    double frac = t - static_cast<double>(idx);
    if (v == lo) {
      idx = 0;
      frac = 0.0;
    } else if (v == hi || idx >= levels - 1) {
      idx = levels - 1;
      frac = 0.0;
    }
    for (std::size_t c = 0; c < s[1]; ++c) {
      const std::size_t off = c * plane + px;
      const T a = layers[idx].data()[off];
      if (frac == 0.0) {
        y[off] = a;
      } else {
        const T b = layers[idx + 1].data()[off];
        y[off] = static_cast<T>((1.0 - frac) * a + frac * b);
      }
    }
  }
  return out;
}

template CocMap coc_map(const ThinLensCamera&, const Tensor<float>&);
template CocMap coc_map(const ThinLensCamera&, const Tensor<double>&);
template Tensor<float> gaussian_blur(const Tensor<float>&, double, double, double);
template Tensor<double> gaussian_blur(const Tensor<double>&, double, double, double);
template Tensor<float> defocus_image(const Tensor<float>&, const Tensor<float>&,
                                     const ThinLensCamera&, const DefocusOptions&);
template Tensor<double> defocus_image(const Tensor<double>&, const Tensor<double>&,
                                      const ThinLensCamera&, const DefocusOptions&);

}  // namespace hded
