#pragma once

#include <array>
#include <string>
#include <string_view>

#include "hded/ops.hpp"
#include "hded/network.hpp"

namespace hded {

struct LossWeights {
  double mu = 0.001;       // gradient-smoothing weight in the depth loss
  double psi = 4.0;        // SSIM weight in the deblurring loss
  double lambda = 0.01;    // deblurring weight in the total loss
  double eps_charb = 1e-3;

  void validate() const;
};

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  void validate() const;
};

/// Normalized Gaussian window (window x window, row-major).
std::vector<double> ssim_window(const SsimConfig& cfg);

/// The five loss configurations compared in the loss ablation, in table order.
enum class LossVariant {
  l1_charb,           // L1 depth + lambda * Charbonnier
  l1_l1,              // L1 depth + lambda * L1 deblur
  l1grad_charb,       // (L1 + mu * grad) + lambda * Charbonnier
  l1_charb_ssim,      // L1 + lambda * (Charbonnier + psi * (1 - SSIM))
  l1grad_charb_ssim,  // (L1 + mu * grad) + lambda * (Charbonnier + psi * (1 - SSIM))
};

inline constexpr std::array<LossVariant, 5> kAllLossVariants{
    LossVariant::l1_charb, LossVariant::l1_l1, LossVariant::l1grad_charb,
    LossVariant::l1_charb_ssim, LossVariant::l1grad_charb_ssim};

std::string_view to_string(LossVariant v);
LossVariant parse_loss_variant(std::string_view name);
/// Formula label used in report tables.
std::string_view formula(LossVariant v);

template <typename T> Tensor<T> l1_depth(const Tensor<T>& pred, const Tensor<T>& gt);
/// (sum|dx R| + sum|dy R|) / (N*H*W) for the residual R = pred - gt.
template <typename T> Tensor<T> grad_smooth(const Tensor<T>& pred, const Tensor<T>& gt);
template <typename T> Tensor<T> depth_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w);
/// mean(sqrt((pred - gt)^2 + eps^2)) over every element.
template <typename T> Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& gt, double eps);
/// Plain mean absolute error on images.
template <typename T> Tensor<T> l1_image(const Tensor<T>& pred, const Tensor<T>& gt);
/// Mean windowed SSIM over the valid region of every channel, as a tensor.
template <typename T> Tensor<T> ssim_mean(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg);
/// 1 - mean SSIM.
template <typename T> Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg);
template <typename T> Tensor<T> deblur_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w,
                                            const SsimConfig& cfg = {});

/// Scalar value of every term that entered the objective (others stay 0).
struct LossComponents {
  double l1_depth = 0.0;
  double grad_smooth = 0.0;
  double depth = 0.0;
  double charbonnier = 0.0;
  double l1_deblur = 0.0;
  double ssim_loss = 0.0;
  double deblur = 0.0;
  double total = 0.0;
};

template <typename T>
struct LossResult {
  Tensor<T> total;
  LossComponents components;
};

/// Total objective for a loss variant. With both heads: depth + lambda * deblur.
/// depth_only optimizes the depth term alone, deblur_only the deblurring term alone.
template <typename T>
LossResult<T> total_loss(const Tensor<T>* depth_pred, const Tensor<T>* depth_gt,
                         const Tensor<T>* aif_pred, const Tensor<T>* aif_gt, const LossWeights& w,
                         LossVariant variant, HeadMode heads = HeadMode::both,
                         const SsimConfig& ssim = {});

}  // namespace hded
