#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hded/losses.hpp"
#include "hded/tensor.hpp"

namespace hded {

struct MetricConfig {
  double delta_base = 1.25;   // delta(k) threshold is delta_base^k
  double psnr_peak = 1.0;
  double psnr_cap_db = 100.0;  // reported when the MSE is exactly zero
  double c1_cap_m = 70.0;
  double c2_cap_m = 80.0;
  double min_valid_depth = 1e-3;  // ground-truth pixels below this are holes
  SsimConfig ssim;

  void validate() const;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DepthMetrics {
  double rmse = 0.0;
  double abs_rel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t valid_pixels = 0;
};

/// Errors over ground-truth pixels with depth >= min_valid_depth.
/// Throws MetricError when no pixel is valid.
template <typename T>
DepthMetrics depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const MetricConfig& cfg);

struct PsnrResult {
  double db = 0.0;
  bool exact = false;  // MSE was zero and db holds the configured cap
};

template <typename T>
PsnrResult psnr(const Tensor<T>& pred, const Tensor<T>& gt, double peak, double cap_db = 100.0);

/// Mean SSIM, evaluated without recording; equals 1 - ssim_loss.
template <typename T>
double ssim_metric(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg = {});

struct RangedDepthMetrics {
  std::optional<DepthMetrics> c1;  // gt <= c1_cap_m; empty when no pixel qualifies
  std::optional<DepthMetrics> c2;  // gt <= c2_cap_m
};

template <typename T>
RangedDepthMetrics ranged_depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                                        const MetricConfig& cfg);

/// Averages over the samples of one split. Optional blocks are absent when the
/// evaluated model lacks the corresponding head.
struct MetricReport {
  std::string split;
  std::size_t sample_count = 0;
  std::optional<DepthMetrics> depth;
  std::optional<double> psnr_db;
  std::optional<double> ssim;
  bool psnr_capped = false;
  std::optional<RangedDepthMetrics> ranged;
  bool depth_masked = true;
  nlohmann::json config;
  std::string timestamp;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

/// Predictions and targets of one evaluated sample (depth in meters).
template <typename T>
struct EvalPair {
  const Tensor<T>* depth_pred = nullptr;
  const Tensor<T>* depth_gt = nullptr;
  const Tensor<T>* aif_pred = nullptr;
  const Tensor<T>* aif_gt = nullptr;
};

/// Per-sample metrics averaged in sample order.
template <typename T>
MetricReport aggregate_metrics(const std::vector<EvalPair<T>>& samples, const MetricConfig& cfg,
                               bool with_ranges = false);

/// Column header matching the loss-ablation table: RMSE, Abs-rel, d1, d2, d3, PSNR, SSIM.
std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& r);

std::string utc_timestamp();

}  // namespace hded
