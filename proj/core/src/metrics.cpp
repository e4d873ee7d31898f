#include "hded/metrics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <sstream>

namespace hded {

void MetricConfig::validate() const {
  if (!(delta_base > 1.0)) throw std::invalid_argument("delta_base must exceed 1");
  if (!(c1_cap_m > 0.0 && c2_cap_m > 0.0 && c1_cap_m < c2_cap_m)) {
    throw std::invalid_argument("range caps must be positive with c1 < c2");
  }
  if (!(min_valid_depth > 0.0)) throw std::invalid_argument("min_valid_depth must be positive");
  if (!(psnr_peak > 0.0)) throw std::invalid_argument("psnr peak must be positive");
}

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": dimension mismatch between " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
}

template <typename T>
DepthMetrics masked_depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                                  const MetricConfig& cfg, double cap) {
  require_same(pred, gt, "depth_metrics");
  const double t1 = cfg.delta_base;
  const double t2 = t1 * t1;
  const double t3 = t2 * t1;
  long double sq = 0, rel = 0;
  std::size_t n = 0, d1 = 0, d2 = 0, d3 = 0;
  const auto p = pred.data();
  const auto g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gv = g[i];
    if (!(gv >= cfg.min_valid_depth) || gv > cap) continue;
    const double pv = p[i];
    const double diff = pv - gv;
    sq += diff * diff;
    rel += std::abs(diff) / gv;
    const double ratio = std::max(pv / gv, gv / pv);
    // A non-positive prediction never satisfies a ratio threshold.
    const bool ok = pv > 0.0;
    if (ok && ratio < t1) ++d1;
    if (ok && ratio < t2) ++d2;
    if (ok && ratio < t3) ++d3;
    ++n;
  }
  if (n == 0) throw MetricError("depth metrics: no valid ground-truth pixel");
  DepthMetrics m;
  const auto count = static_cast<long double>(n);
  m.rmse = static_cast<double>(std::sqrt(sq / count));
  m.abs_rel = static_cast<double>(rel / count);
  m.delta1 = static_cast<double>(d1) / static_cast<double>(n);
  m.delta2 = static_cast<double>(d2) / static_cast<double>(n);
  m.delta3 = static_cast<double>(d3) / static_cast<double>(n);
  m.valid_pixels = n;
  return m;
}

nlohmann::json depth_json(const DepthMetrics& d) {
  return {{"rmse", d.rmse},     {"abs_rel", d.abs_rel}, {"delta1", d.delta1},
          {"delta2", d.delta2}, {"delta3", d.delta3},   {"valid_pixels", d.valid_pixels}};
}

DepthMetrics depth_from_json(const nlohmann::json& j) {
  DepthMetrics d;
  d.rmse = j.at("rmse").get<double>();
  d.abs_rel = j.at("abs_rel").get<double>();
  d.delta1 = j.at("delta1").get<double>();
  d.delta2 = j.at("delta2").get<double>();
  d.delta3 = j.at("delta3").get<double>();
  d.valid_pixels = j.value("valid_pixels", std::size_t{0});
  return d;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

template <typename T>
DepthMetrics depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const MetricConfig& cfg) {
  return masked_depth_metrics(pred, gt, cfg, std::numeric_limits<double>::infinity());
}

template <typename T>
PsnrResult psnr(const Tensor<T>& pred, const Tensor<T>& gt, double peak, double cap_db) {
  require_same(pred, gt, "psnr");
  long double sq = 0;
  const auto p = pred.data();
  const auto g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double d = static_cast<long double>(p[i]) - g[i];
    sq += d * d;
  }
  const double mse = static_cast<double>(sq / static_cast<long double>(p.size()));
  if (mse == 0.0) return {cap_db, true};
  return {10.0 * std::log10(peak * peak / mse), false};
}

template <typename T>
double ssim_metric(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg) {
  NoGradGuard guard;
  return 1.0 - static_cast<double>(ssim_loss(pred, gt, cfg).item());
}

template <typename T>
RangedDepthMetrics ranged_depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                                        const MetricConfig& cfg) {
  RangedDepthMetrics r;
  try {
    r.c1 = masked_depth_metrics(pred, gt, cfg, cfg.c1_cap_m);
  } catch (const MetricError&) {
  }
  try {
    r.c2 = masked_depth_metrics(pred, gt, cfg, cfg.c2_cap_m);
  } catch (const MetricError&) {
  }
  return r;
}

template <typename T>
MetricReport aggregate_metrics(const std::vector<EvalPair<T>>& samples, const MetricConfig& cfg,
                               bool with_ranges) {
  cfg.validate();
  if (samples.empty()) throw MetricError("cannot evaluate an empty split");
  MetricReport rep;
  rep.sample_count = samples.size();
  const double n = static_cast<double>(samples.size());
  const bool depth = samples.front().depth_pred != nullptr;
  const bool aif = samples.front().aif_pred != nullptr;
  DepthMetrics dsum;
  double psum = 0.0, ssum = 0.0;
  RangedDepthMetrics rsum;
  std::size_t c1n = 0, c2n = 0;
  auto accumulate = [](DepthMetrics& acc, const DepthMetrics& m) {
    acc.rmse += m.rmse;
    acc.abs_rel += m.abs_rel;
    acc.delta1 += m.delta1;
    acc.delta2 += m.delta2;
    acc.delta3 += m.delta3;
    acc.valid_pixels += m.valid_pixels;
  };
  auto divide = [](DepthMetrics m, double k) {
    m.rmse /= k;
    m.abs_rel /= k;
    m.delta1 /= k;
    m.delta2 /= k;
    m.delta3 /= k;
    return m;
  };
  for (const auto& s : samples) {
    if (depth) {
      accumulate(dsum, depth_metrics(*s.depth_pred, *s.depth_gt, cfg));
      if (with_ranges) {
        const auto r = ranged_depth_metrics(*s.depth_pred, *s.depth_gt, cfg);
        if (r.c1) {
          if (!rsum.c1) rsum.c1 = DepthMetrics{};
          accumulate(*rsum.c1, *r.c1);
          ++c1n;
        }
        if (r.c2) {
          if (!rsum.c2) rsum.c2 = DepthMetrics{};
          accumulate(*rsum.c2, *r.c2);
          ++c2n;
        }
      }
    }
    if (aif) {
      const auto p = psnr(*s.aif_pred, *s.aif_gt, cfg.psnr_peak, cfg.psnr_cap_db);
      psum += p.db;
      rep.psnr_capped = rep.psnr_capped || p.exact;
      ssum += ssim_metric(*s.aif_pred, *s.aif_gt, cfg.ssim);
    }
  }
  if (depth) rep.depth = divide(dsum, n);
  if (depth && with_ranges) {
    RangedDepthMetrics r;
    if (rsum.c1) r.c1 = divide(*rsum.c1, static_cast<double>(c1n));
    if (rsum.c2) r.c2 = divide(*rsum.c2, static_cast<double>(c2n));
    rep.ranged = r;
  }
  if (aif) {
    rep.psnr_db = psum / n;
    rep.ssim = ssum / n;
  }
  rep.config = {{"delta_base", cfg.delta_base},   {"psnr_peak", cfg.psnr_peak},
                {"psnr_cap_db", cfg.psnr_cap_db}, {"c1_cap_m", cfg.c1_cap_m},
                {"c2_cap_m", cfg.c2_cap_m},       {"min_valid_depth", cfg.min_valid_depth},
                {"ssim_window", cfg.ssim.window}, {"ssim_sigma", cfg.ssim.sigma}};
  rep.timestamp = utc_timestamp();
  return rep;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["split"] = split;
  j["sample_count"] = sample_count;
  if (depth) j["depth"] = depth_json(*depth);
  if (psnr_db) j["psnr_db"] = *psnr_db;
  if (ssim) j["ssim"] = *ssim;
  j["psnr_capped"] = psnr_capped;
  if (ranged) {
    nlohmann::json r = nlohmann::json::object();
    if (ranged->c1) r["c1"] = depth_json(*ranged->c1);
    if (ranged->c2) r["c2"] = depth_json(*ranged->c2);
    j["ranged"] = r;
  }
  j["depth_masked"] = depth_masked;
  j["config"] = config;
  j["timestamp"] = timestamp;
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.split = j.value("split", "");
  r.sample_count = j.value("sample_count", std::size_t{0});
  if (j.contains("depth")) r.depth = depth_from_json(j["depth"]);
  if (j.contains("psnr_db")) r.psnr_db = j["psnr_db"].get<double>();
  if (j.contains("ssim")) r.ssim = j["ssim"].get<double>();
  r.psnr_capped = j.value("psnr_capped", false);
  if (j.contains("ranged")) {
    RangedDepthMetrics rd;
    if (j["ranged"].contains("c1")) rd.c1 = depth_from_json(j["ranged"]["c1"]);
    if (j["ranged"].contains("c2")) rd.c2 = depth_from_json(j["ranged"]["c2"]);
    r.ranged = rd;
  }
  r.depth_masked = j.value("depth_masked", true);
  r.config = j.value("config", nlohmann::json::object());
  r.timestamp = j.value("timestamp", "");
  return r;
}

std::string metric_csv_header() { return "RMSE,Abs-rel,delta1,delta2,delta3,PSNR,SSIM"; }

std::string metric_csv_row(const MetricReport& r) {
  std::ostringstream os;
  if (r.depth) {
    os << fmt(r.depth->rmse) << ',' << fmt(r.depth->abs_rel) << ',' << fmt(r.depth->delta1) << ','
       << fmt(r.depth->delta2) << ',' << fmt(r.depth->delta3);
  } else {
    os << ",,,,";
  }
  os << ',' << (r.psnr_db ? fmt(*r.psnr_db) : "") << ',' << (r.ssim ? fmt(*r.ssim) : "");
  return os.str();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

#define HDED_INSTANTIATE_METRICS(T)                                                               \
  template DepthMetrics depth_metrics(const Tensor<T>&, const Tensor<T>&, const MetricConfig&);   \
  template PsnrResult psnr(const Tensor<T>&, const Tensor<T>&, double, double);                   \
  template double ssim_metric(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);             \
  template RangedDepthMetrics ranged_depth_metrics(const Tensor<T>&, const Tensor<T>&,            \
                                                   const MetricConfig&);                          \
  template MetricReport aggregate_metrics(const std::vector<EvalPair<T>>&, const MetricConfig&,   \
                                          bool);

HDED_INSTANTIATE_METRICS(float)
HDED_INSTANTIATE_METRICS(double)

#undef HDED_INSTANTIATE_METRICS

}  // namespace hded
