#include "hded/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace hded {

void LossWeights::validate() const {
  if (!(mu > 0.0 && psi > 0.0 && lambda > 0.0 && eps_charb > 0.0)) {
    throw std::invalid_argument("loss weights mu, psi, lambda and eps_charb must be positive");
  }
}

void SsimConfig::validate() const {
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("SSIM window must be odd");
  if (!(sigma > 0.0 && k1 > 0.0 && k2 > 0.0 && dynamic_range > 0.0)) {
    throw std::invalid_argument("SSIM sigma, k1, k2 and dynamic range must be positive");
  }
}

std::vector<double> ssim_window(const SsimConfig& cfg) {
  cfg.validate();
  const long r = static_cast<long>(cfg.window / 2);
  std::vector<double> g(cfg.window);
  double sum = 0.0;
  for (long i = -r; i <= r; ++i) {
    g[i + r] = std::exp(-static_cast<double>(i * i) / (2.0 * cfg.sigma * cfg.sigma));
    sum += g[i + r];
  }
  for (auto& v : g) v /= sum;
  std::vector<double> w(cfg.window * cfg.window);
  for (std::size_t i = 0; i < cfg.window; ++i) {
    for (std::size_t j = 0; j < cfg.window; ++j) w[i * cfg.window + j] = g[i] * g[j];
  }
  return w;
}

std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::l1_charb: return "l1+charb";
    case LossVariant::l1_l1: return "l1+l1";
    case LossVariant::l1grad_charb: return "l1grad+charb";
    case LossVariant::l1_charb_ssim: return "l1+charb_ssim";
    case LossVariant::l1grad_charb_ssim: return "l1grad+charb_ssim";
  }
  return "l1grad+charb_ssim";
}

LossVariant parse_loss_variant(std::string_view name) {
  for (auto v : kAllLossVariants) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown loss variant '" + std::string(name) +
                              "' (expected l1+charb, l1+l1, l1grad+charb, l1+charb_ssim or "
                              "l1grad+charb_ssim)");
}

std::string_view formula(LossVariant v) {
  switch (v) {
    case LossVariant::l1_charb: return "L1_depth + lambda*L_charb";
    case LossVariant::l1_l1: return "L1_depth + lambda*L1_deblur";
    case LossVariant::l1grad_charb: return "(L1_depth + mu*L_grad) + lambda*L_charb";
    case LossVariant::l1_charb_ssim: return "L1_depth + lambda*(L_charb + psi*(1-SSIM))";
    case LossVariant::l1grad_charb_ssim:
      return "(L1_depth + mu*L_grad) + lambda*(L_charb + psi*(1-SSIM))";
  }
  return "";
}

namespace {

template <typename T>
void require_match(const Tensor<T>& pred, const Tensor<T>& gt, std::size_t channels, const char* what) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(what) + ": dimension mismatch between prediction " +
                     to_string(pred.shape()) + " and target " + to_string(gt.shape()));
  }
  if (pred.rank() != 4 || (channels && pred.dim(1) != channels)) {
    throw ShapeError(std::string(what) + ": expected [N," + std::to_string(channels) +
                     ",H,W], got " + to_string(pred.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> l1_depth(const Tensor<T>& pred, const Tensor<T>& gt) {
  require_match(pred, gt, 1, "l1_depth");
  return reduce_mean(abs(sub(pred, gt)));
}

template <typename T>
Tensor<T> grad_smooth(const Tensor<T>& pred, const Tensor<T>& gt) {
  require_match(pred, gt, 1, "grad_smooth");
  const auto residual = sub(pred, gt);
  const auto d = spatial_diff(residual);
  const auto total = add(reduce_sum(abs(d.dx)), reduce_sum(abs(d.dy)));
  return scale(total, static_cast<T>(1.0 / static_cast<double>(pred.numel())));
}

template <typename T>
Tensor<T> depth_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w) {
  return add(l1_depth(pred, gt), scale(grad_smooth(pred, gt), static_cast<T>(w.mu)));
}

template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& gt, double eps) {
  require_match(pred, gt, 0, "charbonnier");
  const T e = static_cast<T>(eps);
  return reduce_mean(sqrt_shifted(square(sub(pred, gt)), e * e));
}

template <typename T>
Tensor<T> l1_image(const Tensor<T>& pred, const Tensor<T>& gt) {
  require_match(pred, gt, 0, "l1_image");
  return reduce_mean(abs(sub(pred, gt)));
}

template <typename T>
Tensor<T> ssim_mean(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg) {
  require_match(pred, gt, 0, "ssim");
  const auto& s = pred.shape();
  if (s[2] < cfg.window || s[3] < cfg.window) {
    throw ShapeError("ssim: image " + to_string(s) + " smaller than the " +
                     std::to_string(cfg.window) + "x" + std::to_string(cfg.window) + " window");
  }
  const auto wd = ssim_window(cfg);
  Tensor<T> window(Shape{1, 1, cfg.window, cfg.window});
  for (std::size_t i = 0; i < wd.size(); ++i) window.data_mut()[i] = static_cast<T>(wd[i]);
  const Tensor<T> none;

  // Channels become batch entries so one single-channel window serves all.
  const Shape planes{s[0] * s[1], 1, s[2], s[3]};
  const auto x = reshape(pred, planes);
  const auto y = reshape(gt, planes);
  auto filt = [&](const Tensor<T>& t) { return conv2d(t, window, none, 1, 0); };
  const auto mu_x = filt(x);
  const auto mu_y = filt(y);
  const auto mu_xx = mul(mu_x, mu_x);
  const auto mu_yy = mul(mu_y, mu_y);
  const auto mu_xy = mul(mu_x, mu_y);
  const auto var_x = sub(filt(square(x)), mu_xx);
  const auto var_y = sub(filt(square(y)), mu_yy);
  const auto cov = sub(filt(mul(x, y)), mu_xy);

  const T c1 = static_cast<T>(cfg.c1());
  const T c2 = static_cast<T>(cfg.c2());
  const auto num = mul(add_scalar(scale(mu_xy, T{2}), c1), add_scalar(scale(cov, T{2}), c2));
  const auto den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
  return reduce_mean(div(num, den));
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& gt, const SsimConfig& cfg) {
  return add_scalar(scale(ssim_mean(pred, gt, cfg), T{-1}), T{1});
}

template <typename T>
Tensor<T> deblur_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w,
                      const SsimConfig& cfg) {
  return add(charbonnier(pred, gt, w.eps_charb), scale(ssim_loss(pred, gt, cfg), static_cast<T>(w.psi)));
}

template <typename T>
LossResult<T> total_loss(const Tensor<T>* depth_pred, const Tensor<T>* depth_gt,
                         const Tensor<T>* aif_pred, const Tensor<T>* aif_gt, const LossWeights& w,
                         LossVariant variant, HeadMode heads, const SsimConfig& ssim) {
  w.validate();
  LossResult<T> r;
  auto& c = r.components;
  Tensor<T> depth_term, deblur_term;

  if (has_depth(heads)) {
    if (!depth_pred || !depth_gt) throw std::invalid_argument("total_loss: depth head output missing");
    const bool smooth = variant == LossVariant::l1grad_charb || variant == LossVariant::l1grad_charb_ssim;
    const auto l1 = l1_depth(*depth_pred, *depth_gt);
    c.l1_depth = l1.item();
    depth_term = l1;
    if (smooth) {
      const auto g = grad_smooth(*depth_pred, *depth_gt);
      c.grad_smooth = g.item();
      depth_term = add(l1, scale(g, static_cast<T>(w.mu)));
    }
    c.depth = depth_term.item();
  }

  if (has_deblur(heads)) {
    if (!aif_pred || !aif_gt) throw std::invalid_argument("total_loss: deblurring head output missing");
    if (variant == LossVariant::l1_l1) {
      deblur_term = l1_image(*aif_pred, *aif_gt);
      c.l1_deblur = deblur_term.item();
    } else {
      const auto ch = charbonnier(*aif_pred, *aif_gt, w.eps_charb);
      c.charbonnier = ch.item();
      deblur_term = ch;
      if (variant == LossVariant::l1_charb_ssim || variant == LossVariant::l1grad_charb_ssim) {
        const auto s = ssim_loss(*aif_pred, *aif_gt, ssim);
        c.ssim_loss = s.item();
        deblur_term = add(ch, scale(s, static_cast<T>(w.psi)));
      }
    }
    c.deblur = deblur_term.item();
  }

  switch (heads) {
    case HeadMode::both: r.total = add(depth_term, scale(deblur_term, static_cast<T>(w.lambda))); break;
    case HeadMode::depth_only: r.total = depth_term; break;
    case HeadMode::deblur_only: r.total = deblur_term; break;
  }
  c.total = r.total.item();
  return r;
}

#define HDED_INSTANTIATE_LOSSES(T)                                                               \
  template Tensor<T> l1_depth(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> grad_smooth(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> depth_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&);         \
  template Tensor<T> charbonnier(const Tensor<T>&, const Tensor<T>&, double);                    \
  template Tensor<T> l1_image(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> ssim_mean(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);           \
  template Tensor<T> ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);           \
  template Tensor<T> deblur_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&,         \
                                 const SsimConfig&);                                             \
  template LossResult<T> total_loss(const Tensor<T>*, const Tensor<T>*, const Tensor<T>*,        \
                                    const Tensor<T>*, const LossWeights&, LossVariant, HeadMode, \
                                    const SsimConfig&);

HDED_INSTANTIATE_LOSSES(float)
HDED_INSTANTIATE_LOSSES(double)

#undef HDED_INSTANTIATE_LOSSES

}  // namespace hded
