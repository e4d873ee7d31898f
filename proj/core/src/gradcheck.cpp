#include "hded/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <algorithm>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "hded/losses.hpp"
#include "hded/ops.hpp"

namespace hded {
namespace {

using Inputs = std::vector<TensorD>;

struct Case {
  std::string name;
  std::function<Inputs(std::mt19937_64&)> sample;
  std::function<TensorD(const Inputs&)> fn;
  // Rejects inputs that sit too close to a kink of a piecewise-smooth op.
  std::function<bool(const Inputs&)> valid;
};

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

TensorD normal(std::mt19937_64& rng, Shape shape, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return TensorD(std::move(shape), std::move(v));
}

TensorD uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return TensorD(std::move(shape), std::move(v));
}

constexpr double kKinkMargin = 1e-3;

bool away_from_zero(const TensorD& t) {
  for (double v : t.data()) {
    if (std::abs(v) < kKinkMargin) return false;
  }
  return true;
}

// Residual and both of its forward differences stay clear of zero.
bool smooth_residual(const TensorD& pred, const TensorD& gt, bool diffs) {
  NoGradGuard guard;
  const auto r = sub(pred, gt);
  if (!away_from_zero(r)) return false;
  if (!diffs) return true;
  const auto d = spatial_diff(r);
  return away_from_zero(d.dx) && away_from_zero(d.dy);
}

// Image pairs whose residual stays at least 0.02 from zero: with eps = 1e-3 the
// Charbonnier curvature near a zero residual swamps any finite-difference step.
Inputs offset_pair(std::mt19937_64& rng, const Shape& s) {
  TensorD pred = uniform(rng, s, 0.0, 1.0);
  TensorD gt = uniform(rng, s, 0.02, 0.3);
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const double off = gt.data()[i];
    gt.data_mut()[i] = pred.data()[i] + ((rng() & 1) ? off : -off);
  }
  return {pred, gt};
}

Shape image_shape(std::mt19937_64& rng, std::size_t channels, std::size_t lo, std::size_t hi) {
  return {pick(rng, 1, 2), channels, pick(rng, lo, hi), pick(rng, lo, hi)};
}

std::vector<Case> build_cases() {
  std::vector<Case> cases;

  // Convolutions: stride 1 and 2, with and without padding and bias.
  struct ConvGeo {
    const char* tag;
    std::size_t k, stride, pad;
    bool bias;
  };
  for (const ConvGeo g : {ConvGeo{"k3s1p1", 3, 1, 1, true}, ConvGeo{"k3s1p0_nobias", 3, 1, 0, false},
                          ConvGeo{"k4s2p1", 4, 2, 1, true}, ConvGeo{"k3s2p1", 3, 2, 1, true}}) {
    cases.push_back({std::string("conv2d.") + g.tag,
                     [g](std::mt19937_64& rng) {
                       const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                       Inputs in{normal(rng, image_shape(rng, cin, 4, 7)), normal(rng, {cout, cin, g.k, g.k})};
                       if (g.bias) in.push_back(normal(rng, {cout}));
                       return in;
                     },
                     [g](const Inputs& in) {
                       return conv2d(in[0], in[1], in.size() > 2 ? in[2] : TensorD{}, g.stride, g.pad);
                     },
                     nullptr});
    cases.push_back({std::string("conv_transpose2d.") + g.tag,
                     [g](std::mt19937_64& rng) {
                       const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                       Inputs in{normal(rng, image_shape(rng, cin, 2, 5)), normal(rng, {cin, cout, g.k, g.k})};
                       if (g.bias) in.push_back(normal(rng, {cout}));
                       return in;
                     },
                     [g](const Inputs& in) {
                       return conv_transpose2d(in[0], in[1], in.size() > 2 ? in[2] : TensorD{}, g.stride, g.pad);
                     },
                     nullptr});
  }

  for (auto mode : {NormMode::train, NormMode::eval}) {
    cases.push_back({mode == NormMode::train ? "batch_norm2d.train" : "batch_norm2d.eval",
                     [](std::mt19937_64& rng) {
                       const std::size_t c = pick(rng, 1, 3);
                       return Inputs{normal(rng, image_shape(rng, c, 2, 4), 2.0), uniform(rng, {c}, 0.5, 1.5),
                                     normal(rng, {c})};
                     },
                     [mode](const Inputs& in) {
                       BatchNormState<double> st(in[1].numel());
                       for (std::size_t i = 0; i < in[1].numel(); ++i) {
                         st.running_mean.data_mut()[i] = 0.1 * static_cast<double>(i);
                         st.running_var.data_mut()[i] = 0.5 + static_cast<double>(i);
                       }
                       return batch_norm2d(in[0], in[1], in[2], mode, st);
                     },
                     nullptr});
  }

  auto unary = [&](std::string name, std::function<TensorD(const TensorD&)> f, bool kink) {
    cases.push_back({std::move(name),
                     [](std::mt19937_64& rng) { return Inputs{normal(rng, image_shape(rng, 2, 2, 4))}; },
                     [f](const Inputs& in) { return f(in[0]); },
                     kink ? std::function<bool(const Inputs&)>([](const Inputs& in) { return away_from_zero(in[0]); })
                          : nullptr});
  };
  unary("relu", [](const TensorD& x) { return relu(x); }, true);
  unary("abs", [](const TensorD& x) { return abs(x); }, true);
  unary("square", [](const TensorD& x) { return square(x); }, false);
  unary("scale", [](const TensorD& x) { return scale(x, -1.7); }, false);
  unary("add_scalar", [](const TensorD& x) { return add_scalar(x, 0.3); }, false);
  unary("reduce_sum", [](const TensorD& x) { return reduce_sum(x); }, false);
  unary("reduce_mean", [](const TensorD& x) { return reduce_mean(x); }, false);
  unary("reshape", [](const TensorD& x) { return reshape(x, Shape{x.numel()}); }, false);
  unary("spatial_diff.dx", [](const TensorD& x) { return spatial_diff(x).dx; }, false);
  unary("spatial_diff.dy", [](const TensorD& x) { return spatial_diff(x).dy; }, false);
  cases.push_back({"sqrt_shifted",
                   [](std::mt19937_64& rng) { return Inputs{uniform(rng, image_shape(rng, 2, 2, 4), -0.5, 2.0)}; },
                   [](const Inputs& in) { return sqrt_shifted(in[0], 0.6); }, nullptr});

  auto binary = [&](std::string name, std::function<TensorD(const TensorD&, const TensorD&)> f, bool positive_b) {
    cases.push_back({std::move(name),
                     [positive_b](std::mt19937_64& rng) {
                       const Shape s = image_shape(rng, 2, 2, 4);
                       TensorD b = positive_b ? uniform(rng, s, 0.5, 2.0) : normal(rng, s);
                       if (positive_b) {
                         for (auto& v : b.data_mut()) v = (rng() & 1) ? v : -v;
                       }
                       return Inputs{normal(rng, s), b};
                     },
                     [f](const Inputs& in) { return f(in[0], in[1]); }, nullptr});
  };
  binary("add", [](const TensorD& a, const TensorD& b) { return add(a, b); }, false);
  binary("sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); }, false);
  binary("mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); }, false);
  binary("div", [](const TensorD& a, const TensorD& b) { return div(a, b); }, true);
  cases.push_back({"concat_channels",
                   [](std::mt19937_64& rng) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                     return Inputs{normal(rng, {n, pick(rng, 1, 3), h, w}), normal(rng, {n, pick(rng, 1, 3), h, w})};
                   },
                   [](const Inputs& in) { return concat_channels(in[0], in[1]); }, nullptr});

  // Losses. Depth maps are single-channel; images are 3-channel and large
  // enough for the 11x11 SSIM window.
  const LossWeights w;
  const SsimConfig ssim;
  auto depth_pair = [](std::mt19937_64& rng) {
    const Shape s = image_shape(rng, 1, 4, 7);
    return Inputs{uniform(rng, s, 0.0, 1.0), uniform(rng, s, 0.0, 1.0)};
  };
  auto image_pair = [](std::mt19937_64& rng) {
    const Shape s = {pick(rng, 1, 2), 3, pick(rng, 11, 13), pick(rng, 11, 13)};
    return offset_pair(rng, s);
  };
  auto plain_residual = [](const Inputs& in) { return smooth_residual(in[0], in[1], false); };
  auto diff_residual = [](const Inputs& in) { return smooth_residual(in[0], in[1], true); };

  cases.push_back({"loss.l1_depth", depth_pair, [](const Inputs& in) { return l1_depth(in[0], in[1]); }, plain_residual});
  cases.push_back({"loss.grad_smooth", depth_pair, [](const Inputs& in) { return grad_smooth(in[0], in[1]); }, diff_residual});
  cases.push_back({"loss.depth", depth_pair, [w](const Inputs& in) { return depth_loss(in[0], in[1], w); }, diff_residual});
  cases.push_back({"loss.charbonnier", image_pair,
                   [w](const Inputs& in) { return charbonnier(in[0], in[1], w.eps_charb); }, nullptr});
  cases.push_back({"loss.l1_image", image_pair, [](const Inputs& in) { return l1_image(in[0], in[1]); }, plain_residual});
  cases.push_back({"loss.ssim", image_pair, [ssim](const Inputs& in) { return ssim_loss(in[0], in[1], ssim); }, nullptr});
  cases.push_back({"loss.deblur", image_pair,
                   [w, ssim](const Inputs& in) { return deblur_loss(in[0], in[1], w, ssim); }, nullptr});

  for (auto variant : kAllLossVariants) {
    for (auto heads : {HeadMode::both, HeadMode::depth_only, HeadMode::deblur_only}) {
      if (heads != HeadMode::both && variant != LossVariant::l1grad_charb_ssim) continue;
      std::string name = "loss.total." + std::string(to_string(variant));
      if (heads != HeadMode::both) name += "." + std::string(to_string(heads));
      cases.push_back({name,
                       [](std::mt19937_64& rng) {
                         const std::size_t n = pick(rng, 1, 2), h = pick(rng, 11, 12), wd = pick(rng, 11, 12);
                         auto images = offset_pair(rng, {n, 3, h, wd});
                         return Inputs{uniform(rng, {n, 1, h, wd}, 0.0, 1.0), uniform(rng, {n, 1, h, wd}, 0.0, 1.0),
                                       images[0], images[1]};
                       },
                       [w, variant, heads, ssim](const Inputs& in) {
                         return total_loss(&in[0], &in[1], &in[2], &in[3], w, variant, heads, ssim).total;
                       },
                       [](const Inputs& in) {
                         return smooth_residual(in[0], in[1], true) && smooth_residual(in[2], in[3], false);
                       }});
    }
  }
  return cases;
}

double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

GradCheckCase check(const Case& c, const GradCheckOptions& opt, std::mt19937_64& rng) {
  GradCheckCase result;
  result.name = c.name;
  for (std::size_t inst = 0; inst < opt.instances; ++inst) {
    Inputs inputs = c.sample(rng);
    for (int tries = 0; c.valid && !c.valid(inputs); ++tries) {
      if (tries > 1000) throw std::runtime_error("gradcheck: cannot sample smooth inputs for " + c.name);
      inputs = c.sample(rng);
    }
    // Project the output on a fixed random direction so every op reduces to a scalar.
    TensorD probe;
    {
      NoGradGuard guard;
      probe = normal(rng, c.fn(inputs).shape());
    }
    auto value = [&]() {
      NoGradGuard guard;
      return inner(c.fn(inputs), probe);
    };

    reset_tape<double>();
    Inputs leaves;
    for (const auto& t : inputs) leaves.push_back(t.clone().set_requires_grad(true));
    const auto out = c.fn(leaves);
    backward(reduce_sum(mul(out, probe)));
    std::vector<std::vector<double>> analytic;
    for (const auto& l : leaves) {
      analytic.emplace_back(l.has_grad() ? std::vector<double>(l.grad().begin(), l.grad().end())
                                         : std::vector<double>(l.numel(), 0.0));
    }
    reset_tape<double>();

    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto data = inputs[k].data_mut();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + opt.step;
        const double plus = value();
        data[i] = saved - opt.step;
        const double minus = value();
        data[i] = saved;
        const double numeric = (plus - minus) / (2.0 * opt.step);
        const double e = relative_error(analytic[k][i], numeric, opt.abs_floor);
        result.max_error = std::max(result.max_error, e);
        ++result.checked;
      }
    }
    ++result.instances;
  }
  result.passed = result.max_error <= opt.tolerance;
  return result;
}

}  // namespace

bool GradCheckReport::passed() const {
  for (const auto& c : cases) {
    if (!c.passed) return false;
  }
  return !cases.empty();
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& c : cases) m = std::max(m, c.max_error);
  return m;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["tolerance"] = tolerance;
  j["passed"] = passed();
  j["max_error"] = max_error();
  j["seconds"] = seconds;
  for (const auto& c : cases) {
    j["cases"].push_back({{"name", c.name}, {"instances", c.instances}, {"checked", c.checked},
                          {"max_error", c.max_error}, {"passed", c.passed}});
  }
  return j;
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  char line[160];
  for (const auto& c : cases) {
    std::snprintf(line, sizeof line, "%-44s %2zu inst %6zu entries  max rel err %.3e  %s\n", c.name.c_str(),
                  c.instances, c.checked, c.max_error, c.passed ? "PASS" : "FAIL");
    os << line;
  }
  std::snprintf(line, sizeof line, "%zu cases, tolerance %.1e, worst %.3e, %.1f s: %s\n", cases.size(), tolerance,
                max_error(), seconds, passed() ? "PASS" : "FAIL");
  os << line;
  return os.str();
}

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& c : build_cases()) names.push_back(c.name);
  return names;
}

GradCheckReport run_gradcheck(const GradCheckOptions& options) {
  if (options.instances == 0) throw std::invalid_argument("gradcheck needs at least one instance per case");
  if (!(options.step > 0.0)) throw std::invalid_argument("gradcheck step must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  for (const auto& c : build_cases()) {
    if (!options.only.empty() && c.name.find(options.only) == std::string::npos) continue;
    report.cases.push_back(check(c, options, rng));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace hded
