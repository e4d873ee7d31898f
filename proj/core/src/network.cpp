#include "hded/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace hded {

std::string_view to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::both: return "both";
    case HeadMode::depth_only: return "depth_only";
    case HeadMode::deblur_only: return "deblur_only";
  }
  return "both";
}

HeadMode parse_head_mode(std::string_view name) {
  if (name == "both") return HeadMode::both;
  if (name == "depth_only") return HeadMode::depth_only;
  if (name == "deblur_only") return HeadMode::deblur_only;
  throw std::invalid_argument("unknown ablation mode '" + std::string(name) +
                              "' (expected both, depth_only or deblur_only)");
}

void ModelConfig::validate() const {
  if (channel_schedule.size() != kEncoderStages) {
    throw std::invalid_argument("model config: channel schedule needs exactly 5 stages, got " +
                                std::to_string(channel_schedule.size()));
  }
  for (auto c : channel_schedule) {
    if (c == 0) throw std::invalid_argument("model config: channel counts must be positive");
  }
  if (!(width_scale > 0.0 && width_scale <= 1.0)) {
    throw std::invalid_argument("model config: width_scale must lie in (0, 1], got " +
                                std::to_string(width_scale));
  }
  if (input_height == 0 || input_width == 0 || input_height % 32 || input_width % 32) {
    throw std::invalid_argument("model config: input size " + std::to_string(input_height) + "x" +
                                std::to_string(input_width) + " must be a positive multiple of 32");
  }
}

std::vector<std::size_t> ModelConfig::encoder_channels() const {
  std::vector<std::size_t> out;
  out.reserve(channel_schedule.size());
  for (auto c : channel_schedule) {
    const auto scaled = std::lround(static_cast<double>(c) * width_scale);
    out.push_back(static_cast<std::size_t>(std::max(1L, scaled)));
  }
  return out;
}

template <typename T>
Tensor<T> ConvUnit<T>::operator()(const Tensor<T>& x, NormMode mode) {
  Tensor<T> y = transposed ? conv_transpose2d(x, weight, bias, stride, padding)
                           : conv2d(x, weight, bias, stride, padding);
  if (!norm_relu) return y;
  return relu(batch_norm2d(y, gamma, beta, mode, bn));
}

namespace {

template <typename T>
class Builder {
 public:
  explicit Builder(std::uint64_t seed) : rng_(seed) {}

  ConvUnit<T> conv(std::string name, std::size_t cin, std::size_t cout, std::size_t k,
                   std::size_t stride, std::size_t padding, bool transposed, bool norm_relu) {
    ConvUnit<T> u;
    u.name = std::move(name);
    u.transposed = transposed;
    u.stride = stride;
    u.padding = padding;
    u.norm_relu = norm_relu;
    // Fan-in counts the taps that reach one output element.
    double fan_in = static_cast<double>(cin * k * k);
    if (transposed) fan_in /= static_cast<double>(stride * stride);
    const double gain = norm_relu ? 2.0 : 1.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    const Shape wshape = transposed ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
    std::vector<T> w(numel(wshape));
    for (auto& v : w) v = static_cast<T>(dist(rng_));
    u.weight = Tensor<T>(wshape, std::move(w));
    u.weight.set_requires_grad(true);
    u.bias = Tensor<T>(Shape{cout}, T{0});
    u.bias.set_requires_grad(true);
    if (norm_relu) {
      u.gamma = Tensor<T>(Shape{cout}, T{1});
      u.gamma.set_requires_grad(true);
      u.beta = Tensor<T>(Shape{cout}, T{0});
      u.beta.set_requires_grad(true);
      u.bn = BatchNormState<T>(cout);
    }
    return u;
  }

  DecoderHead<T> head(const std::string& prefix, const std::vector<std::size_t>& ch,
                      bool use_skips, std::size_t out_channels, std::size_t joint_channels) {
    DecoderHead<T> h;
    // Bottleneck at the deepest resolution, then four upsampling stages.
    DecoderStage<T> bottleneck{std::nullopt,
                               conv(prefix + ".dconv5.fuse", ch[4], ch[4], 3, 1, 1, false, true)};
    h.stages.push_back(std::move(bottleneck));
    for (std::size_t s = 4; s-- > 0;) {
      const std::string stage = prefix + ".dconv" + std::to_string(s + 1);
      DecoderStage<T> d{conv(stage + ".up", ch[s + 1], ch[s], 4, 2, 1, true, true),
                        conv(stage + ".fuse", use_skips ? 2 * ch[s] : ch[s], ch[s], 3, 1, 1, false,
                             true)};
      h.stages.push_back(std::move(d));
    }
    h.pred_up = conv(prefix + ".pred.up", ch[0], ch[0], 4, 2, 1, true, true);
    h.pred_out = conv(prefix + (joint_channels ? ".joint" : ".pred.out"), ch[0] + joint_channels,
                      out_channels, 3, 1, 1, false, false);
    if (joint_channels) {
      // The joint layer starts as a pass-through of the defocused input; the
      // decoder features enter once their weights move away from zero.
      auto w = h.pred_out.weight.data_mut();
      std::fill(w.begin(), w.end(), T{0});
      const std::size_t cin = ch[0] + joint_channels;
      for (std::size_t c = 0; c < std::min(out_channels, joint_channels); ++c) {
        w[((c * cin) + ch[0] + c) * 9 + 4] = T{1};
      }
    }
    return h;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
void collect(const ConvUnit<T>& u, std::vector<NamedTensor<T>>& params,
             std::vector<NamedTensor<T>>& buffers) {
  params.push_back({u.name + ".weight", u.weight});
  params.push_back({u.name + ".bias", u.bias});
  if (u.norm_relu) {
    params.push_back({u.name + ".bn.gamma", u.gamma});
    params.push_back({u.name + ".bn.beta", u.beta});
    buffers.push_back({u.name + ".bn.running_mean", u.bn.running_mean});
    buffers.push_back({u.name + ".bn.running_var", u.bn.running_var});
  }
}

template <typename T>
void collect(const DecoderHead<T>& h, std::vector<NamedTensor<T>>& params,
             std::vector<NamedTensor<T>>& buffers) {
  for (const auto& s : h.stages) {
    if (s.up) collect(*s.up, params, buffers);
    collect(s.fuse, params, buffers);
  }
  collect(h.pred_up, params, buffers);
  collect(h.pred_out, params, buffers);
}

}  // namespace

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  const auto ch = config.encoder_channels();
  Builder<T> b(seed);
  std::size_t in = 3;
  for (std::size_t s = 0; s < kEncoderStages; ++s) {
    const std::string stage = "enc.conv" + std::to_string(s + 1);
    EncoderStage<T> e;
    e.down = b.conv(stage + ".down", in, ch[s], 4, 2, 1, false, true);
    for (std::size_t l = 0; l < config.dense_block_layers; ++l) {
      e.dense.push_back(
          b.conv(stage + ".dense" + std::to_string(l), ch[s] * (l + 1), ch[s], 3, 1, 1, false, true));
    }
    m.encoder_.push_back(std::move(e));
    in = ch[s];
  }
  if (has_depth(config.heads)) m.depth_ = b.head("ded", ch, config.use_skips, 1, 0);
  if (has_deblur(config.heads)) m.aif_ = b.head("aifd", ch, config.use_skips, 3, 3);
  return m;
}

template <typename T>
EncoderFeatures<T> Model<T>::encode(const Tensor<T>& image) {
  const auto& s = image.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError("encode expects an [N,3,H,W] image, got " + to_string(s));
  }
  if (s[2] % 32 || s[3] % 32 || s[2] == 0 || s[3] == 0) {
    throw ShapeError("encode: input " + to_string(s) + " must have H and W divisible by 32");
  }
  EncoderFeatures<T> features;
  Tensor<T> x = image;
  for (std::size_t i = 0; i < kEncoderStages; ++i) {
    auto& stage = encoder_[i];
    Tensor<T> joined = stage.down(x, mode_);
    Tensor<T> last = joined;
    for (std::size_t l = 0; l < stage.dense.size(); ++l) {
      last = stage.dense[l](joined, mode_);
      if (l + 1 < stage.dense.size()) joined = concat_channels(joined, last);
    }
    features[i] = last;
    x = last;
  }
  return features;
}

template <typename T>
Tensor<T> Model<T>::run_decoder(DecoderHead<T>& head, const EncoderFeatures<T>& f) {
  const auto ch = config_.encoder_channels();
  for (std::size_t i = 0; i < kEncoderStages; ++i) {
    if (!f[i].defined() || f[i].rank() != 4 || f[i].dim(1) != ch[i]) {
      throw ShapeError("decoder: encoder feature " + std::to_string(i + 1) +
                       " does not match the model configuration");
    }
  }
  Tensor<T> x = head.stages[0].fuse(f[4], mode_);
  for (std::size_t s = 1; s < head.stages.size(); ++s) {
    auto& stage = head.stages[s];
    Tensor<T> up = (*stage.up)(x, mode_);
    const auto& skip = f[4 - s];
    x = stage.fuse(config_.use_skips ? concat_channels(up, skip) : up, mode_);
  }
  return head.pred_up(x, mode_);
}

template <typename T>
Tensor<T> Model<T>::decode_depth(const EncoderFeatures<T>& features) {
  if (!depth_) throw std::logic_error("model has no depth head");
  Tensor<T> x = run_decoder(*depth_, features);
  return depth_->pred_out(x, mode_);
}

template <typename T>
Tensor<T> Model<T>::decode_aif(const EncoderFeatures<T>& features, const Tensor<T>& defocused) {
  if (!aif_) throw std::logic_error("model has no deblurring head");
  Tensor<T> x = run_decoder(*aif_, features);
  if (defocused.rank() != 4 || defocused.dim(1) != 3) {
    throw ShapeError("decode_aif expects an [N,3,H,W] defocused input, got " +
                     to_string(defocused.shape()));
  }
  return aif_->pred_out(concat_channels(x, defocused), mode_);
}

template <typename T>
Prediction<T> Model<T>::forward(const Tensor<T>& image) {
  const auto features = encode(image);
  Prediction<T> p;
  if (depth_) p.depth = decode_depth(features);
  if (aif_) p.aif = decode_aif(features, image);
  return p;
}

template <typename T>
void Model<T>::remove_head(HeadMode keep) {
  if (!has_depth(keep)) depth_.reset();
  if (!has_deblur(keep)) aif_.reset();
  config_.heads = depth_ && aif_ ? HeadMode::both
                                 : (depth_ ? HeadMode::depth_only : HeadMode::deblur_only);
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() const {
  std::vector<NamedTensor<T>> params, buffers;
  for (const auto& e : encoder_) {
    collect(e.down, params, buffers);
    for (const auto& d : e.dense) collect(d, params, buffers);
  }
  if (depth_) collect(*depth_, params, buffers);
  if (aif_) collect(*aif_, params, buffers);
  return params;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::buffers() const {
  std::vector<NamedTensor<T>> params, buffers;
  for (const auto& e : encoder_) {
    collect(e.down, params, buffers);
    for (const auto& d : e.dense) collect(d, params, buffers);
  }
  if (depth_) collect(*depth_, params, buffers);
  if (aif_) collect(*aif_, params, buffers);
  return buffers;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameter_tensors() const {
  std::vector<Tensor<T>> out;
  for (auto& p : parameters()) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::size_t Model<T>::count_params() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.clear_grad();
}

template struct ConvUnit<float>;
template struct ConvUnit<double>;
template class Model<float>;
template class Model<double>;

}  // namespace hded
