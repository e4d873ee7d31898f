#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hded/ops.hpp"
#include "hded/tensor.hpp"

namespace hded {

/// Which decoder heads a model carries.
enum class HeadMode { both, depth_only, deblur_only };

std::string_view to_string(HeadMode mode);
HeadMode parse_head_mode(std::string_view name);

inline bool has_depth(HeadMode m) { return m != HeadMode::deblur_only; }
inline bool has_deblur(HeadMode m) { return m != HeadMode::depth_only; }

inline constexpr std::size_t kEncoderStages = 5;

struct ModelConfig {
  std::size_t input_height = 256;
  std::size_t input_width = 256;
  std::vector<std::size_t> channel_schedule{64, 128, 256, 512, 1024};
  double width_scale = 1.0;
  std::size_t dense_block_layers = 2;
  bool use_skips = true;
  HeadMode heads = HeadMode::both;

  void validate() const;
  /// channel_schedule * width_scale, rounded, at least 1.
  std::vector<std::size_t> encoder_channels() const;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// One conv (or transposed conv), optionally followed by batch norm + ReLU.
template <typename T>
struct ConvUnit {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;
  bool transposed = false;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool norm_relu = true;
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> bn;

  Tensor<T> operator()(const Tensor<T>& x, NormMode mode);
};

template <typename T>
struct EncoderStage {
  ConvUnit<T> down;               // 4x4 stride-2
  std::vector<ConvUnit<T>> dense;  // 3x3, each fed the concat of all earlier stage outputs
};

template <typename T>
struct DecoderStage {
  std::optional<ConvUnit<T>> up;  // 4x4 stride-2 transposed; absent for the bottleneck
  ConvUnit<T> fuse;               // 3x3 after the skip concat
};

template <typename T>
struct DecoderHead {
  std::vector<DecoderStage<T>> stages;  // deepest (8x8 at 256 input) first
  ConvUnit<T> pred_up;
  ConvUnit<T> pred_out;  // linear
};

template <typename T>
using EncoderFeatures = std::array<Tensor<T>, kEncoderStages>;

template <typename T>
struct Prediction {
  std::optional<Tensor<T>> depth;  // [N,1,H,W]
  std::optional<Tensor<T>> aif;    // [N,3,H,W]
};

/// Shared dense-style encoder with a depth decoder and an all-in-focus decoder.
template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  NormMode mode() const { return mode_; }
  void set_mode(NormMode mode) { mode_ = mode; }

  bool has_depth_head() const { return depth_.has_value(); }
  bool has_aif_head() const { return aif_.has_value(); }

  EncoderFeatures<T> encode(const Tensor<T>& image);
  Tensor<T> decode_depth(const EncoderFeatures<T>& features);
  Tensor<T> decode_aif(const EncoderFeatures<T>& features, const Tensor<T>& defocused);
  Prediction<T> forward(const Tensor<T>& image);

  /// Drops a head and its parameters; the other head's outputs are unaffected.
  void remove_head(HeadMode keep);

  /// Trainable tensors in registration order; names are unique and stable.
  std::vector<NamedTensor<T>> parameters() const;
  /// Batch-norm running statistics.
  std::vector<NamedTensor<T>> buffers() const;
  std::vector<Tensor<T>> parameter_tensors() const;
  std::size_t count_params() const;
  void zero_grad();

  const std::vector<EncoderStage<T>>& encoder() const { return encoder_; }
  const std::optional<DecoderHead<T>>& depth_head() const { return depth_; }
  const std::optional<DecoderHead<T>>& aif_head() const { return aif_; }
  std::optional<DecoderHead<T>>& aif_head() { return aif_; }

 private:
  Model() = default;
  Tensor<T> run_decoder(DecoderHead<T>& head, const EncoderFeatures<T>& features);

  ModelConfig config_;
  NormMode mode_ = NormMode::train;
  std::vector<EncoderStage<T>> encoder_;
  std::optional<DecoderHead<T>> depth_;
  std::optional<DecoderHead<T>> aif_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace hded
