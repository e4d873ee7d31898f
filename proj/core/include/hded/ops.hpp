#pragma once

#include <string_view>
#include <utility>
#include <vector>

#include "hded/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the current
// thread's tape when any input requires a gradient and recording is enabled.
namespace hded {

/// Cross-correlation (no kernel flip). input [N,Cin,H,W], weight [Cout,Cin,kh,kw],
/// bias [Cout] or undefined. Output extent floor((H + 2p - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// Adjoint of conv2d with the same geometry. input [N,Cin,H,W], weight [Cin,Cout,kh,kw].
/// Output extent (H - 1) * stride - 2p + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride, std::size_t padding);

enum class NormMode { train, eval };

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Per-channel normalization over N,H,W. Train mode uses batch statistics and
/// updates `state` (running variance is the unbiased estimate); eval mode uses
/// the running statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       NormMode mode, BatchNormState<T>& state);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
/// sqrt(x + c); throws DomainError if x + c < 0 anywhere.
template <typename T> Tensor<T> sqrt_shifted(const Tensor<T>& x, T c);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T s);
/// Joins [N,Ca,H,W] and [N,Cb,H,W] into [N,Ca+Cb,H,W].
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> reduce_sum(const Tensor<T>& x);
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
struct SpatialDiff {
  Tensor<T> dx;  // [N,C,H,W-1], x[i][j+1] - x[i][j]
  Tensor<T> dy;  // [N,C,H-1,W], x[i+1][j] - x[i][j]
};

template <typename T> SpatialDiff<T> spatial_diff(const Tensor<T>& x);

/// Tape node kinds the ops above record (targets for set_backward_fault).
std::vector<std::string_view> recorded_op_kinds();

/// Sum of element-wise products (not recorded).
template <typename T> double inner(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace hded
