#pragma once

#include <span>
#include <vector>

#include "hded/tensor.hpp"

namespace hded {

struct OptimSettings {
  double learning_rate = 2e-4;
  double momentum = 0.9;
  int decay_epoch = 300;
  double decay_factor = 0.1;

  // Learning rate in effect during `epoch` (0-based): the base rate before
  // decay_epoch, base * decay_factor from decay_epoch on.
  double effective_lr(int epoch) const {
    return epoch >= decay_epoch ? learning_rate * decay_factor : learning_rate;
  }

  void validate() const;
};

/// SGD with classical momentum: v <- momentum * v + g; w <- w - lr(epoch) * v.
template <typename T>
class OptimState {
 public:
  explicit OptimState(OptimSettings settings = {});

  const OptimSettings& settings() const { return settings_; }
  double effective_lr(int epoch) const { return settings_.effective_lr(epoch); }

  /// Parameters without a gradient buffer are left untouched, velocity included.
  void step(std::span<Tensor<T>> params, int epoch);

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  OptimSettings settings_;
  std::vector<std::vector<T>> velocity_;
};

template <typename T>
void sgd_step(std::span<Tensor<T>> params, OptimState<T>& state, int epoch) {
  state.step(params, epoch);
}

extern template class OptimState<float>;
extern template class OptimState<double>;

}  // namespace hded
