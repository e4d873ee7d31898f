#include "hded/optim.hpp"

#include <stdexcept>
#include <string>

namespace hded {

void OptimSettings::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("momentum must lie in [0, 1), got " + std::to_string(momentum));
  }
  if (decay_epoch < 0) throw std::invalid_argument("decay epoch must be non-negative");
  if (!(decay_factor > 0.0)) throw std::invalid_argument("decay factor must be positive");
}

template <typename T>
OptimState<T>::OptimState(OptimSettings settings) : settings_(settings) {
  settings_.validate();
}

template <typename T>
void OptimState<T>::step(std::span<Tensor<T>> params, int epoch) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
  } else if (velocity_.size() != params.size()) {
    throw ShapeError("sgd_step: optimizer state tracks " + std::to_string(velocity_.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  const T lr = static_cast<T>(effective_lr(epoch));
  const T mom = static_cast<T>(settings_.momentum);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = params[p];
    if (!param.has_grad()) continue;
    auto& v = velocity_[p];
    if (v.empty()) {
      v.assign(param.numel(), T{0});
    } else if (v.size() != param.numel()) {
      throw ShapeError("sgd_step: velocity/parameter size mismatch for shape " +
                       to_string(param.shape()));
    }
    const auto g = param.grad();
    auto w = param.data_mut();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mom * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

template class OptimState<float>;
template class OptimState<double>;

}  // namespace hded
