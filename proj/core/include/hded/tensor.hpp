#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hded {

using Shape = std::vector<std::size_t>;

enum class ElemType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr ElemType elem_type_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? ElemType::f32 : ElemType::f64;
}

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Raised when a training quantity becomes NaN/Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::int64_t node = -1;
  std::uint64_t generation = 0;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = TensorStorage<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);
  explicit Tensor(std::shared_ptr<Storage> storage) : storage_(std::move(storage)) {}

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return storage().data.size(); }

  std::span<const T> data() const { return storage().data; }
  std::span<T> data_mut() { return storage().data; }
  T item() const;

  // NCHW element access (rank-4 tensors only).
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);

  bool requires_grad() const { return storage().requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !storage().grad.empty(); }
  std::span<const T> grad() const;
  std::span<T> grad_mut();  // allocates a zero buffer on first use
  void zero_grad();
  void clear_grad() { storage().grad.clear(); }

  bool is_leaf() const { return storage().node < 0; }
  bool on_tape() const;
  std::int64_t node_id() const { return storage().node; }

  // Deep copy of the values only: no gradient, no tape linkage.
  Tensor clone() const;

  const std::shared_ptr<Storage>& storage_ptr() const { return storage_; }
  Storage& storage() const;

 private:
  std::shared_ptr<Storage> storage_;
};

/// Append-only record of differentiable operations for one thread.
template <typename T>
class Tape {
 public:
  using Storage = TensorStorage<T>;
  using StoragePtr = std::shared_ptr<Storage>;
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string kind;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    BackwardFn backward;
  };

  static Tape& current();

  bool recording() const { return disabled_ == 0; }

  // True when an op over these inputs must be recorded.
  bool should_record(std::initializer_list<const Tensor<T>*> inputs) const;

  // Links `output` as the result of `kind` applied to `inputs`. The closure reads
  // output's gradient and accumulates into inputs via grad_target().
  void record(std::string_view kind, Tensor<T>& output,
              std::initializer_list<const Tensor<T>*> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates through every recorded node
  /// upstream of `loss`. Leaf gradients accumulate across calls.
  void backward(const Tensor<T>& loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  void push_disable() { ++disabled_; }
  void pop_disable() { --disabled_; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  int disabled_ = 0;
};

/// Gradient buffer of `s` to accumulate into, or nullptr when s does not take gradients.
template <typename T>
T* grad_target(TensorStorage<T>& s) {
  if (!s.requires_grad) return nullptr;
  if (s.grad.empty()) s.grad.assign(s.data.size(), T{0});
  return s.grad.data();
}

/// Suspends tape recording (for both element types) in the current scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>::current().backward(loss);
}

template <typename T>
void reset_tape() {
  Tape<T>::current().reset();
}

// Test hook: multiplies the upstream gradient of every node of `kind` by `factor`
// during backward. An empty kind disables the fault.
void set_backward_fault(std::string kind, double factor);
void clear_backward_fault();

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace hded
