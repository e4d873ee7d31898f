#include "hded/tensor.hpp"

#include <sstream>

namespace hded {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

struct BackwardFault {
  std::string kind;
  double factor = 1.0;
};

BackwardFault& backward_fault() {
  static BackwardFault fault;
  return fault;
}

}  // namespace

void set_backward_fault(std::string kind, double factor) {
  backward_fault() = BackwardFault{std::move(kind), factor};
}

void clear_backward_fault() { backward_fault() = BackwardFault{}; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : storage_(std::make_shared<Storage>()) {
  storage_->data.assign(hded::numel(shape), fill);
  storage_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<Storage>()) {
  if (hded::numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " needs " +
                     std::to_string(hded::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename T>
TensorStorage<T>& Tensor<T>::storage() const {
  if (!storage_) throw std::logic_error("use of an undefined tensor");
  return *storage_;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return shape()[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return storage().data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const auto& s = shape();
  return storage().data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const auto& s = shape();
  return storage().data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw TapeError("requires_grad can only be changed on leaf tensors");
  storage().requires_grad = on;
  if (!on) storage().grad.clear();
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw TapeError("tensor of shape " + to_string(shape()) + " has no gradient");
  return storage().grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  auto& s = storage();
  if (s.grad.empty()) s.grad.assign(s.data.size(), T{0});
  return s.grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = storage().grad;
  std::fill(g.begin(), g.end(), T{0});
}

template <typename T>
bool Tensor<T>::on_tape() const {
  const auto& s = storage();
  const auto& tape = Tape<T>::current();
  return s.node >= 0 && s.generation == tape.generation() &&
         static_cast<std::size_t>(s.node) < tape.size() &&
         tape.nodes()[static_cast<std::size_t>(s.node)].output.get() == &s;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), std::vector<T>(storage().data));
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T>& Tape<T>::current() {
  thread_local Tape tape;
  return tape;
}

template <typename T>
bool Tape<T>::should_record(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void Tape<T>::record(std::string_view kind, Tensor<T>& output,
                     std::initializer_list<const Tensor<T>*> inputs, BackwardFn backward) {
  Node node;
  node.kind = std::string(kind);
  for (const auto* t : inputs) {
    if (t && t->defined()) node.inputs.push_back(t->storage_ptr());
  }
  node.output = output.storage_ptr();
  node.backward = std::move(backward);
  auto& out = output.storage();
  out.requires_grad = true;
  out.node = static_cast<std::int64_t>(nodes_.size());
  out.generation = generation_;
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || !loss.on_tape()) {
    throw TapeError("backward() called on a tensor that is not on the current tape");
  }
  if (loss.numel() != 1) {
    throw TapeError("backward() needs a 1-element loss, got shape " + to_string(loss.shape()));
  }
  const auto last = static_cast<std::size_t>(loss.node_id());
  // Intermediate gradients are recomputed on every pass; leaves accumulate.
  for (std::size_t i = 0; i <= last; ++i) nodes_[i].output->grad.clear();
  loss.storage().grad.assign(1, T{1});

  const auto& fault = backward_fault();
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& node = nodes_[i];
    auto& g = node.output->grad;
    if (g.empty()) continue;
    if (!fault.kind.empty() && fault.kind == node.kind) {
      for (auto& v : g) v = static_cast<T>(v * fault.factor);
    }
    node.backward();
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  ++generation_;
}

NoGradGuard::NoGradGuard() {
  Tape<float>::current().push_disable();
  Tape<double>::current().push_disable();
}

NoGradGuard::~NoGradGuard() {
  Tape<float>::current().pop_disable();
  Tape<double>::current().pop_disable();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace hded
