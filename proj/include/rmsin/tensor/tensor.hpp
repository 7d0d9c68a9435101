#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmsin {

/// Raised when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API is called in a way its contract forbids.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a file cannot be read, written or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4)
    throw DimensionError("tensor rank must be in [1,4], got shape " + shape_str(shape));
  for (int e : shape)
    if (e < 1) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::int64_t node_id = -1;
  const Tape<T>* tape = nullptr;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of rank 1..4. Copies share storage; values are
/// only mutated through `mutable_data()` (parameter updates).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    check_shape(shape);
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const {
    if (axis < 0) axis += rank();
    return node_->shape.at(static_cast<std::size_t>(axis));
  }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const T* ptr() const { return node_->value.data(); }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  std::int64_t node_id() const { return node_->node_id; }

  /// Accumulated gradient; all zeros when nothing reached this tensor.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no tape participation.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <typename T>
Tensor<T> like(const Tensor<T>& ref, std::vector<T> data) {
  return Tensor<T>(ref.shape(), std::move(data));
}

/// Ordered record of differentiable operations. Operations are appended in
/// execution order, so the record is topologically sorted by construction.
template <typename T>
class Tape {
 public:
  struct Entry {
    typename Tensor<T>::NodePtr output;
    std::vector<typename Tensor<T>::NodePtr> inputs;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active() == this) active() = nullptr;
  }

  /// Makes `tape` the recording target for this thread while in scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active()) { active() = &tape; }
    ~Scope() { active() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::size_t size() const { return entries_.size(); }

  void record(const Tensor<T>& out, std::vector<typename Tensor<T>::NodePtr> inputs,
              std::function<void()> backward) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.node_id = static_cast<std::int64_t>(entries_.size());
    node.tape = this;
    entries_.push_back(Entry{out.node(), std::move(inputs), std::move(backward)});
  }

  /// Reverse sweep from a scalar loss. Each recorded node is visited once.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    const auto& node = *loss.node();
    if (node.tape != this || node.node_id < 0)
      throw UsageError("backward() loss is not connected to this tape");
    auto& g = loss.node()->grad_buffer();
    g[0] += T(1);
    for (std::int64_t i = node.node_id; i >= 0; --i) {
      auto& e = entries_[static_cast<std::size_t>(i)];
      if (!e.output->grad.empty() && e.backward) e.backward();
    }
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Disables recording for the current thread while in scope.
template <typename T>
class NoGrad {
 public:
  NoGrad() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGrad() { Tape<T>::active() = previous_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

/// Returns the active tape when any input needs a gradient.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

template <typename T>
Tape<T>* recording_tape(const std::vector<Tensor<T>>& inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto& t : inputs)
    if (t.requires_grad()) return tape;
  return nullptr;
}

/// Gradient sink for an input, or nullptr when the input is not tracked.
template <typename T>
T* grad_sink(const typename Tensor<T>::NodePtr& n) {
  if (!n || !n->requires_grad) return nullptr;
  return n->grad_buffer().data();
}

}  // namespace detail

}  // namespace rmsin
