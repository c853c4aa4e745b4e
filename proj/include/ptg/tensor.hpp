#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ptg/errors.hpp"

namespace ptg {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Vectorised kernels choose their
/// loop peeling from the address of the data, so a fixed alignment keeps the
/// order of floating-point operations, and hence results, identical between
/// runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense channels-last row-major array. Copies share storage; use clone() for
/// a detached deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    node_->data.assign(shape_numel(shape), T(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    if (values.size() != shape_numel(shape))
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + shape_string(shape));
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  /// Gradient storage, allocated (zeroed) on first use.
  std::span<T> grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  /// Element of a rank-3 (h, w, c) tensor.
  T& at(std::size_t y, std::size_t x, std::size_t c) {
    return node_->data[(y * node_->shape[1] + x) * node_->shape[2] + c];
  }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const {
    return node_->data[(y * node_->shape[1] + x) * node_->shape[2] + c];
  }

  Tensor clone() const {
    Tensor t(shape());
    std::copy(node_->data.begin(), node_->data.end(), t.node_->data.begin());
    return t;
  }

  /// Converts element type (float <-> double) without gradient history.
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> values(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(values), false);
  }

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor: rank must be at least 1");
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (shape[i] == 0)
        throw DimensionError("tensor: axis " + std::to_string(i) + " has size 0 in " +
                             shape_string(shape));
  }

  std::shared_ptr<TensorNode<T>> node_;
};

}  // namespace ptg
