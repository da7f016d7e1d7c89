#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "csmri/errors.hpp"

namespace csmri {

// Row-major extents. A scalar is shape {1}.
using Shape = std::vector<int64_t>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
};

// Shared-ownership handle over an N-d real array. Values are written once by
// the producing op; gradients accumulate additively during backward.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t numel() const { return node_->values.size(); }
  int64_t dim(size_t i) const { return node_->shape[i]; }

  std::span<T> data() { return node_->values; }
  std::span<const T> data() const { return node_->values; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Value copy detached from any graph.
  Tensor detached() const;
  // Detached value copy reinterpreted under a new shape.
  Tensor reshaped(Shape shape) const;

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  // Lazily allocates a zero gradient buffer.
  std::span<T> ensure_grad();

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
Tensor<T> tensor_from(const Shape& shape, std::vector<T> values) {
  return Tensor<T>(shape, std::move(values));
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace csmri
