#include "csmri/tensor.hpp"

#include <sstream>

namespace csmri {

size_t shape_numel(const Shape& shape) {
  size_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  size_t n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->values.assign(n, fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not fill shape " +
                     shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->values[0];
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
  Tensor<T> out;
  out.node_ = std::make_shared<TensorNode<T>>();
  out.node_->shape = node_->shape;
  out.node_->values = node_->values;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape " + shape_str(node_->shape) + " -> " + shape_str(shape));
  }
  Tensor<T> out = detached();
  out.node_->shape = std::move(shape);
  return out;
}

template <typename T>
std::span<T> Tensor<T>::ensure_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
  return node_->grad;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace csmri
