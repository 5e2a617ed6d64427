#include "xdk/tensor.hpp"

#include <sstream>

#include "xdk/errors.hpp"

namespace xdk {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  impl_->data = Vector::Zero(numel(shape));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad)
    : Tensor(std::move(shape), requires_grad) {
  if (static_cast<Index>(values.size()) != size()) {
    throw DimensionError("tensor of shape " + shape_str(impl_->shape) + " needs " +
                         std::to_string(size()) + " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), impl_->data.data());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  Tensor t(Shape{}, requires_grad);
  t.impl_->data[0] = value;
  return t;
}

template <typename Scalar>
Index Tensor<Scalar>::rows() const {
  const Shape& s = impl_->shape;
  if (s.empty()) return 1;
  Index r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

template <typename Scalar>
Index Tensor<Scalar>::cols() const {
  const Shape& s = impl_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename Scalar>
typename Tensor<Scalar>::MatrixMap Tensor<Scalar>::grad_matrix() const {
  if (impl_->grad.size() == 0) impl_->grad = Vector::Zero(impl_->data.size());
  return MatrixMap(impl_->grad.data(), rows(), cols());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<Impl>(*impl_);
  return t;
}

template <typename Scalar>
Graph<Scalar>*& Graph<Scalar>::active_slot() {
  thread_local Graph<Scalar>* slot = nullptr;
  return slot;
}

template <typename Scalar>
Graph<Scalar>* Graph<Scalar>::active() {
  return active_slot();
}

template <typename Scalar>
void Graph<Scalar>::backward(Tensor<Scalar> loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a loss that does not depend on any trainable tensor");
  }
  loss.grad_matrix()(0, 0) += Scalar(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<long double>;
template class Graph<float>;
template class Graph<double>;
template class Graph<long double>;

}  // namespace xdk
