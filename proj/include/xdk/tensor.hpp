#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xdk {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_str(const Shape& shape);
Index numel(const Shape& shape);

// Dense row-major tensor with an optional gradient buffer.
//
// Copies share storage (handle semantics); use clone() for a deep copy.
// Every tensor has a 2-D view: rows() is the product of all leading dims
// and cols() is the last dim, so a {T, U+1, V+1} lattice is viewed as
// (T*(U+1)) x (V+1). Rank-0 tensors are 1 x 1.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false);

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m, bool requires_grad = false) {
    Tensor t(Shape{m.rows(), m.cols()}, requires_grad);
    t.matrix() = m;
    return t;
  }
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index rank() const { return static_cast<Index>(impl_->shape.size()); }
  Index size() const { return impl_->data.size(); }
  Index rows() const;
  Index cols() const;

  MatrixMap matrix() { return MatrixMap(impl_->data.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(impl_->data.data(), rows(), cols()); }
  std::span<Scalar> data() { return {impl_->data.data(), static_cast<std::size_t>(size())}; }
  std::span<const Scalar> data() const {
    return {impl_->data.data(), static_cast<std::size_t>(size())};
  }
  Scalar item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return impl_->grad.size() != 0; }
  // Gradient view; allocated as zeros on first access. The gradient is
  // accumulation state shared by all handles, so this is const.
  MatrixMap grad_matrix() const;
  std::span<const Scalar> grad() const {
    return {impl_->grad.data(), static_cast<std::size_t>(impl_->grad.size())};
  }
  // Releases the gradient buffer; the next accumulation starts from zero.
  void zero_grad() { impl_->grad.resize(0); }

  bool is_finite() const { return impl_->data.allFinite(); }
  Tensor clone() const;
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    Vector data;
    Vector grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Tape of backward closures in construction order.
//
// Primitive ops append a closure only while a graph is active on the
// current thread (see GraphScope) and at least one input requires a
// gradient. Without an active graph ops run in inference mode.
template <typename Scalar>
class Graph {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs the tape in exact reverse order.
  // Gradients accumulate into existing buffers. The tape is consumed.
  void backward(Tensor<Scalar> loss);

  static Graph* active();

 private:
  template <typename>
  friend class GraphScope;
  template <typename>
  friend class NoGradScope;
  static Graph*& active_slot();

  std::vector<Backward> nodes_;
};

template <typename Scalar>
class GraphScope {
 public:
  explicit GraphScope(Graph<Scalar>& graph) : previous_(Graph<Scalar>::active_slot()) {
    Graph<Scalar>::active_slot() = &graph;
  }
  ~GraphScope() { Graph<Scalar>::active_slot() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<Scalar>* previous_;
};

// Suspends recording on this thread (inference mode).
template <typename Scalar>
class NoGradScope {
 public:
  NoGradScope() : previous_(Graph<Scalar>::active_slot()) { Graph<Scalar>::active_slot() = nullptr; }
  ~NoGradScope() { Graph<Scalar>::active_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<Scalar>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tensor<long double>;
extern template class Graph<float>;
extern template class Graph<double>;
extern template class Graph<long double>;

}  // namespace xdk
