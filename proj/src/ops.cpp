#include "xdk/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "xdk/errors.hpp"

namespace xdk {
namespace {

template <typename S, typename... Ts>
Graph<S>* recording(const Ts&... inputs) {
  Graph<S>* g = Graph<S>::active();
  if (g == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? g : nullptr;
}

template <typename S>
Tensor<S> result_like(Shape shape, Graph<S>* g) {
  return Tensor<S>(std::move(shape), g != nullptr);
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

template <typename S, typename Forward, typename Derivative>
Tensor<S> unary(const Tensor<S>& x, Forward fwd, Derivative dydx) {
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(x.shape(), g);
  out.matrix() = x.matrix().unaryExpr(fwd);
  if (g) {
    g->record([x, out, dydx]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.grad_matrix().array() +=
          out.grad_matrix().array() * dydx(x.matrix().array(), out.matrix().array());
    });
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.cols() != b.rows()) mismatch("matmul", a.shape(), b.shape());
  Graph<S>* g = recording<S>(a, b);
  Shape shape = a.shape();
  shape.back() = b.cols();
  Tensor<S> out = result_like<S>(std::move(shape), g);
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (g) {
    g->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad_matrix();
      if (a.requires_grad()) a.grad_matrix().noalias() += go * b.matrix().transpose();
      if (b.requires_grad()) b.grad_matrix().noalias() += a.matrix().transpose() * go;
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_bias = !same && b.rank() == 1 && a.rank() >= 1 && b.cols() == a.cols();
  if (!same && !row_bias) mismatch("add", a.shape(), b.shape());
  Graph<S>* g = recording<S>(a, b);
  Tensor<S> out = result_like<S>(a.shape(), g);
  if (same) {
    out.matrix() = a.matrix() + b.matrix();
  } else {
    out.matrix() = a.matrix().rowwise() + b.matrix().row(0);
  }
  if (g) {
    g->record([a, b, out, same]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad_matrix();
      if (a.requires_grad()) a.grad_matrix() += go;
      if (b.requires_grad()) {
        if (same) {
          b.grad_matrix() += go;
        } else {
          b.grad_matrix().row(0) += go.colwise().sum();
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  Graph<S>* g = recording<S>(a, b);
  Tensor<S> out = result_like<S>(a.shape(), g);
  out.matrix() = a.matrix().cwiseProduct(b.matrix());
  if (g) {
    g->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad_matrix();
      if (a.requires_grad()) a.grad_matrix() += go.cwiseProduct(b.matrix());
      if (b.requires_grad()) b.grad_matrix() += go.cwiseProduct(a.matrix());
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Graph<S>* g = recording<S>(a);
  Tensor<S> out = result_like<S>(a.shape(), g);
  out.matrix() = a.matrix() * factor;
  if (g) {
    g->record([a, out, factor]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.grad_matrix() += out.grad_matrix() * factor;
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary<S>(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](const auto& xv, const auto&) { return (xv > S(0)).template cast<S>(); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return unary<S>(
      x, [](S v) { return std::tanh(v); },
      [](const auto&, const auto& y) { return S(1) - y.square(); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary<S>(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](const auto&, const auto& y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>(
      x, [](S v) { return std::exp(v); }, [](const auto&, const auto& y) { return y; });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  if (!(eps > S(0))) throw DomainError("layer_norm: eps must be > 0, got " + std::to_string(eps));
  if (gain.rank() != 1 || gain.cols() != x.cols()) mismatch("layer_norm(gain)", x.shape(), gain.shape());
  if (bias.rank() != 1 || bias.cols() != x.cols()) mismatch("layer_norm(bias)", x.shape(), bias.shape());
  using Matrix = typename Tensor<S>::Matrix;
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  const Index n = x.cols();
  auto xm = x.matrix();
  Vector mean = xm.rowwise().mean();
  Matrix centered = xm.colwise() - mean;
  Vector inv_std =
      ((centered.array().square().rowwise().sum() / S(n)) + eps).rsqrt().matrix();
  Matrix normed = centered.array().colwise() * inv_std.array();

  Graph<S>* g = recording<S>(x, gain, bias);
  Tensor<S> out = result_like<S>(x.shape(), g);
  out.matrix() = (normed.array().rowwise() * gain.matrix().row(0).array()).rowwise() +
                 bias.matrix().row(0).array();
  if (g) {
    g->record([x, gain, bias, out, normed = std::move(normed), inv_std = std::move(inv_std),
               n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad_matrix();
      if (gain.requires_grad()) gain.grad_matrix().row(0) += go.cwiseProduct(normed).colwise().sum();
      if (bias.requires_grad()) bias.grad_matrix().row(0) += go.colwise().sum();
      if (x.requires_grad()) {
        Matrix gn = go.array().rowwise() * gain.matrix().row(0).array();
        Vector mean_gn = gn.rowwise().mean();
        Vector mean_gn_x = gn.cwiseProduct(normed).rowwise().sum() / S(n);
        Matrix dx = gn.colwise() - mean_gn;
        dx.array() -= normed.array().colwise() * mean_gn_x.array();
        x.grad_matrix().array() += dx.array().colwise() * inv_std.array();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  if (!(axis == -1 || axis == static_cast<int>(x.rank()) - 1)) {
    throw DimensionError("log_softmax: only the last axis is supported, got axis " +
                         std::to_string(axis) + " for shape " + shape_str(x.shape()));
  }
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  auto xm = x.matrix();
  Vector mx = xm.rowwise().maxCoeff();
  Vector lse = ((xm.colwise() - mx).array().exp().rowwise().sum().log()).matrix() + mx;
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(x.shape(), g);
  out.matrix() = xm.colwise() - lse;
  if (g) {
    g->record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto go = out.grad_matrix();
      Vector row_sum = go.rowwise().sum();
      x.grad_matrix().array() +=
          go.array() - out.matrix().array().exp().colwise() * row_sum.array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> logsumexp(const Tensor<S>& x, int axis) {
  if (!(axis == -1 || axis == static_cast<int>(x.rank()) - 1) || x.rank() == 0) {
    throw DimensionError("logsumexp: only the last axis is supported, got axis " +
                         std::to_string(axis) + " for shape " + shape_str(x.shape()));
  }
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  auto xm = x.matrix();
  Vector mx = xm.rowwise().maxCoeff();
  for (Index r = 0; r < mx.size(); ++r) {
    if (!std::isfinite(mx[r])) mx[r] = S(0);
  }
  Vector lse = ((xm.colwise() - mx).array().exp().rowwise().sum().log()).matrix() + mx;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(std::move(shape), g);
  std::copy(lse.data(), lse.data() + lse.size(), out.data().begin());
  if (g) {
    g->record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const Index rows = x.rows();
      Eigen::Map<const Vector> go(out.grad().data(), rows);
      Eigen::Map<const Vector> y(out.data().data(), rows);
      x.grad_matrix().array() +=
          (x.matrix().colwise() - y).array().exp().colwise() * go.array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != -1) throw DimensionError("concat: axis must be 0 or -1");
  const Tensor<S>& first = parts.front();
  Graph<S>* g = nullptr;
  for (const auto& p : parts) {
    if (Graph<S>* pg = recording<S>(p)) g = pg;
  }
  Shape shape;
  if (axis == -1) {
    Index width = 0;
    for (const auto& p : parts) {
      if (p.rows() != first.rows() || p.rank() != first.rank()) mismatch("concat", first.shape(), p.shape());
      width += p.cols();
    }
    shape = first.rank() == 0 ? Shape{width} : first.shape();
    if (first.rank() > 0) shape.back() = width;
  } else {
    Index height = 0;
    for (const auto& p : parts) {
      if (p.cols() != first.cols() || p.rank() > 2) mismatch("concat", first.shape(), p.shape());
      height += p.rows();
    }
    shape = Shape{height, first.cols()};
  }
  Tensor<S> out = result_like<S>(std::move(shape), g);
  auto om = out.matrix();
  Index offset = 0;
  for (const auto& p : parts) {
    if (axis == -1) {
      om.middleCols(offset, p.cols()) = p.matrix();
      offset += p.cols();
    } else {
      om.middleRows(offset, p.rows()) = p.matrix();
      offset += p.rows();
    }
  }
  if (g) {
    std::vector<Tensor<S>> inputs(parts.begin(), parts.end());
    g->record([inputs = std::move(inputs), out, axis]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad_matrix();
      Index off = 0;
      for (auto& p : inputs) {
        const Index extent = axis == -1 ? p.cols() : p.rows();
        if (p.requires_grad()) {
          if (axis == -1) {
            p.grad_matrix() += go.middleCols(off, extent);
          } else {
            p.grad_matrix() += go.middleRows(off, extent);
          }
        }
        off += extent;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  if (axis != 0 && axis != -1) throw DimensionError("slice: axis must be 0 or -1");
  const Index extent = axis == 0 ? x.rows() : x.cols();
  if (start < 0 || length < 0 || start + length > extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for shape " +
                         shape_str(x.shape()));
  }
  Shape shape;
  if (axis == 0) {
    shape = x.rank() <= 1 ? Shape{length, x.cols()} : Shape{length, x.cols()};
  } else {
    shape = x.rank() == 0 ? Shape{length} : x.shape();
    if (x.rank() > 0) shape.back() = length;
  }
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(std::move(shape), g);
  if (axis == 0) {
    out.matrix() = x.matrix().middleRows(start, length);
  } else {
    out.matrix() = x.matrix().middleCols(start, length);
  }
  if (g) {
    g->record([x, out, axis, start, length]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      if (axis == 0) {
        x.grad_matrix().middleRows(start, length) += out.grad_matrix();
      } else {
        x.grad_matrix().middleCols(start, length) += out.grad_matrix();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const Index> ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  for (Index id : ids) {
    if (id < 0 || id >= table.rows()) {
      throw DimensionError("embedding_lookup: id " + std::to_string(id) + " outside table " +
                           shape_str(table.shape()));
    }
  }
  Graph<S>* g = recording<S>(table);
  Tensor<S> out = result_like<S>(Shape{static_cast<Index>(ids.size()), table.cols()}, g);
  auto om = out.matrix();
  auto tm = table.matrix();
  for (std::size_t i = 0; i < ids.size(); ++i) om.row(static_cast<Index>(i)) = tm.row(ids[i]);
  if (g) {
    std::vector<Index> idv(ids.begin(), ids.end());
    g->record([table, out, idv = std::move(idv)]() mutable {
      if (!out.has_grad() || !table.requires_grad()) return;
      auto go = out.grad_matrix();
      auto gt = table.grad_matrix();
      for (std::size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += go.row(static_cast<Index>(i));
    });
  }
  return out;
}

template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::span<const Index> flat_indices) {
  for (Index i : flat_indices) {
    if (i < 0 || i >= x.size()) {
      throw DimensionError("gather: index " + std::to_string(i) + " outside shape " + shape_str(x.shape()));
    }
  }
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(Shape{static_cast<Index>(flat_indices.size())}, g);
  auto od = out.data();
  auto xd = x.data();
  for (std::size_t k = 0; k < flat_indices.size(); ++k) od[k] = xd[flat_indices[k]];
  if (g) {
    std::vector<Index> idx(flat_indices.begin(), flat_indices.end());
    g->record([x, out, idx = std::move(idx)]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      S* gx = x.grad_matrix().data();
      auto go = out.grad();
      for (std::size_t k = 0; k < idx.size(); ++k) gx[idx[k]] += go[k];
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected 2-D tensor, got " + shape_str(x.shape()));
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(Shape{x.cols(), x.rows()}, g);
  out.matrix() = x.matrix().transpose();
  if (g) {
    g->record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.grad_matrix() += out.grad_matrix().transpose();
    });
  }
  return out;
}

template <typename S>
Tensor<S> causal_mask(const Tensor<S>& scores) {
  if (scores.rank() != 2 || scores.rows() != scores.cols()) {
    throw DimensionError("causal_mask: expected square scores, got " + shape_str(scores.shape()));
  }
  Graph<S>* g = recording<S>(scores);
  Tensor<S> out = result_like<S>(scores.shape(), g);
  auto om = out.matrix();
  om = scores.matrix();
  const Index n = scores.rows();
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) om(i, j) = -std::numeric_limits<S>::infinity();
  }
  if (g) {
    g->record([scores, out, n]() mutable {
      if (!out.has_grad() || !scores.requires_grad()) return;
      auto go = out.grad_matrix();
      auto gs = scores.grad_matrix();
      for (Index i = 0; i < n; ++i) gs.row(i).head(i + 1) += go.row(i).head(i + 1);
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(Shape{}, g);
  out.data()[0] = x.matrix().sum();
  if (g) {
    g->record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.grad_matrix().array() += out.grad()[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) mismatch("reshape", x.shape(), shape);
  Graph<S>* g = recording<S>(x);
  Tensor<S> out = result_like<S>(std::move(shape), g);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (g) {
    g->record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      S* gx = x.grad_matrix().data();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

#define XDK_INSTANTIATE_OPS(S)                                                            \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> scale(const Tensor<S>&, S);                                          \
  template Tensor<S> relu(const Tensor<S>&);                                              \
  template Tensor<S> tanh(const Tensor<S>&);                                              \
  template Tensor<S> sigmoid(const Tensor<S>&);                                           \
  template Tensor<S> exp(const Tensor<S>&);                                               \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S); \
  template Tensor<S> log_softmax(const Tensor<S>&, int);                                  \
  template Tensor<S> logsumexp(const Tensor<S>&, int);                                    \
  template Tensor<S> concat(std::span<const Tensor<S>>, int);                             \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                          \
  template Tensor<S> embedding_lookup(const Tensor<S>&, std::span<const Index>);          \
  template Tensor<S> gather(const Tensor<S>&, std::span<const Index>);                    \
  template Tensor<S> transpose(const Tensor<S>&);                                         \
  template Tensor<S> causal_mask(const Tensor<S>&);                                       \
  template Tensor<S> sum(const Tensor<S>&);                                               \
  template Tensor<S> reshape(const Tensor<S>&, Shape);

XDK_INSTANTIATE_OPS(float)
XDK_INSTANTIATE_OPS(double)
XDK_INSTANTIATE_OPS(long double)

#undef XDK_INSTANTIATE_OPS

}  // namespace xdk
