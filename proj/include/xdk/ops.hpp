#pragma once

#include <span>
#include <vector>

#include "xdk/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and,
// when recording (see Graph), registers a backward closure that accumulates
// into the gradients of inputs that require them.
//
// Broadcasting is limited to add(): a rank-1 bias of width cols() is added
// to every row. Every other shape mismatch raises DimensionError.
namespace xdk {

// {..., k} x {k, n} -> {..., n}
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor);

template <typename S>
Tensor<S> relu(const Tensor<S>& x);

template <typename S>
Tensor<S> tanh(const Tensor<S>& x);

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x);

template <typename S>
Tensor<S> exp(const Tensor<S>& x);

// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps);

// Only the last axis (-1 or rank-1) is supported.
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis = -1);

// Reduces the last axis; a rank-1 input yields a rank-0 result.
template <typename S>
Tensor<S> logsumexp(const Tensor<S>& x, int axis = -1);

// axis 0 stacks rows, axis -1 joins along the last dim.
template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts, int axis);

template <typename S>
Tensor<S> concat(std::initializer_list<Tensor<S>> parts, int axis) {
  std::vector<Tensor<S>> v(parts);
  return concat<S>(std::span<const Tensor<S>>(v), axis);
}

// axis 0 slices rows of the 2-D view, axis -1 slices the last dim.
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);

// Row gather: table {N, d}, ids -> {ids.size(), d}.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const Index> ids);

// Flat-index gather -> rank-1 tensor.
template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::span<const Index> flat_indices);

template <typename S>
Tensor<S> transpose(const Tensor<S>& x);

// Square scores; entries above the diagonal become -inf (position t sees <= t).
template <typename S>
Tensor<S> causal_mask(const Tensor<S>& scores);

template <typename S>
Tensor<S> sum(const Tensor<S>& x);

// Same data, new shape with equal element count.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape);

template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  return exp(log_softmax(x));
}

}  // namespace xdk
