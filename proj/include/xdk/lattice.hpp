#pragma once

#include "xdk/tensor.hpp"

namespace xdk {

// Joint log-probabilities over the transducer grid.
//
// log_probs has shape {T, U+1, V+1}; node (t, u) is row t*(U+1)+u of the
// 2-D view. The blank symbol is the last output index V.
template <typename S>
struct LogitLattice {
  Tensor<S> log_probs;

  Index frames() const { return log_probs.shape()[0]; }
  Index label_length() const { return log_probs.shape()[1] - 1; }
  Index outputs() const { return log_probs.shape()[2]; }
  Index blank() const { return outputs() - 1; }
  Index row(Index t, Index u) const { return t * (label_length() + 1) + u; }
  Index flat(Index t, Index u, Index k) const { return row(t, u) * outputs() + k; }
  S at(Index t, Index u, Index k) const { return log_probs.data()[flat(t, u, k)]; }
};

}  // namespace xdk
