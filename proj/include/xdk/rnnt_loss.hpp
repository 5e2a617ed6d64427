#pragma once

#include <span>
#include <vector>

#include "xdk/lattice.hpp"

namespace xdk {

// Forward variables of one utterance: alpha is T x (U+1), row-major.
template <typename S>
struct AlphaLattice {
  Index frames = 0;
  Index label_length = 0;
  std::vector<S> alpha;
  S loss = S(0);

  S at(Index t, Index u) const { return alpha[static_cast<std::size_t>(t * (label_length + 1) + u)]; }
};

// Negative log marginal likelihood of `labels` over all monotonic alignments.
//
//   alpha[0,0] = 0
//   alpha[t,u] = logsumexp(alpha[t-1,u] + lp[t-1,u,blank],
//                          alpha[t,u-1] + lp[t,u-1,labels[u-1]])
//   loss       = -(alpha[T-1,U] + lp[T-1,U,blank])
//
// Terms whose predecessor lies outside the grid are dropped. The DP is built
// from differentiable primitives, so gradients reach the lattice through the
// active graph. If `alpha_out` is given it receives the forward variables.
template <typename S>
Tensor<S> rnnt_loss(const LogitLattice<S>& lattice, std::span<const Index> labels,
                    AlphaLattice<S>* alpha_out = nullptr);

// Mean of per-utterance losses.
template <typename S>
Tensor<S> rnnt_loss_mean(std::span<const LogitLattice<S>> lattices,
                         std::span<const std::vector<Index>> labels);

template <typename S>
struct BruteForceResult {
  S loss = S(0);
  long paths = 0;
};

// Test oracle: enumerates every alignment path explicitly. Limited to
// T + U <= 14.
template <typename S>
BruteForceResult<S> brute_force_loss(const LogitLattice<S>& lattice, std::span<const Index> labels);

}  // namespace xdk
