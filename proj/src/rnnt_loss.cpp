#include "xdk/rnnt_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "xdk/errors.hpp"
#include "xdk/ops.hpp"

namespace xdk {
namespace {

template <typename S>
void validate(const LogitLattice<S>& lattice, std::span<const Index> labels) {
  const Tensor<S>& lp = lattice.log_probs;
  if (!lp.defined() || lp.rank() != 3) {
    throw DimensionError("rnnt_loss: lattice must be {T, U+1, V+1}");
  }
  if (lp.shape()[0] == 0) throw ContractError("rnnt_loss: lattice has T == 0 frames");
  if (lp.shape()[1] != static_cast<Index>(labels.size()) + 1) {
    throw DimensionError("rnnt_loss: lattice " + shape_str(lp.shape()) + " does not match " +
                         std::to_string(labels.size()) + " labels");
  }
  for (Index y : labels) {
    if (y == lattice.blank()) throw ContractError("rnnt_loss: blank id appears in labels");
    if (y < 0 || y > lattice.blank()) {
      throw ContractError("rnnt_loss: label " + std::to_string(y) + " outside vocabulary");
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> rnnt_loss(const LogitLattice<S>& lattice, std::span<const Index> labels,
                    AlphaLattice<S>* alpha_out) {
  validate(lattice, labels);
  const Index frames = lattice.frames();
  const Index length = static_cast<Index>(labels.size());

  // Blank and label log-probs for every node, gathered once.
  std::vector<Index> blank_idx;
  std::vector<Index> label_idx;
  blank_idx.reserve(static_cast<std::size_t>(frames * (length + 1)));
  label_idx.reserve(static_cast<std::size_t>(frames * length));
  for (Index t = 0; t < frames; ++t) {
    for (Index u = 0; u <= length; ++u) {
      blank_idx.push_back(lattice.flat(t, u, lattice.blank()));
      if (u < length) label_idx.push_back(lattice.flat(t, u, labels[u]));
    }
  }
  const Tensor<S> blank_lp = gather<S>(lattice.log_probs, blank_idx);
  const Tensor<S> label_lp = length > 0 ? gather<S>(lattice.log_probs, label_idx) : Tensor<S>();
  auto blank_at = [&](Index t, Index u) {
    const Index i = t * (length + 1) + u;
    return gather<S>(blank_lp, std::span<const Index>(&i, 1));
  };
  auto label_at = [&](Index t, Index u) {
    const Index i = t * length + u;
    return gather<S>(label_lp, std::span<const Index>(&i, 1));
  };

  std::vector<Tensor<S>> alpha(static_cast<std::size_t>(frames * (length + 1)));
  auto cell = [&](Index t, Index u) -> Tensor<S>& {
    return alpha[static_cast<std::size_t>(t * (length + 1) + u)];
  };
  for (Index t = 0; t < frames; ++t) {
    for (Index u = 0; u <= length; ++u) {
      if (t == 0 && u == 0) {
        cell(t, u) = Tensor<S>(Shape{1});
        continue;
      }
      Tensor<S> from_blank;
      Tensor<S> from_label;
      if (t > 0) from_blank = add(cell(t - 1, u), blank_at(t - 1, u));
      if (u > 0) from_label = add(cell(t, u - 1), label_at(t, u - 1));
      if (from_blank.defined() && from_label.defined()) {
        // logsumexp drops to rank 0; concat restores shape {1}
        cell(t, u) = concat<S>({logsumexp(concat<S>({from_blank, from_label}, -1))}, -1);
      } else {
        cell(t, u) = from_blank.defined() ? from_blank : from_label;
      }
    }
  }
  Tensor<S> total = add(cell(frames - 1, length), blank_at(frames - 1, length));
  Tensor<S> loss = scale(sum(total), S(-1));

  if (alpha_out) {
    alpha_out->frames = frames;
    alpha_out->label_length = length;
    alpha_out->alpha.clear();
    for (const auto& a : alpha) alpha_out->alpha.push_back(a.data()[0]);
    alpha_out->loss = loss.item();
  }
  return loss;
}

template <typename S>
Tensor<S> rnnt_loss_mean(std::span<const LogitLattice<S>> lattices,
                         std::span<const std::vector<Index>> labels) {
  if (lattices.empty() || lattices.size() != labels.size()) {
    throw ContractError("rnnt_loss_mean: need one label sequence per lattice");
  }
  Tensor<S> total;
  for (std::size_t i = 0; i < lattices.size(); ++i) {
    Tensor<S> l = rnnt_loss<S>(lattices[i], labels[i]);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, S(1) / static_cast<S>(lattices.size()));
}

template <typename S>
BruteForceResult<S> brute_force_loss(const LogitLattice<S>& lattice, std::span<const Index> labels) {
  validate(lattice, labels);
  const Index frames = lattice.frames();
  const Index length = static_cast<Index>(labels.size());
  if (frames + length > 14) {
    throw OracleError("brute_force_loss: T + U = " + std::to_string(frames + length) +
                      " exceeds the enumeration guard of 14");
  }
  std::vector<S> path_scores;
  // Depth-first walk over emission sequences; (t, u) is the current node.
  auto walk = [&](auto&& self, Index t, Index u, S score) -> void {
    if (t == frames - 1 && u == length) {
      path_scores.push_back(score + lattice.at(t, u, lattice.blank()));
      return;
    }
    if (u < length) self(self, t, u + 1, score + lattice.at(t, u, labels[u]));
    if (t < frames - 1) self(self, t + 1, u, score + lattice.at(t, u, lattice.blank()));
  };
  walk(walk, 0, 0, S(0));

  const S best = *std::max_element(path_scores.begin(), path_scores.end());
  S acc = S(0);
  for (S s : path_scores) acc += std::exp(s - best);
  BruteForceResult<S> out;
  out.loss = -(best + std::log(acc));
  out.paths = static_cast<long>(path_scores.size());
  return out;
}

template Tensor<float> rnnt_loss(const LogitLattice<float>&, std::span<const Index>, AlphaLattice<float>*);
template Tensor<double> rnnt_loss(const LogitLattice<double>&, std::span<const Index>, AlphaLattice<double>*);
template Tensor<float> rnnt_loss_mean(std::span<const LogitLattice<float>>, std::span<const std::vector<Index>>);
template Tensor<double> rnnt_loss_mean(std::span<const LogitLattice<double>>, std::span<const std::vector<Index>>);
template BruteForceResult<float> brute_force_loss(const LogitLattice<float>&, std::span<const Index>);
template BruteForceResult<double> brute_force_loss(const LogitLattice<double>&, std::span<const Index>);

template Tensor<long double> rnnt_loss(const LogitLattice<long double>&, std::span<const Index>, AlphaLattice<long double>*);
template BruteForceResult<long double> brute_force_loss(const LogitLattice<long double>&, std::span<const Index>);

}  // namespace xdk
