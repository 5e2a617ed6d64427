#pragma once

#include <functional>
#include <vector>

#include "xdk/tensor.hpp"

namespace xdk {

// Compares reverse-mode gradients against central differences
// (five-point stencil).
//
// f must be scalar-valued, deterministic, and read the inputs through the
// tensors passed in (they are perturbed in place and restored). Returns
//   max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8).
// Throws OracleError if two forward passes at the base point disagree.
template <typename S>
S finite_difference_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs, S h);

template <typename S>
S finite_difference_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x, S h);

// Same comparison with the differences taken in a wider precision R:
// f_ref evaluates the same function on ref_inputs, which must hold the
// values of `inputs` (same order and shapes). Analytic gradients come from
// f in precision S. Keeps rounding noise of the oracle well below the
// tolerance when some true gradients are tiny.
template <typename S, typename R>
S finite_difference_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs,
                          const std::function<Tensor<R>()>& f_ref, std::vector<Tensor<R>> ref_inputs, R h);

}  // namespace xdk
