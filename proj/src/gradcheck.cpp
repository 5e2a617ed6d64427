#include "xdk/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xdk/errors.hpp"

namespace xdk {
namespace {

template <typename S>
S evaluate(const std::function<Tensor<S>()>& f) {
  NoGradScope<S> no_grad;
  Tensor<S> out = f();
  if (out.size() != 1) throw ContractError("finite_difference_check: f must be scalar-valued");
  return out.item();
}

template <typename S>
void check_deterministic(const std::function<Tensor<S>()>& f, S base) {
  const S again = evaluate(f);
  // Value comparison: wide formats carry padding bytes.
  if (!(base == again) && !(std::isnan(base) && std::isnan(again))) {
    throw OracleError("finite_difference_check: f is not deterministic (" + std::to_string(base) + " vs " +
                      std::to_string(again) + ")");
  }
}

template <typename S>
std::vector<std::vector<S>> analytic_gradients(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>>& inputs) {
  std::vector<bool> saved_flags;
  for (auto& x : inputs) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Graph<S> graph;
  Tensor<S> loss;
  {
    GraphScope<S> scope(graph);
    loss = f();
  }
  if (loss.size() != 1) throw ContractError("finite_difference_check: f must be scalar-valued");
  const S base = loss.item();
  graph.backward(loss);
  std::vector<std::vector<S>> grads;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    grads.emplace_back(static_cast<std::size_t>(x.size()), S(0));
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), grads.back().begin());
    x.zero_grad();
    x.set_requires_grad(saved_flags[k]);
  }
  check_deterministic(f, base);
  return grads;
}

// Fourth-order central stencil; its O(h^4) truncation error allows steps
// large enough to keep rounding noise below the tolerance.
template <typename R>
R central_difference(const std::function<Tensor<R>()>& f, std::span<R> values, std::size_t i, R h) {
  const R original = values[i];
  auto at = [&](R steps) {
    values[i] = original + steps * h;
    const R v = evaluate(f);
    values[i] = original;
    return v;
  };
  return (R(8) * (at(1) - at(-1)) - (at(2) - at(-2))) / (R(12) * h);
}

}  // namespace

template <typename S, typename R>
S finite_difference_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs,
                          const std::function<Tensor<R>()>& f_ref, std::vector<Tensor<R>> ref_inputs, R h) {
  if (!(h > R(0))) throw DomainError("finite_difference_check: step must be > 0");
  if (inputs.empty()) throw ContractError("finite_difference_check: no inputs");
  if (inputs.size() != ref_inputs.size()) throw ContractError("finite_difference_check: reference inputs differ");
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (inputs[k].shape() != ref_inputs[k].shape()) {
      throw ContractError("finite_difference_check: reference input " + std::to_string(k) + " has shape " +
                          shape_str(ref_inputs[k].shape()) + ", expected " + shape_str(inputs[k].shape()));
    }
    for (std::size_t i = 0; i < inputs[k].data().size(); ++i) {
      if (static_cast<R>(inputs[k].data()[i]) != ref_inputs[k].data()[i]) {
        throw ContractError("finite_difference_check: reference input " + std::to_string(k) + " holds other values");
      }
    }
  }

  const auto analytic = analytic_gradients(f, inputs);
  if constexpr (!std::is_same_v<S, R>) check_deterministic(f_ref, evaluate(f_ref));

  R worst = R(0);
  for (std::size_t k = 0; k < ref_inputs.size(); ++k) {
    auto values = ref_inputs[k].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const R a = static_cast<R>(analytic[k][i]);
      const R central = central_difference(f_ref, values, i, h);
      const R denom = std::max({std::abs(a), std::abs(central), R(1e-8)});
      worst = std::max(worst, std::abs(a - central) / denom);
    }
  }
  return static_cast<S>(worst);
}

template <typename S>
S finite_difference_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs, S h) {
  return finite_difference_check<S, S>(f, inputs, f, inputs, h);
}

template <typename S>
S finite_difference_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x, S h) {
  std::function<Tensor<S>()> g = [&f, x]() { return f(x); };
  return finite_difference_check<S>(g, std::vector<Tensor<S>>{x}, h);
}

template float finite_difference_check(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>, float);
template double finite_difference_check(const std::function<Tensor<double>()>&, std::vector<Tensor<double>>, double);
template float finite_difference_check(const std::function<Tensor<float>(const Tensor<float>&)>&, Tensor<float>, float);
template double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>&, Tensor<double>, double);
template double finite_difference_check(const std::function<Tensor<double>()>&, std::vector<Tensor<double>>,
                                        const std::function<Tensor<long double>()>&, std::vector<Tensor<long double>>,
                                        long double);

}  // namespace xdk
