#pragma once

#include "xdk/tensor.hpp"

namespace xdk {

// Bottleneck block added with a residual connection:
//   y = x + relu(LN(x) W_down + b_down) W_up + b_up
// LN has its own gain and bias. W_down is {d_i, d_b}, W_up is {d_b, d_i}.
template <typename S>
struct ResidualAdapter {
  Tensor<S> ln_gain;
  Tensor<S> ln_bias;
  Tensor<S> w_down;
  Tensor<S> b_down;
  Tensor<S> w_up;
  Tensor<S> b_up;

  Index input_dim() const { return w_down.shape()[0]; }
  Index bottleneck_dim() const { return w_down.shape()[1]; }
  Index parameter_count() const {
    return ln_gain.size() + ln_bias.size() + w_down.size() + b_down.size() + w_up.size() + b_up.size();
  }
  // Fixed order used by the registry, checkpoints, and bundles.
  std::vector<std::pair<const char*, Tensor<S>>> named_tensors() const {
    return {{"ln_gain", ln_gain}, {"ln_bias", ln_bias}, {"w_down", w_down},
            {"b_down", b_down},   {"w_up", w_up},       {"b_up", b_up}};
  }
  ResidualAdapter clone() const {
    return {ln_gain.clone(), ln_bias.clone(), w_down.clone(), b_down.clone(), w_up.clone(), b_up.clone()};
  }
};

// Closed form 2*d_i*d_b + 3*d_i + d_b.
constexpr Index adapter_parameter_count(Index d_i, Index d_b) { return 2 * d_i * d_b + 3 * d_i + d_b; }

// Zero-initialized adapter of the given dims (gain = 1).
template <typename S>
ResidualAdapter<S> make_adapter(Index d_i, Index d_b);

template <typename S>
Tensor<S> adapter_forward(const ResidualAdapter<S>& adapter, const Tensor<S>& x, S ln_eps = S(1e-5));

}  // namespace xdk
