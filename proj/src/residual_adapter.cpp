#include "xdk/residual_adapter.hpp"

#include <string>

#include "xdk/errors.hpp"
#include "xdk/ops.hpp"

namespace xdk {

template <typename S>
ResidualAdapter<S> make_adapter(Index d_i, Index d_b) {
  if (d_i < 1 || d_b < 1) throw ParameterError("adapter dims must be >= 1");
  ResidualAdapter<S> a;
  a.ln_gain = Tensor<S>(Shape{d_i});
  a.ln_gain.matrix().setOnes();
  a.ln_bias = Tensor<S>(Shape{d_i});
  a.w_down = Tensor<S>(Shape{d_i, d_b});
  a.b_down = Tensor<S>(Shape{d_b});
  a.w_up = Tensor<S>(Shape{d_b, d_i});
  a.b_up = Tensor<S>(Shape{d_i});
  return a;
}

template <typename S>
Tensor<S> adapter_forward(const ResidualAdapter<S>& adapter, const Tensor<S>& x, S ln_eps) {
  if (x.cols() != adapter.input_dim()) {
    throw DimensionError("adapter expects width " + std::to_string(adapter.input_dim()) + ", got " +
                         shape_str(x.shape()));
  }
  Tensor<S> normed = layer_norm(x, adapter.ln_gain, adapter.ln_bias, ln_eps);
  Tensor<S> bottleneck = relu(add(matmul(normed, adapter.w_down), adapter.b_down));
  return add(x, add(matmul(bottleneck, adapter.w_up), adapter.b_up));
}

template ResidualAdapter<float> make_adapter(Index, Index);
template ResidualAdapter<double> make_adapter(Index, Index);
template Tensor<float> adapter_forward(const ResidualAdapter<float>&, const Tensor<float>&, float);
template Tensor<double> adapter_forward(const ResidualAdapter<double>&, const Tensor<double>&, double);

template ResidualAdapter<long double> make_adapter(Index, Index);
template Tensor<long double> adapter_forward(const ResidualAdapter<long double>&, const Tensor<long double>&, long double);

}  // namespace xdk
