#include <doctest.h>

#include <random>

#include "test_util.hpp"
#include "xdk/adapters.hpp"
#include "xdk/errors.hpp"
#include "xdk/gradcheck.hpp"
#include "xdk/ops.hpp"

using namespace xdk;

namespace {

ModelConfig small_config(EncoderKind kind) {
  ModelConfig c;
  c.encoder_kind = kind;
  c.num_encoder_layers = 3;
  c.d_model = 8;
  c.num_heads = 2;
  c.lstm_cells = 10;
  c.d_ff = 16;
  c.d_pred = 6;
  c.joint_dim = 6;
  c.vocab_size = 4;
  c.input_dim = 5;
  c.max_positions = 32;
  return c;
}

}  // namespace

TEST_CASE("adapter forward hand-computed example") {
  auto a = make_adapter<double>(2, 1);
  a.w_down.data()[0] = 1.0;
  a.w_up.data()[0] = 1.0;
  Tensor<double> x(Shape{1, 2}, {1.0, -1.0});
  auto y = adapter_forward(a, x, 1e-5);
  CHECK(std::abs(y.data()[0] - 2.0) < 1e-5);
  CHECK(std::abs(y.data()[1] + 1.0) < 1e-12);
  CHECK_THROWS_AS(adapter_forward(a, Tensor<double>(Shape{1, 3}), 1e-5), DimensionError);
}

TEST_CASE("adapter with zero up-projection is the identity") {
  std::mt19937_64 rng(1);
  auto a = make_adapter<double>(6, 3);
  for (auto& v : a.w_down.data()) v = std::normal_distribution<double>(0, 1)(rng);
  for (auto& v : a.b_down.data()) v = std::normal_distribution<double>(0, 1)(rng);
  auto x = test::random_tensor<double>({7, 6}, rng, 1.0, false);
  auto y = adapter_forward(a, x, 1e-5);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("adapter gradients match finite differences") {
  using LD = long double;
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Index d_i = test::random_dim(rng, 3, 8);
    const Index d_b = test::random_dim(rng, 1, 4);
    ResidualAdapter<double> a{test::random_tensor<double>({d_i}, rng), test::random_tensor<double>({d_i}, rng),
                              test::random_tensor<double>({d_i, d_b}, rng), test::random_tensor<double>({d_b}, rng),
                              test::random_tensor<double>({d_b, d_i}, rng), test::random_tensor<double>({d_i}, rng)};
    auto x = test::random_tensor<double>({4, d_i}, rng);
    auto w = test::random_tensor<double>({4, d_i}, rng, 1.0, false);
    ResidualAdapter<LD> r{test::cast_tensor<LD>(a.ln_gain), test::cast_tensor<LD>(a.ln_bias),
                          test::cast_tensor<LD>(a.w_down),  test::cast_tensor<LD>(a.b_down),
                          test::cast_tensor<LD>(a.w_up),    test::cast_tensor<LD>(a.b_up)};
    auto x_ref = test::cast_tensor<LD>(x);
    auto w_ref = test::cast_tensor<LD>(w);
    std::vector<Tensor<double>> inputs{x};
    std::vector<Tensor<LD>> ref_inputs{x_ref};
    for (auto& [name, t] : a.named_tensors()) inputs.push_back(t);
    for (auto& [name, t] : r.named_tensors()) ref_inputs.push_back(t);
    const double err = finite_difference_check<double, LD>(
        [&] { return sum(mul(adapter_forward(a, x, 1e-5), w)); }, inputs,
        [&] { return sum(mul(adapter_forward(r, x_ref, LD(1e-5)), w_ref)); }, ref_inputs, 1e-4L);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("inject is deterministic and leaves the base untouched") {
  TransducerModel<double> base(small_config(EncoderKind::kLstm), 3);
  const auto base_bytes = save_checkpoint(base);
  auto a = base.clone();
  auto b = base.clone();
  inject(a, AdapterConfig{4, 1e-3, {}}, 7);
  inject(b, AdapterConfig{4, 1e-3, {}}, 7);
  CHECK(a.adapter_layers() == std::vector<Index>{0, 1, 2});
  for (Index layer = 0; layer < 3; ++layer) {
    const auto ta = a.adapter(layer).named_tensors();
    const auto tb = b.adapter(layer).named_tensors();
    for (std::size_t k = 0; k < ta.size(); ++k) {
      CHECK(std::equal(ta[k].second.data().begin(), ta[k].second.data().end(), tb[k].second.data().begin()));
    }
    CHECK(a.adapter(layer).w_down.matrix().cwiseAbs().maxCoeff() > 0.0);
    CHECK(a.adapter(layer).w_down.matrix().cwiseAbs().maxCoeff() < 1e-2);
  }
  CHECK(save_checkpoint(base) == base_bytes);
  CHECK(base_checksum(a) == base_checksum(base));
  CHECK(group_payload(a, "encoder.layer.*") == group_payload(base, "encoder.layer.*"));
  CHECK_THROWS_AS(inject(a, AdapterConfig{4, 1e-3, {1}}, 8), ContractError);
  CHECK_THROWS_AS(inject(b, AdapterConfig{0, 1e-3, {}}, 8), ParameterError);

  auto c = base.clone();
  inject(c, AdapterConfig{2, 1e-3, {1}}, 9);
  CHECK(c.adapter_layers() == std::vector<Index>{1});
  CHECK_THROWS_AS(inject(c, AdapterConfig{2, 1e-3, {5}}, 9), ParameterError);
}

TEST_CASE("zero up-projection keeps the whole model unchanged") {
  for (auto kind : {EncoderKind::kLstm, EncoderKind::kTransformer}) {
    TransducerModel<double> model(small_config(kind), 4);
    std::mt19937_64 rng(5);
    NoGradScope<double> ng;
    std::vector<Index> labels{0, 3, 1};
    auto x = test::random_tensor<double>({6, 5}, rng, 1.0, false);
    auto before = model.forward(x, labels);
    inject(model, AdapterConfig{4, 0.5, {}}, 11);
    auto perturbed = model.forward(x, labels);
    CHECK((perturbed.log_probs.matrix() - before.log_probs.matrix()).cwiseAbs().maxCoeff() > 0.0);
    for (Index layer : model.adapter_layers()) {
      auto w_up = model.adapter(layer).w_up;
      w_up.matrix().setZero();
    }
    auto after = model.forward(x, labels);
    CHECK((after.log_probs.matrix().array() == before.log_probs.matrix().array()).all());
  }
}

TEST_CASE("adapter-only mask gives a tiny trainable ratio on the desk config") {
  TransducerModel<float> model(ModelConfig{}, 6);
  inject(model, AdapterConfig{8, 1e-3, {}}, 1);
  apply_mask(model, TrainableMask::adapters_only());
  const auto counts = count_params(model);
  CHECK(counts.trainable == 4 * 1224);
  CHECK(counts.trainable_ratio() < 0.005);
}

TEST_CASE("apply_mask sets trainable flags by group") {
  TransducerModel<float> model(small_config(EncoderKind::kTransformer), 7);
  inject(model, AdapterConfig{2, 1e-3, {}}, 1);
  auto trainable = [&](const std::string& group) {
    bool any = false, all = true;
    for (const auto& p : model.parameters()) {
      if (p.group != group) continue;
      any = any || p.value.requires_grad();
      all = all && p.value.requires_grad();
    }
    CHECK(any == all);
    return any;
  };
  apply_mask(model, TrainableMask::adapters_only());
  CHECK(trainable("encoder.adapter.0"));
  CHECK_FALSE(trainable("encoder.layer.0"));
  CHECK_FALSE(trainable("prediction"));
  CHECK_FALSE(trainable("joint"));

  apply_mask(model, TrainableMask::encoder_layers(1));
  CHECK(trainable("encoder.layer.0"));
  CHECK_FALSE(trainable("encoder.layer.1"));
  CHECK_FALSE(trainable("encoder.adapter.0"));

  apply_mask(model, TrainableMask::encoder());
  CHECK(trainable("encoder.layer.2"));
  CHECK(trainable("encoder.adapter.2"));
  CHECK_FALSE(trainable("joint"));

  CHECK_THROWS_AS(apply_mask(model, TrainableMask{}), ContractError);
  CHECK_THROWS_AS(apply_mask(model, TrainableMask{{"decoder.*"}}), LookupError);
}

TEST_CASE("bundle size, round trip, and compatibility") {
  CHECK(4 * adapter_parameter_count(64, 8) * 4 == 19584);
  CHECK(bundle_size_bytes(4, 64, 8) == 24 + 4 * 12 + 19584 + 8);

  TransducerModel<float> base(ModelConfig{}, 8);
  auto adapted = base.clone();
  inject(adapted, AdapterConfig{8, 0.05, {}}, 2);
  const auto bytes = export_bundle(adapted);
  CHECK(bytes.size() == bundle_size_bytes(4, 64, 8));
  const auto info = read_bundle_info(bytes);
  CHECK(info.base_model_checksum == base_checksum(base));
  CHECK(info.layers == std::vector<Index>{0, 1, 2, 3});
  CHECK(info.d_i == 64);
  CHECK(info.d_b == 8);

  auto restored = base.clone();
  import_bundle(restored, bytes);
  CHECK(export_bundle(restored) == bytes);
  CHECK(save_checkpoint(restored) == save_checkpoint(adapted));
  std::mt19937_64 rng(3);
  auto x = test::random_tensor<float>({5, 64}, rng, 1.0f, false);
  std::vector<Index> labels{1, 2};
  NoGradScope<float> ng;
  auto a = adapted.forward(x, labels);
  auto b = restored.forward(x, labels);
  CHECK((a.log_probs.matrix().array() == b.log_probs.matrix().array()).all());

  TransducerModel<float> other(ModelConfig{}, 9);
  try {
    import_bundle(other, bytes);
    FAIL("expected CompatibilityError");
  } catch (const CompatibilityError& e) {
    const std::string what = e.what();
    CHECK(what.find("0x") != std::string::npos);
    CHECK(what.find("0x", what.find("0x") + 2) != std::string::npos);
  }

  auto truncated = bytes;
  truncated.resize(bytes.size() - 100);
  CHECK_THROWS_AS(import_bundle(restored, truncated), FormatError);
  auto corrupt = bytes;
  corrupt[100] ^= 1;
  CHECK_THROWS_AS(import_bundle(restored, corrupt), FormatError);
  CHECK_THROWS_AS(export_bundle(base), ContractError);
}
