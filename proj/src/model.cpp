#include "xdk/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "xdk/byte_io.hpp"
#include "xdk/errors.hpp"
#include "xdk/ops.hpp"

namespace xdk {

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::kLstm ? "lstm" : "transformer";
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "lstm") return EncoderKind::kLstm;
  if (name == "transformer") return EncoderKind::kTransformer;
  throw ParameterError("unknown encoder kind '" + name + "' (expected lstm or transformer)");
}

std::string to_string(AdapterPlacement placement) {
  return placement == AdapterPlacement::kAfterFeedForward ? "after-ffn" : "after-attention";
}

AdapterPlacement parse_adapter_placement(const std::string& name) {
  if (name == "after-ffn") return AdapterPlacement::kAfterFeedForward;
  if (name == "after-attention") return AdapterPlacement::kAfterAttention;
  throw ParameterError("unknown adapter placement '" + name + "' (expected after-ffn or after-attention)");
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v < 1) throw ParameterError(std::string(what) + " must be >= 1");
  };
  positive(num_encoder_layers, "num_encoder_layers");
  positive(d_model, "d_model");
  positive(d_pred, "d_pred");
  positive(joint_dim, "joint_dim");
  positive(input_dim, "input_dim");
  if (vocab_size < 2) throw ParameterError("vocab_size must be >= 2");
  if (encoder_kind == EncoderKind::kLstm) {
    positive(lstm_cells, "lstm_cells");
  } else {
    positive(num_heads, "num_heads");
    positive(d_ff, "d_ff");
    positive(max_positions, "max_positions");
    if (d_model % num_heads != 0) throw ParameterError("d_model must be divisible by num_heads");
  }
  if (!(ln_eps > 0)) throw ParameterError("ln_eps must be > 0");
}

std::string group_of(const std::string& parameter_name) {
  const auto dot = parameter_name.rfind('.');
  return dot == std::string::npos ? parameter_name : parameter_name.substr(0, dot);
}

bool group_matches(const std::string& pattern, const std::string& group) {
  if (!pattern.empty() && pattern.back() == '*') {
    const std::string prefix = pattern.substr(0, pattern.size() - 1);
    return group.compare(0, prefix.size(), prefix) == 0;
  }
  return pattern == group;
}

template <typename S>
LstmState<S> lstm_step(const LstmWeights<S>& w, const Tensor<S>& input_gates, const LstmState<S>& prev) {
  const Index c = w.cells();
  Tensor<S> gates = add(input_gates, matmul(prev.h, w.w_recurrent));
  Tensor<S> in_gate = sigmoid(slice(gates, -1, 0, c));
  Tensor<S> forget_gate = sigmoid(slice(gates, -1, c, c));
  Tensor<S> candidate = tanh(slice(gates, -1, 2 * c, c));
  Tensor<S> out_gate = sigmoid(slice(gates, -1, 3 * c, c));
  LstmState<S> next;
  next.c = add(mul(forget_gate, prev.c), mul(in_gate, candidate));
  Tensor<S> m = mul(out_gate, tanh(next.c));
  next.h = w.w_proj.defined() ? matmul(m, w.w_proj) : m;
  return next;
}

namespace {

template <typename S>
Tensor<S> normal(Shape shape, S stddev, std::mt19937_64& rng) {
  Tensor<S> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
Tensor<S> filled(Shape shape, S value) {
  Tensor<S> t(std::move(shape));
  t.matrix().setConstant(value);
  return t;
}

template <typename S>
S fan_in_std(Index fan_in) {
  return S(1) / std::sqrt(static_cast<S>(fan_in));
}

template <typename S>
LstmWeights<S> make_lstm(Index in, Index cells, Index out, std::mt19937_64& rng) {
  LstmWeights<S> w;
  w.w_input = normal<S>(Shape{in, 4 * cells}, fan_in_std<S>(in), rng);
  w.w_recurrent = normal<S>(Shape{out, 4 * cells}, fan_in_std<S>(out), rng);
  w.bias = Tensor<S>(Shape{4 * cells});
  w.bias.matrix().middleCols(cells, cells).setConstant(S(1));
  if (out != cells) w.w_proj = normal<S>(Shape{cells, out}, fan_in_std<S>(cells), rng);
  return w;
}

template <typename S>
LstmState<S> zero_state(const LstmWeights<S>& w) {
  return {Tensor<S>(Shape{1, w.output_dim()}), Tensor<S>(Shape{1, w.cells()})};
}

}  // namespace

template <typename S>
TransducerModel<S>::TransducerModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const Index d = config_.d_model;
  const Index layers = config_.num_encoder_layers;
  adapters_.resize(static_cast<std::size_t>(layers));

  if (config_.encoder_kind == EncoderKind::kLstm) {
    for (Index i = 0; i < layers; ++i) {
      const Index in = i == 0 ? config_.input_dim : d;
      lstm_layers_.push_back(make_lstm<S>(in, config_.lstm_cells, d, rng));
      const std::string group = "encoder.layer." + std::to_string(i);
      const auto& w = lstm_layers_.back();
      register_parameter(group, "w_input", w.w_input);
      register_parameter(group, "w_recurrent", w.w_recurrent);
      register_parameter(group, "bias", w.bias);
      if (w.w_proj.defined()) register_parameter(group, "w_proj", w.w_proj);
    }
  } else {
    w_in_ = normal<S>(Shape{config_.input_dim, d}, fan_in_std<S>(config_.input_dim), rng);
    b_in_ = Tensor<S>(Shape{d});
    positions_ = normal<S>(Shape{config_.max_positions, d}, S(0.1), rng);
    register_parameter("encoder.layer.0", "w_in", w_in_);
    register_parameter("encoder.layer.0", "b_in", b_in_);
    register_parameter("encoder.layer.0", "positions", positions_);
    for (Index i = 0; i < layers; ++i) {
      TransformerWeights<S> w;
      w.ln1_gain = filled<S>(Shape{d}, S(1));
      w.ln1_bias = Tensor<S>(Shape{d});
      w.w_q = normal<S>(Shape{d, d}, fan_in_std<S>(d), rng);
      w.b_q = Tensor<S>(Shape{d});
      w.w_k = normal<S>(Shape{d, d}, fan_in_std<S>(d), rng);
      w.w_v = normal<S>(Shape{d, d}, fan_in_std<S>(d), rng);
      w.b_v = Tensor<S>(Shape{d});
      w.w_o = normal<S>(Shape{d, d}, fan_in_std<S>(d), rng);
      w.b_o = Tensor<S>(Shape{d});
      w.ln2_gain = filled<S>(Shape{d}, S(1));
      w.ln2_bias = Tensor<S>(Shape{d});
      w.w_ff1 = normal<S>(Shape{d, config_.d_ff}, fan_in_std<S>(d), rng);
      w.b_ff1 = Tensor<S>(Shape{config_.d_ff});
      w.w_ff2 = normal<S>(Shape{config_.d_ff, d}, fan_in_std<S>(config_.d_ff), rng);
      w.b_ff2 = Tensor<S>(Shape{d});
      const std::string group = "encoder.layer." + std::to_string(i);
      register_parameter(group, "ln1_gain", w.ln1_gain);
      register_parameter(group, "ln1_bias", w.ln1_bias);
      register_parameter(group, "w_q", w.w_q);
      register_parameter(group, "b_q", w.b_q);
      register_parameter(group, "w_k", w.w_k);
      register_parameter(group, "w_v", w.w_v);
      register_parameter(group, "b_v", w.b_v);
      register_parameter(group, "w_o", w.w_o);
      register_parameter(group, "b_o", w.b_o);
      register_parameter(group, "ln2_gain", w.ln2_gain);
      register_parameter(group, "ln2_bias", w.ln2_bias);
      register_parameter(group, "w_ff1", w.w_ff1);
      register_parameter(group, "b_ff1", w.b_ff1);
      register_parameter(group, "w_ff2", w.w_ff2);
      register_parameter(group, "b_ff2", w.b_ff2);
      transformer_layers_.push_back(std::move(w));
    }
    final_gain_ = filled<S>(Shape{d}, S(1));
    final_bias_ = Tensor<S>(Shape{d});
    const std::string last = "encoder.layer." + std::to_string(layers - 1);
    register_parameter(last, "final_gain", final_gain_);
    register_parameter(last, "final_bias", final_bias_);
  }

  const Index dp = config_.d_pred;
  embedding_ = normal<S>(Shape{config_.outputs(), dp}, S(1), rng);
  register_parameter("prediction", "embedding", embedding_);
  for (Index i = 0; i < 2; ++i) {
    prediction_layers_.push_back(make_lstm<S>(dp, dp, dp, rng));
    const auto& w = prediction_layers_.back();
    const std::string prefix = "lstm" + std::to_string(i) + "_";
    register_parameter("prediction", prefix + "w_input", w.w_input);
    register_parameter("prediction", prefix + "w_recurrent", w.w_recurrent);
    register_parameter("prediction", prefix + "bias", w.bias);
  }

  const Index j = config_.joint_dim;
  w_joint_enc_ = normal<S>(Shape{d, j}, fan_in_std<S>(d), rng);
  w_joint_pred_ = normal<S>(Shape{dp, j}, fan_in_std<S>(dp), rng);
  b_joint_ = Tensor<S>(Shape{j});
  w_joint_out_ = normal<S>(Shape{j, config_.outputs()}, fan_in_std<S>(j), rng);
  b_joint_out_ = Tensor<S>(Shape{config_.outputs()});
  register_parameter("joint", "w_enc", w_joint_enc_);
  register_parameter("joint", "w_pred", w_joint_pred_);
  register_parameter("joint", "bias", b_joint_);
  register_parameter("joint", "w_out", w_joint_out_);
  register_parameter("joint", "b_out", b_joint_out_);

  for (auto& p : params_) p.value.set_requires_grad(true);
}

template <typename S>
void TransducerModel<S>::register_parameter(const std::string& group, const std::string& local, Tensor<S> value) {
  params_.push_back({group, group + "." + local, std::move(value)});
}

template <typename S>
std::vector<std::string> TransducerModel<S>::groups() const {
  std::vector<std::string> out;
  for (const auto& p : params_) {
    if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
  }
  return out;
}

template <typename S>
const Parameter<S>& TransducerModel<S>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw LookupError("no parameter named '" + name + "'");
}

template <typename S>
bool TransducerModel<S>::has_adapter(Index layer) const {
  return layer >= 0 && layer < config_.num_encoder_layers && adapters_[static_cast<std::size_t>(layer)].has_value();
}

template <typename S>
const ResidualAdapter<S>& TransducerModel<S>::adapter(Index layer) const {
  if (!has_adapter(layer)) throw LookupError("no adapter on encoder layer " + std::to_string(layer));
  return *adapters_[static_cast<std::size_t>(layer)];
}

template <typename S>
std::vector<Index> TransducerModel<S>::adapter_layers() const {
  std::vector<Index> out;
  for (Index i = 0; i < config_.num_encoder_layers; ++i) {
    if (has_adapter(i)) out.push_back(i);
  }
  return out;
}

template <typename S>
void TransducerModel<S>::attach_adapter(Index layer, ResidualAdapter<S> adapter) {
  if (layer < 0 || layer >= config_.num_encoder_layers) {
    throw LookupError("encoder layer " + std::to_string(layer) + " does not exist");
  }
  if (has_adapter(layer)) {
    throw ContractError("encoder layer " + std::to_string(layer) + " already has an adapter");
  }
  if (adapter.input_dim() != config_.d_model) {
    throw DimensionError("adapter width " + std::to_string(adapter.input_dim()) + " does not match d_model " +
                         std::to_string(config_.d_model));
  }
  const std::string group = "encoder.adapter." + std::to_string(layer);
  for (auto& [local, tensor] : adapter.named_tensors()) register_parameter(group, local, tensor);
  adapters_[static_cast<std::size_t>(layer)] = std::move(adapter);
}

template <typename S>
TransducerModel<S> TransducerModel<S>::clone() const {
  TransducerModel copy(config_, 0);
  for (const auto& p : params_) {
    if (p.group.rfind("encoder.adapter.", 0) == 0 && !copy.has_adapter(std::stoll(p.group.substr(16)))) {
      const Index layer = std::stoll(p.group.substr(16));
      copy.attach_adapter(layer, adapter(layer).clone());
    }
  }
  if (copy.params_.size() != params_.size()) throw InternalError("clone: registry size mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i].value.matrix() = params_[i].value.matrix();
    copy.params_[i].value.set_requires_grad(params_[i].value.requires_grad());
  }
  return copy;
}

template <typename S>
Tensor<S> TransducerModel<S>::maybe_adapt(Index layer, const Tensor<S>& x) const {
  if (!has_adapter(layer)) return x;
  return adapter_forward(*adapters_[static_cast<std::size_t>(layer)], x, static_cast<S>(config_.ln_eps));
}

template <typename S>
Tensor<S> TransducerModel<S>::encode(const Tensor<S>& features) const {
  if (features.rank() != 2 || features.cols() != config_.input_dim) {
    throw DimensionError("encoder expects features {T, " + std::to_string(config_.input_dim) + "}, got " +
                         shape_str(features.shape()));
  }
  if (features.rows() < 1) throw DimensionError("encoder needs at least one frame");
  return config_.encoder_kind == EncoderKind::kLstm ? encode_lstm(features) : encode_transformer(features);
}

template <typename S>
Tensor<S> TransducerModel<S>::encode_lstm(const Tensor<S>& features) const {
  Tensor<S> x = features;
  const Index frames = features.rows();
  for (std::size_t i = 0; i < lstm_layers_.size(); ++i) {
    const auto& w = lstm_layers_[i];
    Tensor<S> input_gates = add(matmul(x, w.w_input), w.bias);
    LstmState<S> state = zero_state(w);
    std::vector<Tensor<S>> outputs;
    outputs.reserve(static_cast<std::size_t>(frames));
    for (Index t = 0; t < frames; ++t) {
      state = lstm_step(w, slice(input_gates, 0, t, 1), state);
      outputs.push_back(state.h);
    }
    x = maybe_adapt(static_cast<Index>(i), concat<S>(std::span<const Tensor<S>>(outputs), 0));
  }
  return x;
}

template <typename S>
Tensor<S> TransducerModel<S>::encode_transformer(const Tensor<S>& features) const {
  const Index frames = features.rows();
  if (frames > config_.max_positions) {
    throw DimensionError("sequence of " + std::to_string(frames) + " frames exceeds max_positions " +
                         std::to_string(config_.max_positions));
  }
  const S eps = static_cast<S>(config_.ln_eps);
  const Index heads = config_.num_heads;
  const Index dh = config_.d_model / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  Tensor<S> x = add(add(matmul(features, w_in_), b_in_), slice(positions_, 0, 0, frames));
  for (std::size_t i = 0; i < transformer_layers_.size(); ++i) {
    const auto& w = transformer_layers_[i];
    Tensor<S> h = layer_norm(x, w.ln1_gain, w.ln1_bias, eps);
    Tensor<S> q = add(matmul(h, w.w_q), w.b_q);
    // A key bias shifts every score in a row equally, so keys carry none.
    Tensor<S> k = matmul(h, w.w_k);
    Tensor<S> v = add(matmul(h, w.w_v), w.b_v);
    std::vector<Tensor<S>> contexts;
    for (Index hd = 0; hd < heads; ++hd) {
      Tensor<S> qh = slice(q, -1, hd * dh, dh);
      Tensor<S> kh = slice(k, -1, hd * dh, dh);
      Tensor<S> vh = slice(v, -1, hd * dh, dh);
      Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      contexts.push_back(matmul(softmax(causal_mask(scores)), vh));
    }
    Tensor<S> context = heads == 1 ? contexts.front() : concat<S>(std::span<const Tensor<S>>(contexts), -1);
    x = add(x, add(matmul(context, w.w_o), w.b_o));
    if (config_.adapter_placement == AdapterPlacement::kAfterAttention) x = maybe_adapt(static_cast<Index>(i), x);

    Tensor<S> h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, eps);
    Tensor<S> ff = add(matmul(relu(add(matmul(h2, w.w_ff1), w.b_ff1)), w.w_ff2), w.b_ff2);
    x = add(x, ff);
    if (config_.adapter_placement == AdapterPlacement::kAfterFeedForward) x = maybe_adapt(static_cast<Index>(i), x);
  }
  return layer_norm(x, final_gain_, final_bias_, eps);
}

template <typename S>
typename TransducerModel<S>::PredictionState TransducerModel<S>::prediction_start() const {
  PredictionState state;
  for (const auto& w : prediction_layers_) state.layers.push_back(zero_state(w));
  return prediction_step(state, config_.blank_id());
}

template <typename S>
typename TransducerModel<S>::PredictionState TransducerModel<S>::prediction_step(const PredictionState& state,
                                                                                 Index token) const {
  const Index id = token;
  Tensor<S> x = embedding_lookup<S>(embedding_, std::span<const Index>(&id, 1));
  PredictionState next;
  for (std::size_t i = 0; i < prediction_layers_.size(); ++i) {
    const auto& w = prediction_layers_[i];
    LstmState<S> s = lstm_step(w, add(matmul(x, w.w_input), w.bias), state.layers[i]);
    x = s.h;
    next.layers.push_back(std::move(s));
  }
  next.output = x;
  return next;
}

template <typename S>
Tensor<S> TransducerModel<S>::predict(std::span<const Index> labels) const {
  for (Index y : labels) {
    if (y == config_.blank_id()) throw ContractError("blank id appears in prediction-network labels");
    if (y < 0 || y >= config_.vocab_size) {
      throw ContractError("label " + std::to_string(y) + " outside vocabulary of " +
                          std::to_string(config_.vocab_size));
    }
  }
  PredictionState state = prediction_start();
  std::vector<Tensor<S>> rows{state.output};
  for (Index y : labels) {
    state = prediction_step(state, y);
    rows.push_back(state.output);
  }
  return rows.size() == 1 ? rows.front() : concat<S>(std::span<const Tensor<S>>(rows), 0);
}

template <typename S>
Tensor<S> TransducerModel<S>::joint_encoder_projection(const Tensor<S>& encoded) const {
  return matmul(encoded, w_joint_enc_);
}

template <typename S>
LogitLattice<S> TransducerModel<S>::joint(const Tensor<S>& encoded, const Tensor<S>& predicted) const {
  if (encoded.rank() != 2 || encoded.cols() != config_.d_model) {
    throw DimensionError("joint: encoder output must be {T, d_model}, got " + shape_str(encoded.shape()));
  }
  if (predicted.rank() != 2 || predicted.cols() != config_.d_pred) {
    throw DimensionError("joint: prediction output must be {U+1, d_pred}, got " + shape_str(predicted.shape()));
  }
  const Index frames = encoded.rows();
  const Index nodes = predicted.rows();
  Tensor<S> enc_proj = joint_encoder_projection(encoded);
  Tensor<S> pred_proj = add(matmul(predicted, w_joint_pred_), b_joint_);
  std::vector<Index> enc_rows, pred_rows;
  enc_rows.reserve(static_cast<std::size_t>(frames * nodes));
  pred_rows.reserve(static_cast<std::size_t>(frames * nodes));
  for (Index t = 0; t < frames; ++t) {
    for (Index u = 0; u < nodes; ++u) {
      enc_rows.push_back(t);
      pred_rows.push_back(u);
    }
  }
  Tensor<S> hidden =
      tanh(add(embedding_lookup<S>(enc_proj, enc_rows), embedding_lookup<S>(pred_proj, pred_rows)));
  Tensor<S> logits = add(matmul(hidden, w_joint_out_), b_joint_out_);
  return LogitLattice<S>{reshape(log_softmax(logits), Shape{frames, nodes, config_.outputs()})};
}

template <typename S>
Tensor<S> TransducerModel<S>::joint_node(const Tensor<S>& projected_row, const Tensor<S>& prediction_output) const {
  Tensor<S> pred_proj = add(matmul(prediction_output, w_joint_pred_), b_joint_);
  Tensor<S> hidden = tanh(add(projected_row, pred_proj));
  return log_softmax(add(matmul(hidden, w_joint_out_), b_joint_out_));
}

template <typename S>
LogitLattice<S> TransducerModel<S>::forward(const Tensor<S>& features, std::span<const Index> labels) const {
  return joint(encode(features), predict(labels));
}

template <typename S>
ParamCounts count_params(const TransducerModel<S>& model, std::span<const std::string> trainable_patterns) {
  const auto groups = model.groups();
  for (const auto& pattern : trainable_patterns) {
    const bool any = std::any_of(groups.begin(), groups.end(),
                                 [&](const std::string& g) { return group_matches(pattern, g); });
    if (!any) throw LookupError("no parameter group matches '" + pattern + "'");
  }
  ParamCounts counts;
  for (const auto& p : model.parameters()) {
    const Index n = p.value.size();
    counts.per_group[p.group] += n;
    counts.total += n;
    bool trainable;
    if (trainable_patterns.empty()) {
      trainable = p.value.requires_grad();
    } else {
      trainable = std::any_of(trainable_patterns.begin(), trainable_patterns.end(),
                              [&](const std::string& pat) { return group_matches(pat, p.group); });
    }
    if (trainable) counts.trainable += n;
  }
  return counts;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

bool is_adapter_group(const std::string& group) { return group.rfind("encoder.adapter.", 0) == 0; }

template <typename S>
void append_f32(ByteWriter& w, const Tensor<S>& t) {
  for (S v : t.data()) w.put<float>(static_cast<float>(v));
}

template <typename S>
void append_f32(std::vector<std::uint8_t>& out, const Tensor<S>& t) {
  for (S v : t.data()) {
    const float f = static_cast<float>(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
    out.insert(out.end(), p, p + sizeof(float));
  }
}

void write_config(ByteWriter& w, const ModelConfig& c) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.encoder_kind));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.adapter_placement));
  w.put<std::uint16_t>(0);
  for (Index v : {c.num_encoder_layers, c.d_model, c.num_heads, c.lstm_cells, c.d_ff, c.d_pred, c.joint_dim,
                  c.vocab_size, c.input_dim, c.max_positions, c.blank_id()}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<double>(c.ln_eps);
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  const auto kind = r.get<std::uint8_t>();
  const auto placement = r.get<std::uint8_t>();
  r.get<std::uint16_t>();
  if (kind > 1 || placement > 1) throw FormatError("checkpoint: unknown encoder kind or adapter placement");
  c.encoder_kind = static_cast<EncoderKind>(kind);
  c.adapter_placement = static_cast<AdapterPlacement>(placement);
  Index* fields[] = {&c.num_encoder_layers, &c.d_model, &c.num_heads, &c.lstm_cells, &c.d_ff,
                     &c.d_pred, &c.joint_dim, &c.vocab_size, &c.input_dim, &c.max_positions};
  for (Index* f : fields) *f = r.get<std::uint32_t>();
  const Index blank = r.get<std::uint32_t>();
  c.ln_eps = r.get<double>();
  if (blank != c.blank_id()) throw FormatError("checkpoint: blank id does not equal vocab_size");
  return c;
}

}  // namespace

template <typename S>
std::vector<std::uint8_t> save_checkpoint(const TransducerModel<S>& model) {
  ByteWriter w;
  w.put_magic("XDKT");
  w.put<std::uint32_t>(kCheckpointVersion);
  write_config(w, model.config());
  const auto& params = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  Fnv1a64 checksum;
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (Index dim : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
    const std::size_t start = w.size();
    append_f32(w, p.value);
    checksum.update(w.bytes().data() + start, w.size() - start);
  }
  w.put<std::uint64_t>(checksum.digest());
  return w.take();
}

template <typename S>
TransducerModel<S> load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic("XDKT");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const ModelConfig config = read_config(r);
  config.validate();

  struct Record {
    std::string name;
    Shape shape;
    std::span<const std::uint8_t> payload;
  };
  std::vector<Record> records;
  const auto count = r.get<std::uint32_t>();
  Fnv1a64 checksum;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 4) throw FormatError("checkpoint: tensor '" + rec.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.get<std::uint32_t>());
    rec.payload = r.get_bytes(static_cast<std::size_t>(numel(rec.shape)) * sizeof(float));
    checksum.update(rec.payload);
    records.push_back(std::move(rec));
  }
  const auto stored = r.get<std::uint64_t>();
  if (stored != checksum.digest()) throw FormatError("checkpoint: payload checksum mismatch");
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after checksum");

  TransducerModel<S> model(config, 0);
  for (const auto& rec : records) {
    const std::string group = group_of(rec.name);
    if (is_adapter_group(group) && rec.name == group + ".w_down") {
      const Index layer = std::stoll(group.substr(16));
      if (rec.shape.size() != 2) throw FormatError("checkpoint: malformed adapter tensor " + rec.name);
      model.attach_adapter(layer, make_adapter<S>(rec.shape[0], rec.shape[1]));
    }
  }
  if (model.parameters().size() != records.size()) {
    throw FormatError("checkpoint: " + std::to_string(records.size()) + " tensors but the config implies " +
                      std::to_string(model.parameters().size()));
  }
  for (const auto& rec : records) {
    auto& params = model.parameters();
    auto it = std::find_if(params.begin(), params.end(), [&](const Parameter<S>& p) { return p.name == rec.name; });
    if (it == params.end()) throw FormatError("checkpoint: unexpected tensor '" + rec.name + "'");
    if (it->value.shape() != rec.shape) {
      throw FormatError("checkpoint: tensor '" + rec.name + "' has shape " + shape_str(rec.shape) + ", expected " +
                        shape_str(it->value.shape()));
    }
    auto data = it->value.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      float f;
      std::memcpy(&f, rec.payload.data() + k * sizeof(float), sizeof(float));
      data[k] = static_cast<S>(f);
    }
  }
  return model;
}

template <typename S>
std::uint64_t base_checksum(const TransducerModel<S>& model) {
  std::vector<std::uint8_t> bytes;
  for (const auto& p : model.parameters()) {
    if (!is_adapter_group(p.group)) append_f32(bytes, p.value);
  }
  return fnv1a64(bytes);
}

template <typename S>
std::vector<std::uint8_t> group_payload(const TransducerModel<S>& model, const std::string& pattern) {
  std::vector<std::uint8_t> bytes;
  for (const auto& p : model.parameters()) {
    if (group_matches(pattern, p.group)) append_f32(bytes, p.value);
  }
  return bytes;
}

template class TransducerModel<float>;
template class TransducerModel<double>;
template class TransducerModel<long double>;

#define XDK_INSTANTIATE_MODEL(S)                                                                   \
  template LstmState<S> lstm_step(const LstmWeights<S>&, const Tensor<S>&, const LstmState<S>&);   \
  template ParamCounts count_params(const TransducerModel<S>&, std::span<const std::string>);      \
  template std::vector<std::uint8_t> save_checkpoint(const TransducerModel<S>&);                   \
  template TransducerModel<S> load_checkpoint(std::span<const std::uint8_t>);                      \
  template std::uint64_t base_checksum(const TransducerModel<S>&);                                 \
  template std::vector<std::uint8_t> group_payload(const TransducerModel<S>&, const std::string&);

XDK_INSTANTIATE_MODEL(float)
XDK_INSTANTIATE_MODEL(double)
XDK_INSTANTIATE_MODEL(long double)

}  // namespace xdk
