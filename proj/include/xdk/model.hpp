#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdk/lattice.hpp"
#include "xdk/residual_adapter.hpp"
#include "xdk/tensor.hpp"

namespace xdk {

enum class EncoderKind : std::uint8_t { kLstm = 0, kTransformer = 1 };
enum class AdapterPlacement : std::uint8_t { kAfterFeedForward = 0, kAfterAttention = 1 };

std::string to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);
std::string to_string(AdapterPlacement placement);
AdapterPlacement parse_adapter_placement(const std::string& name);

struct ModelConfig {
  EncoderKind encoder_kind = EncoderKind::kLstm;
  Index num_encoder_layers = 4;
  Index d_model = 64;
  Index num_heads = 4;
  // LSTM encoder layers have this many cells, projected back to d_model.
  Index lstm_cells = 512;
  // Transformer feed-forward width.
  Index d_ff = 2048;
  Index d_pred = 32;
  Index joint_dim = 64;
  // Real tokens; the joint emits vocab_size + 1 outputs, blank last.
  Index vocab_size = 16;
  Index input_dim = 64;
  Index max_positions = 256;
  AdapterPlacement adapter_placement = AdapterPlacement::kAfterFeedForward;
  double ln_eps = 1e-5;

  Index blank_id() const { return vocab_size; }
  Index outputs() const { return vocab_size + 1; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct Parameter {
  std::string group;
  std::string name;
  Tensor<S> value;
};

template <typename S>
struct LstmWeights {
  Tensor<S> w_input;      // {in, 4c}
  Tensor<S> w_recurrent;  // {out, 4c}
  Tensor<S> bias;         // {4c}, gate order i, f, g, o
  Tensor<S> w_proj;       // {c, out}; undefined when out == c

  Index cells() const { return w_recurrent.shape()[1] / 4; }
  Index output_dim() const { return w_recurrent.shape()[0]; }
};

template <typename S>
struct LstmState {
  Tensor<S> h;  // {1, out}
  Tensor<S> c;  // {1, cells}
};

template <typename S>
struct TransformerWeights {
  Tensor<S> ln1_gain, ln1_bias;
  Tensor<S> w_q, b_q, w_k, w_v, b_v, w_o, b_o;
  Tensor<S> ln2_gain, ln2_bias;
  Tensor<S> w_ff1, b_ff1, w_ff2, b_ff2;
};

struct ParamCounts {
  std::map<std::string, Index> per_group;
  Index total = 0;
  Index trainable = 0;
  double trainable_ratio() const { return total ? static_cast<double>(trainable) / total : 0.0; }
};

// Encoder stack (LSTM or causal pre-LN Transformer) + 2-layer LSTM
// prediction network + additive tanh joint. Parameters live in a registry
// of named groups: encoder.layer.i, encoder.adapter.i, prediction, joint.
template <typename S>
class TransducerModel {
 public:
  struct PredictionState {
    std::vector<LstmState<S>> layers;
    Tensor<S> output;  // {1, d_pred}
  };

  TransducerModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // features {T, input_dim} -> {T, d_model}
  Tensor<S> encode(const Tensor<S>& features) const;
  // labels of length U -> {U+1, d_pred}; row 0 is the start-state output.
  Tensor<S> predict(std::span<const Index> labels) const;
  LogitLattice<S> joint(const Tensor<S>& encoded, const Tensor<S>& predicted) const;
  LogitLattice<S> forward(const Tensor<S>& features, std::span<const Index> labels) const;

  // Incremental interface used by greedy decoding.
  PredictionState prediction_start() const;
  PredictionState prediction_step(const PredictionState& state, Index token) const;
  Tensor<S> joint_encoder_projection(const Tensor<S>& encoded) const;
  // One node: projected encoder row {1, J} and prediction output {1, d_pred}
  // -> log-probs {1, V+1}.
  Tensor<S> joint_node(const Tensor<S>& projected_row, const Tensor<S>& prediction_output) const;

  std::vector<Parameter<S>>& parameters() { return params_; }
  const std::vector<Parameter<S>>& parameters() const { return params_; }
  std::vector<std::string> groups() const;
  const Parameter<S>& parameter(const std::string& name) const;

  bool has_adapter(Index layer) const;
  const ResidualAdapter<S>& adapter(Index layer) const;
  std::vector<Index> adapter_layers() const;
  // Registers the adapter's tensors under encoder.adapter.<layer>.
  void attach_adapter(Index layer, ResidualAdapter<S> adapter);

  TransducerModel clone() const;

 private:
  void register_parameter(const std::string& group, const std::string& local, Tensor<S> value);
  Tensor<S> encode_lstm(const Tensor<S>& features) const;
  Tensor<S> encode_transformer(const Tensor<S>& features) const;
  Tensor<S> maybe_adapt(Index layer, const Tensor<S>& x) const;

  ModelConfig config_;
  std::vector<Parameter<S>> params_;

  std::vector<LstmWeights<S>> lstm_layers_;
  std::vector<TransformerWeights<S>> transformer_layers_;
  Tensor<S> w_in_, b_in_, positions_, final_gain_, final_bias_;
  std::vector<std::optional<ResidualAdapter<S>>> adapters_;

  Tensor<S> embedding_;  // {V+1, d_pred}; row V is the start symbol
  std::vector<LstmWeights<S>> prediction_layers_;

  Tensor<S> w_joint_enc_, w_joint_pred_, b_joint_, w_joint_out_, b_joint_out_;
};

// Group name of a registry entry: the name up to its last '.'.
std::string group_of(const std::string& parameter_name);

// Does `group` match `pattern`? Patterns are exact names or end in '*'
// (prefix match), e.g. "encoder.adapter.*", "encoder.*", "encoder.layer.0".
bool group_matches(const std::string& pattern, const std::string& group);

// Counts parameters per group. Trainable = groups matching any pattern; with
// no patterns the tensors' requires_grad flags decide. Throws LookupError for
// a pattern that matches no group.
template <typename S>
ParamCounts count_params(const TransducerModel<S>& model, std::span<const std::string> trainable_patterns = {});

// One LSTM step shared by the encoder and prediction network.
// input_gates is x W_input + bias for this step, {1, 4c}.
template <typename S>
LstmState<S> lstm_step(const LstmWeights<S>& w, const Tensor<S>& input_gates, const LstmState<S>& prev);

// Checkpoint I/O ("XDKT"). Payloads are f32 little-endian.
template <typename S>
std::vector<std::uint8_t> save_checkpoint(const TransducerModel<S>& model);
template <typename S>
TransducerModel<S> load_checkpoint(std::span<const std::uint8_t> bytes);

// FNV-1a over the f32 payloads of every non-adapter parameter, in registry
// order. Equals the trailing checksum of a checkpoint saved without adapters.
template <typename S>
std::uint64_t base_checksum(const TransducerModel<S>& model);

// f32 little-endian bytes of the tensors in the matching groups, registry order.
template <typename S>
std::vector<std::uint8_t> group_payload(const TransducerModel<S>& model, const std::string& pattern);

extern template class TransducerModel<float>;
extern template class TransducerModel<double>;
extern template class TransducerModel<long double>;

}  // namespace xdk
