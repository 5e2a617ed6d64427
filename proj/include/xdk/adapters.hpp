#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xdk/model.hpp"

namespace xdk {

struct AdapterConfig {
  Index d_b = 8;
  double init_std = 1e-3;
  // Encoder layers that receive an adapter; empty means all of them.
  std::vector<Index> layers;
};

// Attaches one freshly initialized adapter per selected encoder layer.
// Projection matrices are drawn from N(0, init_std^2); biases start at zero
// and the adapter LayerNorm at identity. Base tensors are not touched.
// Throws ContractError if a selected layer already has an adapter.
template <typename S>
void inject(TransducerModel<S>& model, const AdapterConfig& config, std::uint64_t seed);

// Set of group patterns that remain trainable (see group_matches).
struct TrainableMask {
  std::vector<std::string> groups;

  static TrainableMask adapters_only() { return {{"encoder.adapter.*"}}; }
  static TrainableMask encoder() { return {{"encoder.*"}}; }
  static TrainableMask encoder_layers(Index first_n) {
    TrainableMask m;
    for (Index i = 0; i < first_n; ++i) m.groups.push_back("encoder.layer." + std::to_string(i));
    return m;
  }
};

// Marks matching tensors trainable and freezes everything else.
template <typename S>
void apply_mask(TransducerModel<S>& model, const TrainableMask& mask);

// Fixed size of an adapter bundle: 24-byte header, 12 bytes per layer
// record, the f32 payload, and the 8-byte trailing checksum.
constexpr std::size_t bundle_size_bytes(Index layers, Index d_i, Index d_b) {
  return 24 + static_cast<std::size_t>(layers) * (12 + 4 * static_cast<std::size_t>(adapter_parameter_count(d_i, d_b))) + 8;
}

struct BundleInfo {
  std::uint64_t base_model_checksum = 0;
  EncoderKind encoder_kind = EncoderKind::kLstm;
  AdapterPlacement placement = AdapterPlacement::kAfterFeedForward;
  std::vector<Index> layers;
  Index d_i = 0;
  Index d_b = 0;
};

template <typename S>
std::vector<std::uint8_t> export_bundle(const TransducerModel<S>& model);

// Installs the bundle's adapters (attaching them if absent). Throws
// CompatibilityError if the bundle was trained on a different base model.
template <typename S>
void import_bundle(TransducerModel<S>& model, std::span<const std::uint8_t> bytes);

BundleInfo read_bundle_info(std::span<const std::uint8_t> bytes);

}  // namespace xdk
