#include "xdk/adapters.hpp"

#include <algorithm>
#include <cstring>
#include <random>
#include <sstream>

#include "xdk/byte_io.hpp"
#include "xdk/errors.hpp"

namespace xdk {
namespace {

constexpr std::uint32_t kBundleVersion = 1;

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

std::uint32_t kind_tag(EncoderKind kind, AdapterPlacement placement) {
  return static_cast<std::uint32_t>(kind) | (static_cast<std::uint32_t>(placement) << 8);
}

struct ParsedLayer {
  Index layer;
  Index d_i;
  Index d_b;
  std::vector<std::span<const std::uint8_t>> tensors;
};

struct ParsedBundle {
  BundleInfo info;
  std::vector<ParsedLayer> layers;
};

ParsedBundle parse(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "adapter bundle");
  r.expect_magic("XDAB");
  const auto version = r.get<std::uint32_t>();
  if (version != kBundleVersion) throw FormatError("adapter bundle: unsupported version " + std::to_string(version));
  ParsedBundle out;
  out.info.base_model_checksum = r.get<std::uint64_t>();
  const auto tag = r.get<std::uint32_t>();
  if ((tag & 0xff) > 1 || ((tag >> 8) & 0xff) > 1 || (tag >> 16) != 0) {
    throw FormatError("adapter bundle: unknown encoder kind tag " + std::to_string(tag));
  }
  out.info.encoder_kind = static_cast<EncoderKind>(tag & 0xff);
  out.info.placement = static_cast<AdapterPlacement>((tag >> 8) & 0xff);
  const auto count = r.get<std::uint32_t>();
  Fnv1a64 checksum;
  for (std::uint32_t i = 0; i < count; ++i) {
    ParsedLayer layer;
    layer.layer = r.get<std::uint32_t>();
    layer.d_i = r.get<std::uint32_t>();
    layer.d_b = r.get<std::uint32_t>();
    if (layer.d_i < 1 || layer.d_b < 1) throw FormatError("adapter bundle: zero adapter dimension");
    const std::size_t sizes[] = {static_cast<std::size_t>(layer.d_i), static_cast<std::size_t>(layer.d_i),
                                 static_cast<std::size_t>(layer.d_i * layer.d_b), static_cast<std::size_t>(layer.d_b),
                                 static_cast<std::size_t>(layer.d_b * layer.d_i), static_cast<std::size_t>(layer.d_i)};
    for (std::size_t n : sizes) {
      auto payload = r.get_bytes(n * sizeof(float));
      checksum.update(payload);
      layer.tensors.push_back(payload);
    }
    out.info.layers.push_back(layer.layer);
    out.info.d_i = layer.d_i;
    out.info.d_b = layer.d_b;
    out.layers.push_back(std::move(layer));
  }
  const auto stored = r.get<std::uint64_t>();
  if (stored != checksum.digest()) throw FormatError("adapter bundle: payload checksum mismatch");
  if (r.remaining() != 0) throw FormatError("adapter bundle: trailing bytes after checksum");
  return out;
}

}  // namespace

template <typename S>
void inject(TransducerModel<S>& model, const AdapterConfig& config, std::uint64_t seed) {
  if (config.d_b < 1) throw ParameterError("adapter bottleneck d_b must be >= 1");
  if (!(config.init_std >= 0)) throw ParameterError("adapter init_std must be >= 0");
  std::vector<Index> layers = config.layers;
  if (layers.empty()) {
    for (Index i = 0; i < model.config().num_encoder_layers; ++i) layers.push_back(i);
  }
  for (Index layer : layers) {
    if (layer < 0 || layer >= model.config().num_encoder_layers) {
      throw ParameterError("adapter layer " + std::to_string(layer) + " is not an encoder layer");
    }
    if (model.has_adapter(layer)) {
      throw ContractError("encoder layer " + std::to_string(layer) + " already has an adapter");
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, config.init_std);
  for (Index layer : layers) {
    ResidualAdapter<S> a = make_adapter<S>(model.config().d_model, config.d_b);
    for (auto& v : a.w_down.data()) v = static_cast<S>(dist(rng));
    for (auto& v : a.w_up.data()) v = static_cast<S>(dist(rng));
    for (auto& [name, t] : a.named_tensors()) t.set_requires_grad(true);
    model.attach_adapter(layer, std::move(a));
  }
}

template <typename S>
void apply_mask(TransducerModel<S>& model, const TrainableMask& mask) {
  if (mask.groups.empty()) throw ContractError("trainable mask is empty; nothing would train");
  const auto groups = model.groups();
  for (const auto& pattern : mask.groups) {
    if (std::none_of(groups.begin(), groups.end(), [&](const std::string& g) { return group_matches(pattern, g); })) {
      throw LookupError("trainable mask entry '" + pattern + "' matches no parameter group");
    }
  }
  for (auto& p : model.parameters()) {
    const bool on = std::any_of(mask.groups.begin(), mask.groups.end(),
                                [&](const std::string& pat) { return group_matches(pat, p.group); });
    p.value.set_requires_grad(on);
    p.value.zero_grad();
  }
}

template <typename S>
std::vector<std::uint8_t> export_bundle(const TransducerModel<S>& model) {
  const auto layers = model.adapter_layers();
  if (layers.empty()) throw ContractError("export_bundle: model has no adapters");
  ByteWriter w;
  w.put_magic("XDAB");
  w.put<std::uint32_t>(kBundleVersion);
  w.put<std::uint64_t>(base_checksum(model));
  w.put<std::uint32_t>(kind_tag(model.config().encoder_kind, model.config().adapter_placement));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
  Fnv1a64 checksum;
  for (Index layer : layers) {
    const auto& a = model.adapter(layer);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.input_dim()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.bottleneck_dim()));
    for (const auto& [name, t] : a.named_tensors()) {
      const std::size_t start = w.size();
      for (S v : t.data()) w.put<float>(static_cast<float>(v));
      checksum.update(w.bytes().data() + start, w.size() - start);
    }
  }
  w.put<std::uint64_t>(checksum.digest());
  return w.take();
}

BundleInfo read_bundle_info(std::span<const std::uint8_t> bytes) { return parse(bytes).info; }

template <typename S>
void import_bundle(TransducerModel<S>& model, std::span<const std::uint8_t> bytes) {
  const ParsedBundle bundle = parse(bytes);
  const std::uint64_t expected = base_checksum(model);
  if (bundle.info.base_model_checksum != expected) {
    throw CompatibilityError("adapter bundle was trained on base model " + hex(bundle.info.base_model_checksum) +
                             " but this model is " + hex(expected));
  }
  if (bundle.info.encoder_kind != model.config().encoder_kind ||
      bundle.info.placement != model.config().adapter_placement) {
    throw CompatibilityError("adapter bundle encoder kind/placement does not match the model");
  }
  for (const auto& layer : bundle.layers) {
    if (layer.d_i != model.config().d_model) {
      throw CompatibilityError("adapter bundle width " + std::to_string(layer.d_i) + " does not match d_model " +
                               std::to_string(model.config().d_model));
    }
    if (!model.has_adapter(layer.layer)) {
      ResidualAdapter<S> a = make_adapter<S>(layer.d_i, layer.d_b);
      for (auto& [name, t] : a.named_tensors()) t.set_requires_grad(true);
      model.attach_adapter(layer.layer, std::move(a));
    }
    const auto& a = model.adapter(layer.layer);
    if (a.bottleneck_dim() != layer.d_b) {
      throw CompatibilityError("adapter on layer " + std::to_string(layer.layer) + " has d_b " +
                               std::to_string(a.bottleneck_dim()) + ", bundle has " + std::to_string(layer.d_b));
    }
    auto tensors = a.named_tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      auto data = tensors[k].second.data();
      const auto& payload = layer.tensors[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        float f;
        std::memcpy(&f, payload.data() + i * sizeof(float), sizeof(float));
        data[i] = static_cast<S>(f);
      }
    }
  }
}

#define XDK_INSTANTIATE_ADAPTERS(S)                                                   \
  template void inject(TransducerModel<S>&, const AdapterConfig&, std::uint64_t);     \
  template void apply_mask(TransducerModel<S>&, const TrainableMask&);                \
  template std::vector<std::uint8_t> export_bundle(const TransducerModel<S>&);        \
  template void import_bundle(TransducerModel<S>&, std::span<const std::uint8_t>);

XDK_INSTANTIATE_ADAPTERS(float)
XDK_INSTANTIATE_ADAPTERS(double)

}  // namespace xdk
