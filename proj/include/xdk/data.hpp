#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdk/tensor.hpp"

namespace xdk {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Raw (pre-stacking) features, T_raw x feat_dim.
struct FeatureSequence {
  FeatureMatrix frames;
  std::uint32_t frame_period_ms = 10;

  Index raw_frames() const { return frames.rows(); }
  Index feat_dim() const { return frames.cols(); }
  // Throws DomainError on an empty or non-finite sequence.
  void validate() const;
};

enum class Split : std::uint8_t { kTrain, kDev, kTest };
std::string to_string(Split split);
Split parse_split(const std::string& name);

struct Utterance {
  std::string id;
  FeatureSequence features;
  std::vector<Index> labels;
  std::string speaker_id;
  Split split = Split::kTrain;
  std::optional<std::string> domain_tag;
};

// Output frame k is frames[stride*k .. stride*k + stack - 1] concatenated,
// so T = (T_raw - stack) / stride + 1 and the width is stack * feat_dim.
// Throws DimensionError if T_raw < stack.
FeatureMatrix stack_frames(const FeatureSequence& features, Index stack = 4, Index stride = 3);

template <typename S>
Tensor<S> to_tensor(const FeatureMatrix& m) {
  return Tensor<S>::from_matrix(m.cast<S>());
}

struct SpecAugmentConfig {
  Index num_time_masks = 2;
  Index max_time_width = 10;
  Index num_freq_masks = 2;
  // 0 means feat_dim / 8.
  Index max_freq_width = 0;
};

// Masks random time spans and channels of raw features, filling masked
// cells with the utterance mean of their channel. Time widths are clamped to
// the utterance length. Throws ParameterError if the frequency width exceeds
// feat_dim or a count is negative.
FeatureSequence spec_augment(const FeatureSequence& features, const SpecAugmentConfig& config, std::uint64_t seed);

// A synthetic speaker: x -> (I + severity * P) x + severity * b per frame.
struct SpeakerSpec {
  std::string id;
  std::uint64_t seed = 0;
  double severity = 0.0;

  // P and b are drawn from `seed`; P entries ~ N(0, 1/feat_dim), b ~ N(0, 1).
  FeatureMatrix transform(Index feat_dim) const;
  Eigen::RowVectorXf bias(Index feat_dim) const;
};

struct SyntheticCorpusConfig {
  Index vocab_size = 16;
  Index feat_dim = 16;
  Index token_pattern_len = 5;
  Index min_tokens = 2;
  Index max_tokens = 4;
  Index utt_per_speaker = 50;
  double noise_std = 0.3;
  // Seeds the token patterns shared by every speaker.
  std::uint64_t language_seed = 1;
};

// Every token maps to a fixed token_pattern_len x feat_dim pattern; an
// utterance concatenates its tokens' patterns, adds Gaussian noise, and
// applies the speaker perturbation. Splits are 80/10/10 per speaker by a
// seeded shuffle. Throws ParameterError for a severity outside [0, 1] or a
// degenerate config.
std::vector<Utterance> generate_synthetic_corpus(const SyntheticCorpusConfig& config,
                                                 std::span<const SpeakerSpec> speakers, std::uint64_t seed);

// Feature file ("XDFT"): version, feat_dim, T_raw, frame_period_ms (u32),
// f32 payload, FNV-1a checksum of the payload.
std::vector<std::uint8_t> encode_features(const FeatureSequence& features);
FeatureSequence decode_features(std::span<const std::uint8_t> bytes);
void write_features(const std::string& path, const FeatureSequence& features);
FeatureSequence read_features(const std::string& path);

// Tab-separated manifest: id, feature path, space-separated token ids,
// speaker id, split, optional domain tag. Feature paths are relative to the
// manifest's directory unless absolute.
struct ManifestEntry {
  std::string id;
  std::string feature_path;
  std::vector<Index> labels;
  std::string speaker_id;
  Split split = Split::kTrain;
  std::optional<std::string> domain_tag;
};

std::vector<ManifestEntry> parse_manifest(const std::string& text);
std::string format_manifest(std::span<const ManifestEntry> entries);

// Writes features/<id>.xdft and manifest.tsv under `dir`.
void write_corpus(const std::string& dir, std::span<const Utterance> utterances);
std::vector<Utterance> load_corpus(const std::string& manifest_path);

std::vector<const Utterance*> select(std::span<const Utterance> corpus, const std::string& speaker_id, Split split);

}  // namespace xdk
