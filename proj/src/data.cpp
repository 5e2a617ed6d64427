#include "xdk/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "xdk/byte_io.hpp"
#include "xdk/errors.hpp"

namespace xdk {
namespace {

constexpr std::uint32_t kFeatureVersion = 1;

std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(s);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

void FeatureSequence::validate() const {
  if (frames.rows() < 1 || frames.cols() < 1) throw DomainError("feature sequence is empty");
  if (!frames.allFinite()) throw DomainError("feature sequence contains NaN or Inf");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  throw InternalError("unknown split");
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "dev") return Split::kDev;
  if (name == "test") return Split::kTest;
  throw ParameterError("unknown split '" + name + "' (expected train, dev, or test)");
}

FeatureMatrix stack_frames(const FeatureSequence& features, Index stack, Index stride) {
  if (stack < 1 || stride < 1) throw ParameterError("stack and stride must be >= 1");
  const Index raw = features.raw_frames();
  if (raw < stack) {
    throw DimensionError("utterance too short to stack: " + std::to_string(raw) + " frames < stack " +
                         std::to_string(stack));
  }
  const Index d = features.feat_dim();
  const Index frames = (raw - stack) / stride + 1;
  FeatureMatrix out(frames, stack * d);
  for (Index k = 0; k < frames; ++k) {
    for (Index j = 0; j < stack; ++j) out.block(k, j * d, 1, d) = features.frames.row(k * stride + j);
  }
  return out;
}

FeatureSequence spec_augment(const FeatureSequence& features, const SpecAugmentConfig& config, std::uint64_t seed) {
  const Index frames = features.raw_frames();
  const Index d = features.feat_dim();
  const Index freq_width = config.max_freq_width == 0 ? d / 8 : config.max_freq_width;
  if (config.num_time_masks < 0 || config.num_freq_masks < 0 || config.max_time_width < 0 || freq_width < 0) {
    throw ParameterError("SpecAugment counts and widths must be >= 0");
  }
  if (freq_width > d) {
    throw ParameterError("SpecAugment frequency width " + std::to_string(freq_width) + " exceeds feat_dim " +
                         std::to_string(d));
  }
  FeatureSequence out = features;
  if (config.num_time_masks == 0 && config.num_freq_masks == 0) return out;
  const Eigen::RowVectorXf mean = features.frames.colwise().mean();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  const Index time_width = std::min(config.max_time_width, frames);
  for (Index m = 0; m < config.num_time_masks; ++m) {
    const Index w = uniform(0, time_width);
    const Index t0 = uniform(0, frames - w);
    for (Index t = t0; t < t0 + w; ++t) out.frames.row(t) = mean;
  }
  for (Index m = 0; m < config.num_freq_masks; ++m) {
    const Index w = uniform(0, freq_width);
    const Index f0 = uniform(0, d - w);
    for (Index f = f0; f < f0 + w; ++f) out.frames.col(f).setConstant(mean(f));
  }
  return out;
}

FeatureMatrix SpeakerSpec::transform(Index feat_dim) const {
  auto rng = make_rng({seed, 0x7072});
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(feat_dim)));
  FeatureMatrix p(feat_dim, feat_dim);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(dist(rng));
  FeatureMatrix m = FeatureMatrix::Identity(feat_dim, feat_dim);
  m += static_cast<float>(severity) * p;
  return m;
}

Eigen::RowVectorXf SpeakerSpec::bias(Index feat_dim) const {
  auto rng = make_rng({seed, 0x6269});
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::RowVectorXf b(feat_dim);
  for (Index i = 0; i < feat_dim; ++i) b(i) = static_cast<float>(severity * dist(rng));
  return b;
}

std::vector<Utterance> generate_synthetic_corpus(const SyntheticCorpusConfig& config,
                                                 std::span<const SpeakerSpec> speakers, std::uint64_t seed) {
  if (config.vocab_size < 2) throw ParameterError("synthetic corpus needs vocab_size >= 2");
  if (config.feat_dim < 1 || config.token_pattern_len < 1) {
    throw ParameterError("feat_dim and token_pattern_len must be >= 1");
  }
  if (config.min_tokens < 1 || config.max_tokens < config.min_tokens) {
    throw ParameterError("need 1 <= min_tokens <= max_tokens");
  }
  if (config.utt_per_speaker < 1) throw ParameterError("utt_per_speaker must be >= 1");
  if (!(config.noise_std >= 0)) throw ParameterError("noise_std must be >= 0");
  for (const auto& s : speakers) {
    if (!(s.severity >= 0.0 && s.severity <= 1.0)) {
      throw ParameterError("speaker '" + s.id + "' severity " + std::to_string(s.severity) + " outside [0, 1]");
    }
  }

  const Index d = config.feat_dim;
  const Index len = config.token_pattern_len;
  std::vector<FeatureMatrix> patterns;
  {
    auto rng = make_rng({config.language_seed, 0x6c61});
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Index v = 0; v < config.vocab_size; ++v) {
      FeatureMatrix p(len, d);
      for (Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(dist(rng));
      patterns.push_back(std::move(p));
    }
  }

  std::vector<Utterance> corpus;
  for (std::size_t s = 0; s < speakers.size(); ++s) {
    const auto& speaker = speakers[s];
    const FeatureMatrix m = speaker.transform(d);
    const Eigen::RowVectorXf b = speaker.bias(d);

    const Index n = config.utt_per_speaker;
    std::vector<Split> splits(static_cast<std::size_t>(n), Split::kTrain);
    {
      const Index n_dev = static_cast<Index>(std::llround(0.1 * static_cast<double>(n)));
      const Index n_test = static_cast<Index>(std::llround(0.1 * static_cast<double>(n)));
      std::vector<Index> order(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      auto rng = make_rng({seed, s, 0x7370});
      std::shuffle(order.begin(), order.end(), rng);
      for (Index i = 0; i < n_dev; ++i) splits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Split::kDev;
      for (Index i = n_dev; i < n_dev + n_test && i < n; ++i) {
        splits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = Split::kTest;
      }
    }

    for (Index u = 0; u < n; ++u) {
      auto rng = make_rng({seed, s, static_cast<std::uint64_t>(u)});
      std::normal_distribution<double> noise(0.0, config.noise_std);
      Utterance utt;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%04lld", static_cast<long long>(u));
      utt.id = speaker.id + "-" + buf;
      utt.speaker_id = speaker.id;
      utt.split = splits[static_cast<std::size_t>(u)];
      const Index count = std::uniform_int_distribution<Index>(config.min_tokens, config.max_tokens)(rng);
      for (Index k = 0; k < count; ++k) {
        utt.labels.push_back(std::uniform_int_distribution<Index>(0, config.vocab_size - 1)(rng));
      }
      FeatureMatrix x(count * len, d);
      for (Index k = 0; k < count; ++k) x.middleRows(k * len, len) = patterns[static_cast<std::size_t>(utt.labels[k])];
      for (Index i = 0; i < x.size(); ++i) x.data()[i] += static_cast<float>(noise(rng));
      utt.features.frames = (x * m.transpose()).rowwise() + b;
      corpus.push_back(std::move(utt));
    }
  }
  return corpus;
}

std::vector<std::uint8_t> encode_features(const FeatureSequence& features) {
  features.validate();
  ByteWriter w;
  w.put_magic("XDFT");
  w.put<std::uint32_t>(kFeatureVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(features.feat_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(features.raw_frames()));
  w.put<std::uint32_t>(features.frame_period_ms);
  const std::size_t start = w.size();
  for (Index i = 0; i < features.frames.size(); ++i) w.put<float>(features.frames.data()[i]);
  const std::uint64_t checksum = fnv1a64(std::span<const std::uint8_t>(w.bytes()).subspan(start));
  w.put<std::uint64_t>(checksum);
  return w.take();
}

FeatureSequence decode_features(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "feature file");
  r.expect_magic("XDFT");
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureVersion) throw FormatError("feature file: unsupported version " + std::to_string(version));
  const auto dim = r.get<std::uint32_t>();
  const auto frames = r.get<std::uint32_t>();
  FeatureSequence out;
  out.frame_period_ms = r.get<std::uint32_t>();
  if (dim == 0 || frames == 0) throw FormatError("feature file: empty feature matrix");
  const auto payload = r.get_bytes(static_cast<std::size_t>(dim) * frames * sizeof(float));
  if (r.get<std::uint64_t>() != fnv1a64(payload)) throw FormatError("feature file: payload checksum mismatch");
  if (r.remaining() != 0) throw FormatError("feature file: trailing bytes after checksum");
  out.frames.resize(frames, dim);
  std::memcpy(out.frames.data(), payload.data(), payload.size());
  if (!out.frames.allFinite()) throw FormatError("feature file: non-finite values");
  return out;
}

void write_features(const std::string& path, const FeatureSequence& features) {
  write_file(path, encode_features(features));
}

FeatureSequence read_features(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return decode_features(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_on(line, '\t');
    auto fail = [&](const std::string& why) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() < 5 || fields.size() > 6) {
      fail("expected 5 or 6 tab-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.id = fields[0];
    e.feature_path = fields[1];
    if (e.id.empty() || e.feature_path.empty()) fail("empty id or feature path");
    std::istringstream tokens(fields[2]);
    std::string tok;
    while (tokens >> tok) {
      std::size_t used = 0;
      long long v = -1;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0) fail("bad token id '" + tok + "'");
      e.labels.push_back(static_cast<Index>(v));
    }
    e.speaker_id = fields[3];
    try {
      e.split = parse_split(fields[4]);
    } catch (const ParameterError& err) {
      fail(err.what());
    }
    if ((e.split == Split::kTrain || e.split == Split::kDev) && e.labels.empty()) {
      fail("utterance '" + e.id + "' in " + fields[4] + " split has no labels");
    }
    if (fields.size() == 6 && !fields[5].empty()) e.domain_tag = fields[5];
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string format_manifest(std::span<const ManifestEntry> entries) {
  std::ostringstream out;
  for (const auto& e : entries) {
    out << e.id << '\t' << e.feature_path << '\t';
    for (std::size_t i = 0; i < e.labels.size(); ++i) out << (i ? " " : "") << e.labels[i];
    out << '\t' << e.speaker_id << '\t' << to_string(e.split);
    if (e.domain_tag) out << '\t' << *e.domain_tag;
    out << '\n';
  }
  return out.str();
}

void write_corpus(const std::string& dir, std::span<const Utterance> utterances) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "features");
  std::vector<ManifestEntry> entries;
  for (const auto& u : utterances) {
    const std::string rel = "features/" + u.id + ".xdft";
    write_features((fs::path(dir) / rel).string(), u.features);
    entries.push_back({u.id, rel, u.labels, u.speaker_id, u.split, u.domain_tag});
  }
  const std::string text = format_manifest(entries);
  write_file((fs::path(dir) / "manifest.tsv").string(),
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<Utterance> load_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const auto bytes = read_file(manifest_path);
  const auto entries = parse_manifest(std::string(bytes.begin(), bytes.end()));
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Utterance> out;
  for (const auto& e : entries) {
    fs::path p(e.feature_path);
    if (p.is_relative()) p = base / p;
    out.push_back({e.id, read_features(p.string()), e.labels, e.speaker_id, e.split, e.domain_tag});
  }
  return out;
}

std::vector<const Utterance*> select(std::span<const Utterance> corpus, const std::string& speaker_id, Split split) {
  std::vector<const Utterance*> out;
  for (const auto& u : corpus) {
    if (u.split == split && (speaker_id.empty() || u.speaker_id == speaker_id)) out.push_back(&u);
  }
  return out;
}

}  // namespace xdk
