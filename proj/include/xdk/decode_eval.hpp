#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdk/data.hpp"
#include "xdk/model.hpp"

namespace xdk {

// Transducer greedy search over stacked features {T, input_dim}: at each
// frame take the argmax over V+1 outputs; a token is emitted and fed to the
// prediction network, blank advances the frame. At most
// max_symbols_per_frame tokens are emitted per frame.
template <typename S>
std::vector<Index> greedy_decode(const TransducerModel<S>& model, const Tensor<S>& features,
                                 Index max_symbols_per_frame = 8);

struct EditCounts {
  Index substitutions = 0;
  Index deletions = 0;
  Index insertions = 0;
  Index ref_len = 0;

  Index errors() const { return substitutions + deletions + insertions; }
  // 100 * errors / ref_len; throws DomainError when ref_len == 0.
  double wer() const;
  EditCounts& operator+=(const EditCounts& other);
  bool operator==(const EditCounts&) const = default;
};

// Unit-cost Levenshtein alignment. Among minimum-cost scripts the one with
// the most substitutions (fewest insertions plus deletions) is reported.
// Throws DomainError for an empty reference.
EditCounts align(std::span<const Index> ref, std::span<const Index> hyp);

struct UtteranceResult {
  std::string id;
  std::string speaker_id;
  std::vector<Index> ref;
  std::vector<Index> hyp;
  EditCounts edits;
};

struct EvalReport {
  std::vector<UtteranceResult> utterances;  // sorted by id
  EditCounts totals;

  double wer() const { return totals.wer(); }
};

struct DecodeOptions {
  Index stack = 4;
  Index stride = 3;
  Index max_symbols_per_frame = 8;
  int jobs = 1;
};

// Decodes and scores utterances with non-empty references.
template <typename S>
EvalReport evaluate(const TransducerModel<S>& model, std::span<const Utterance* const> utterances,
                    const DecodeOptions& options = {});

// Relative WER improvement (unadapted - adapted) / unadapted.
double gamma(double wer_unadapted, double wer_adapted);
// Adapter performance drop (adapters - finetuned) / finetuned.
double delta(double wer_adapters, double wer_finetuned);

enum class Aggregation { kMedianOverSpeakers, kMeanOverAccents };
std::string to_string(Aggregation mode);
Aggregation parse_aggregation(const std::string& name);
// Median (mean of the middle two for even counts) or arithmetic mean.
// Throws ContractError on empty input.
double aggregate(std::span<const double> values, Aggregation mode);

struct AdaptationComparison {
  std::string unit;  // speaker or accent
  double wer_unadapted = 0;
  double wer_adapted = 0;
  std::optional<double> wer_finetuned;

  double gamma() const { return xdk::gamma(wer_unadapted, wer_adapted); }
  std::optional<double> gamma_finetuned() const;
  std::optional<double> delta() const;
};

// Aggregate over units, both ways: the aggregate of per-unit gammas, and
// gamma of the aggregated WERs.
struct AggregateComparison {
  Aggregation mode = Aggregation::kMedianOverSpeakers;
  double wer_unadapted = 0;
  double wer_adapted = 0;
  std::optional<double> wer_finetuned;
  double gamma_of_aggregates = 0;
  double aggregate_of_gammas = 0;
  std::optional<double> delta_of_aggregates;
};
AggregateComparison aggregate_comparisons(std::span<const AdaptationComparison> units, Aggregation mode);

// Text report (one line per utterance plus a footer) and its JSON twin.
std::string format_report_text(const EvalReport& report, std::span<const AdaptationComparison> comparisons = {},
                               const std::optional<AggregateComparison>& summary = std::nullopt);
std::string format_report_json(const EvalReport& report, std::span<const AdaptationComparison> comparisons = {},
                               const std::optional<AggregateComparison>& summary = std::nullopt);
// Reads back the utterances and totals of a JSON report; throws FormatError.
EvalReport parse_report_json(const std::string& text);
// Writes <base>.txt and <base>.json.
void write_report(const std::string& base, const EvalReport& report,
                  std::span<const AdaptationComparison> comparisons = {},
                  const std::optional<AggregateComparison>& summary = std::nullopt);

}  // namespace xdk
