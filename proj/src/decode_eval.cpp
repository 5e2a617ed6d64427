#include "xdk/decode_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "xdk/byte_io.hpp"
#include "xdk/errors.hpp"
#include "xdk/ops.hpp"

namespace xdk {

template <typename S>
std::vector<Index> greedy_decode(const TransducerModel<S>& model, const Tensor<S>& features,
                                 Index max_symbols_per_frame) {
  if (max_symbols_per_frame < 1) throw ParameterError("max_symbols_per_frame must be >= 1");
  NoGradScope<S> no_grad;
  const Index blank = model.config().blank_id();
  const Tensor<S> projected = model.joint_encoder_projection(model.encode(features));
  auto state = model.prediction_start();
  std::vector<Index> hyp;
  for (Index t = 0; t < projected.rows(); ++t) {
    const Tensor<S> row = slice(projected, 0, t, 1);
    for (Index emitted = 0; emitted < max_symbols_per_frame; ++emitted) {
      const Tensor<S> log_probs = model.joint_node(row, state.output);
      Index best;
      log_probs.matrix().row(0).maxCoeff(&best);
      if (best == blank) break;
      hyp.push_back(best);
      state = model.prediction_step(state, best);
    }
  }
  return hyp;
}

double EditCounts::wer() const {
  if (ref_len <= 0) throw DomainError("WER is undefined for an empty reference");
  return 100.0 * static_cast<double>(errors()) / static_cast<double>(ref_len);
}

EditCounts& EditCounts::operator+=(const EditCounts& other) {
  substitutions += other.substitutions;
  deletions += other.deletions;
  insertions += other.insertions;
  ref_len += other.ref_len;
  return *this;
}

EditCounts align(std::span<const Index> ref, std::span<const Index> hyp) {
  if (ref.empty()) throw DomainError("WER is undefined for an empty reference");
  struct Cell {
    Index cost, gaps, sub, del, ins;
    bool better_than(const Cell& o) const { return cost != o.cost ? cost < o.cost : gaps < o.gaps; }
  };
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) {
    const Index k = static_cast<Index>(j);
    prev[j] = {k, k, 0, 0, k};
  }
  for (std::size_t i = 1; i <= n; ++i) {
    const Index k = static_cast<Index>(i);
    cur[0] = {k, k, 0, k, 0};
    for (std::size_t j = 1; j <= m; ++j) {
      const bool match = ref[i - 1] == hyp[j - 1];
      Cell best = prev[j - 1];
      best.cost += match ? 0 : 1;
      best.sub += match ? 0 : 1;
      Cell del = prev[j];
      del.cost += 1;
      del.gaps += 1;
      del.del += 1;
      if (del.better_than(best)) best = del;
      Cell ins = cur[j - 1];
      ins.cost += 1;
      ins.gaps += 1;
      ins.ins += 1;
      if (ins.better_than(best)) best = ins;
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  const Cell& end = prev[m];
  return {end.sub, end.del, end.ins, static_cast<Index>(n)};
}

template <typename S>
EvalReport evaluate(const TransducerModel<S>& model, std::span<const Utterance* const> utterances,
                    const DecodeOptions& options) {
  std::vector<const Utterance*> work;
  for (const Utterance* u : utterances) {
    if (!u->labels.empty()) work.push_back(u);
  }
  std::vector<UtteranceResult> results(work.size());
  auto run = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < work.size(); i += step) {
      const Utterance& u = *work[i];
      const Tensor<S> x = to_tensor<S>(stack_frames(u.features, options.stack, options.stride));
      auto hyp = greedy_decode(model, x, options.max_symbols_per_frame);
      results[i] = {u.id, u.speaker_id, u.labels, hyp, align(u.labels, hyp)};
    }
  };
  const std::size_t jobs = static_cast<std::size_t>(std::max(1, options.jobs));
  if (jobs == 1 || work.size() < 2) {
    run(0, 1);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(run, j, jobs);
    for (auto& t : threads) t.join();
  }
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  EvalReport report;
  for (const auto& r : results) report.totals += r.edits;
  report.utterances = std::move(results);
  return report;
}

double gamma(double wer_unadapted, double wer_adapted) {
  if (!(wer_unadapted > 0)) throw DomainError("gamma: unadapted WER must be > 0");
  return (wer_unadapted - wer_adapted) / wer_unadapted;
}

double delta(double wer_adapters, double wer_finetuned) {
  if (!(wer_finetuned > 0)) throw DomainError("delta: fine-tuned WER must be > 0");
  return (wer_adapters - wer_finetuned) / wer_finetuned;
}

std::string to_string(Aggregation mode) {
  return mode == Aggregation::kMedianOverSpeakers ? "median_over_speakers" : "mean_over_accents";
}

Aggregation parse_aggregation(const std::string& name) {
  if (name == "median_over_speakers") return Aggregation::kMedianOverSpeakers;
  if (name == "mean_over_accents") return Aggregation::kMeanOverAccents;
  throw ParameterError("unknown aggregation '" + name + "' (expected median_over_speakers or mean_over_accents)");
}

double aggregate(std::span<const double> values, Aggregation mode) {
  if (values.empty()) throw ContractError("aggregate: no values");
  if (mode == Aggregation::kMeanOverAccents) {
    double sum = 0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  return n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

std::optional<double> AdaptationComparison::gamma_finetuned() const {
  if (!wer_finetuned) return std::nullopt;
  return xdk::gamma(wer_unadapted, *wer_finetuned);
}

std::optional<double> AdaptationComparison::delta() const {
  if (!wer_finetuned) return std::nullopt;
  return xdk::delta(wer_adapted, *wer_finetuned);
}

AggregateComparison aggregate_comparisons(std::span<const AdaptationComparison> units, Aggregation mode) {
  if (units.empty()) throw ContractError("aggregate_comparisons: no units");
  std::vector<double> unadapted, adapted, finetuned, gammas;
  for (const auto& u : units) {
    unadapted.push_back(u.wer_unadapted);
    adapted.push_back(u.wer_adapted);
    if (u.wer_finetuned) finetuned.push_back(*u.wer_finetuned);
    gammas.push_back(u.gamma());
  }
  AggregateComparison out;
  out.mode = mode;
  out.wer_unadapted = aggregate(unadapted, mode);
  out.wer_adapted = aggregate(adapted, mode);
  out.gamma_of_aggregates = gamma(out.wer_unadapted, out.wer_adapted);
  out.aggregate_of_gammas = aggregate(gammas, mode);
  if (finetuned.size() == units.size()) {
    out.wer_finetuned = aggregate(finetuned, mode);
    out.delta_of_aggregates = delta(out.wer_adapted, *out.wer_finetuned);
  }
  return out;
}

namespace {

std::string join(const std::vector<Index>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + std::to_string(tokens[i]);
  return s;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

std::string format_report_text(const EvalReport& report, std::span<const AdaptationComparison> comparisons,
                               const std::optional<AggregateComparison>& summary) {
  std::ostringstream out;
  out << "# id\tsub\tdel\tins\tref_len\twer\tref\thyp\n";
  for (const auto& u : report.utterances) {
    out << u.id << '\t' << u.edits.substitutions << '\t' << u.edits.deletions << '\t' << u.edits.insertions << '\t'
        << u.edits.ref_len << '\t' << fixed(u.edits.wer(), 2) << '\t' << join(u.ref) << '\t' << join(u.hyp) << '\n';
  }
  out << "---\n";
  if (report.totals.ref_len > 0) {
    out << "WER " << fixed(report.wer(), 2) << "% (sub " << report.totals.substitutions << ", del "
        << report.totals.deletions << ", ins " << report.totals.insertions << ", ref " << report.totals.ref_len
        << ")\n";
  }
  for (const auto& c : comparisons) {
    out << c.unit << ": unadapted " << fixed(c.wer_unadapted, 2) << " adapted " << fixed(c.wer_adapted, 2);
    if (c.wer_finetuned) out << " finetuned " << fixed(*c.wer_finetuned, 2);
    out << " gamma " << fixed(c.gamma(), 4);
    if (auto d = c.delta()) out << " delta " << fixed(*d, 4);
    out << '\n';
  }
  if (summary) {
    out << "aggregate (" << to_string(summary->mode) << "): unadapted " << fixed(summary->wer_unadapted, 2)
        << " adapted " << fixed(summary->wer_adapted, 2);
    if (summary->wer_finetuned) out << " finetuned " << fixed(*summary->wer_finetuned, 2);
    out << "\ngamma of aggregated WERs " << fixed(summary->gamma_of_aggregates, 4) << "\n"
        << to_string(summary->mode) << " of per-unit gammas " << fixed(summary->aggregate_of_gammas, 4) << "\n";
    if (summary->delta_of_aggregates) out << "delta of aggregated WERs " << fixed(*summary->delta_of_aggregates, 4) << "\n";
  }
  return out.str();
}

std::string format_report_json(const EvalReport& report, std::span<const AdaptationComparison> comparisons,
                               const std::optional<AggregateComparison>& summary) {
  using nlohmann::ordered_json;
  ordered_json j;
  ordered_json utts = ordered_json::array();
  for (const auto& u : report.utterances) {
    utts.push_back({{"id", u.id},
                    {"speaker_id", u.speaker_id},
                    {"ref", u.ref},
                    {"hyp", u.hyp},
                    {"sub", u.edits.substitutions},
                    {"del", u.edits.deletions},
                    {"ins", u.edits.insertions},
                    {"ref_len", u.edits.ref_len}});
  }
  j["utterances"] = std::move(utts);
  j["counts"] = {{"sub", report.totals.substitutions},
                 {"del", report.totals.deletions},
                 {"ins", report.totals.insertions},
                 {"ref_len", report.totals.ref_len}};
  if (report.totals.ref_len > 0) j["wer"] = report.wer();
  if (!comparisons.empty()) {
    ordered_json cs = ordered_json::array();
    for (const auto& c : comparisons) {
      ordered_json e = {{"unit", c.unit}, {"wer_unadapted", c.wer_unadapted}, {"wer_adapted", c.wer_adapted}};
      if (c.wer_finetuned) e["wer_finetuned"] = *c.wer_finetuned;
      e["gamma"] = c.gamma();
      if (auto d = c.delta()) e["delta"] = *d;
      cs.push_back(std::move(e));
    }
    j["comparisons"] = std::move(cs);
  }
  if (summary) {
    ordered_json s = {{"aggregation", to_string(summary->mode)},
                      {"wer_unadapted", summary->wer_unadapted},
                      {"wer_adapted", summary->wer_adapted}};
    if (summary->wer_finetuned) s["wer_finetuned"] = *summary->wer_finetuned;
    s["gamma_of_aggregates"] = summary->gamma_of_aggregates;
    s["aggregate_of_gammas"] = summary->aggregate_of_gammas;
    if (summary->delta_of_aggregates) s["delta_of_aggregates"] = *summary->delta_of_aggregates;
    j["summary"] = std::move(s);
  }
  return j.dump(2) + "\n";
}

void write_report(const std::string& base, const EvalReport& report, std::span<const AdaptationComparison> comparisons,
                  const std::optional<AggregateComparison>& summary) {
  auto put = [](const std::string& path, const std::string& text) {
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  put(base + ".txt", format_report_text(report, comparisons, summary));
  put(base + ".json", format_report_json(report, comparisons, summary));
}

EvalReport parse_report_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EvalReport report;
    auto counts = [](const nlohmann::json& e) {
      return EditCounts{e.at("sub").get<Index>(), e.at("del").get<Index>(), e.at("ins").get<Index>(),
                        e.at("ref_len").get<Index>()};
    };
    for (const auto& u : j.at("utterances")) {
      report.utterances.push_back({u.at("id").get<std::string>(), u.at("speaker_id").get<std::string>(),
                                   u.at("ref").get<std::vector<Index>>(), u.at("hyp").get<std::vector<Index>>(),
                                   counts(u)});
    }
    report.totals = counts(j.at("counts"));
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

template std::vector<Index> greedy_decode(const TransducerModel<float>&, const Tensor<float>&, Index);
template std::vector<Index> greedy_decode(const TransducerModel<double>&, const Tensor<double>&, Index);
template EvalReport evaluate(const TransducerModel<float>&, std::span<const Utterance* const>, const DecodeOptions&);
template EvalReport evaluate(const TransducerModel<double>&, std::span<const Utterance* const>, const DecodeOptions&);

}  // namespace xdk
