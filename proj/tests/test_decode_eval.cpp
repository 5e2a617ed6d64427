#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "test_util.hpp"
#include "wer_oracle.hpp"
#include "xdk/decode_eval.hpp"
#include "xdk/errors.hpp"

using namespace xdk;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_encoder_layers = 1;
  c.d_model = 8;
  c.lstm_cells = 8;
  c.d_pred = 4;
  c.joint_dim = 6;
  c.vocab_size = 3;
  c.input_dim = 8;
  return c;
}

void set_param(TransducerModel<float>& m, const std::string& name, float value) {
  for (auto& p : m.parameters()) {
    if (p.name == name) p.value.matrix().setConstant(value);
  }
}

}  // namespace

TEST_CASE("WER examples") {
  const std::vector<Index> ref{0, 1, 2}, hyp{0, 2};
  const auto e = align(ref, hyp);
  CHECK(e == EditCounts{0, 1, 0, 3});
  CHECK(std::abs(e.wer() - 100.0 / 3.0) < 1e-12);
  CHECK(align(ref, ref).wer() == 0.0);
  CHECK(align(std::vector<Index>{0, 1}, std::vector<Index>{1, 0}) == EditCounts{2, 0, 0, 2});
  CHECK(align(std::vector<Index>{0}, std::vector<Index>{}) == EditCounts{0, 1, 0, 1});
  CHECK(align(std::vector<Index>{0}, std::vector<Index>{1, 1, 0}) == EditCounts{0, 0, 2, 1});
  CHECK_THROWS_AS(align(std::vector<Index>{}, hyp), DomainError);
}

TEST_CASE("WER matches exhaustive edit-script enumeration") {
  const auto strings = test::all_strings(4, 3);
  for (const auto& ref : strings) {
    if (ref.empty()) continue;
    for (const auto& hyp : strings) {
      const auto got = align(ref, hyp);
      const auto want = test::enumerate_scripts(ref, hyp);
      if (!(got == want)) {
        FAIL("ref " << test::encode_string(ref) << " hyp " << test::encode_string(hyp));
      }
    }
  }
}

TEST_CASE("WER matches edit-graph distance for lengths up to 6") {
  const auto strings = test::all_strings(6, 3);
  long pairs = 0;
  for (const auto& ref : strings) {
    if (ref.empty()) continue;
    const auto dist = test::edit_distances_from(ref, 6, 3);
    for (const auto& hyp : strings) {
      if (align(ref, hyp).errors() != dist[test::encode_string(hyp)]) FAIL("mismatch");
      ++pairs;
    }
  }
  CHECK(pairs == 1092L * 1093L);
}

TEST_CASE("gamma and delta") {
  CHECK(std::abs(gamma(16.1, 11.4) - 0.2919) < 1e-4);
  CHECK(std::abs(gamma(35.6, 6.8) - 0.8090) < 1e-4);
  CHECK(gamma(12.5, 12.5) == 0.0);
  CHECK(std::abs(delta(6.8, 6.0) - 0.1333) < 1e-4);
  CHECK(std::abs(delta(14.1, 13.2) - 0.0682) < 1e-4);
  CHECK(delta(7.0, 7.0) == 0.0);
  CHECK(delta(5.0, 6.0) < 0.0);
  CHECK_THROWS_AS(gamma(0.0, 1.0), DomainError);
  CHECK_THROWS_AS(delta(1.0, 0.0), DomainError);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> wer(0.5, 80.0);
  for (int i = 0; i < 200; ++i) {
    const double a = wer(rng), b = wer(rng);
    const double c = std::ldexp(1.0, static_cast<int>(rng() % 20) - 10);
    CHECK(gamma(a * c, b * c) == gamma(a, b));
    CHECK(delta(a * c, b * c) == delta(a, b));
  }
}

TEST_CASE("aggregate") {
  CHECK(aggregate(std::vector<double>{1, 2, 3}, Aggregation::kMedianOverSpeakers) == 2.0);
  CHECK(aggregate(std::vector<double>{4}, Aggregation::kMedianOverSpeakers) == 4.0);
  CHECK(aggregate(std::vector<double>{4, 1, 3, 2}, Aggregation::kMedianOverSpeakers) == 2.5);
  const std::vector<double> unadapted{16.1, 17.3, 11.5, 13.7, 20.0, 11.6, 13.4, 18.3, 56.3, 20.5};
  CHECK(std::abs(aggregate(unadapted, Aggregation::kMeanOverAccents) - 19.87) < 1e-9);
  CHECK_THROWS_AS(aggregate(std::vector<double>{}, Aggregation::kMeanOverAccents), ContractError);
}

TEST_CASE("aggregate comparisons report both orders") {
  const std::vector<AdaptationComparison> units{{"a", 40, 10, 8}, {"b", 20, 10, 9}, {"c", 30, 3, 3}};
  const auto s = aggregate_comparisons(units, Aggregation::kMedianOverSpeakers);
  CHECK(s.wer_unadapted == 30);
  CHECK(s.wer_adapted == 10);
  CHECK(s.gamma_of_aggregates == doctest::Approx(2.0 / 3.0));
  CHECK(s.aggregate_of_gammas == doctest::Approx(0.75));
  CHECK(*s.wer_finetuned == 8);
  CHECK(*s.delta_of_aggregates == doctest::Approx(0.25));
}

TEST_CASE("greedy decode: blank-only model and emission cap") {
  TransducerModel<float> model(tiny_config(), 1);
  std::mt19937_64 rng(2);
  auto x = test::random_tensor<float>({6, 8}, rng, 1.0f, false);
  set_param(model, "joint.w_out", 0.0f);
  auto b_out = model.parameter("joint.b_out").value;
  b_out.matrix().setZero();
  b_out.data()[3] = 5.0f;
  CHECK(greedy_decode(model, x).empty());

  b_out.data()[3] = 0.0f;
  b_out.data()[1] = 5.0f;
  const auto capped = greedy_decode(model, x, 1);
  CHECK(capped.size() == 6);
  CHECK(greedy_decode(model, x, 3).size() == 18);
  CHECK_THROWS_AS(greedy_decode(model, x, 0), ParameterError);
}

TEST_CASE("greedy decode is deterministic and evaluate is job-count invariant") {
  TransducerModel<float> model(tiny_config(), 3);
  SyntheticCorpusConfig cfg;
  cfg.feat_dim = 2;
  cfg.vocab_size = 3;
  cfg.utt_per_speaker = 12;
  const std::vector<SpeakerSpec> spk{{"s", 1, 0.0}};
  const auto corpus = generate_synthetic_corpus(cfg, spk, 4);
  std::vector<const Utterance*> all;
  for (const auto& u : corpus) all.push_back(&u);
  const auto a = evaluate(model, all);
  const auto b = evaluate(model, all, DecodeOptions{4, 3, 8, 3});
  REQUIRE(a.utterances.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(a.utterances[i].id == b.utterances[i].id);
    CHECK(a.utterances[i].hyp == b.utterances[i].hyp);
  }
  CHECK(a.totals == b.totals);
  CHECK(std::is_sorted(a.utterances.begin(), a.utterances.end(),
                       [](const auto& x, const auto& y) { return x.id < y.id; }));

  const std::vector<AdaptationComparison> cmp{{"s", 50, 25, 20}};
  const auto summary = aggregate_comparisons(cmp, Aggregation::kMedianOverSpeakers);
  const auto text = format_report_text(a, cmp, summary);
  CHECK(text.find("WER ") != std::string::npos);
  CHECK(text.find("median_over_speakers") != std::string::npos);
  const auto j = nlohmann::json::parse(format_report_json(a, cmp, summary));
  CHECK(j["utterances"].size() == 12);
  CHECK(j["counts"]["ref_len"].get<Index>() == a.totals.ref_len);
  CHECK(j["summary"]["gamma_of_aggregates"].get<double>() == doctest::Approx(0.5));
  CHECK(j["comparisons"][0]["delta"].get<double>() == doctest::Approx(0.25));

  const auto back = parse_report_json(format_report_json(a));
  REQUIRE(back.utterances.size() == a.utterances.size());
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    CHECK(back.utterances[i].id == a.utterances[i].id);
    CHECK(back.utterances[i].speaker_id == a.utterances[i].speaker_id);
    CHECK(back.utterances[i].hyp == a.utterances[i].hyp);
    CHECK(back.utterances[i].edits == a.utterances[i].edits);
  }
  CHECK(back.totals == a.totals);
  CHECK_THROWS_AS(parse_report_json("{\"counts\": 1}"), FormatError);
  CHECK(parse_aggregation(to_string(Aggregation::kMeanOverAccents)) == Aggregation::kMeanOverAccents);
  CHECK_THROWS_AS(parse_aggregation("max"), ParameterError);
}
