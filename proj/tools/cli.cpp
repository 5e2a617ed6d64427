#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "xdk/adapters.hpp"
#include "xdk/byte_io.hpp"
#include "xdk/data.hpp"
#include "xdk/decode_eval.hpp"
#include "xdk/errors.hpp"
#include "xdk/train.hpp"

namespace xdk::cli {
namespace {

namespace fs = std::filesystem;
using Model = TransducerModel<float>;

void write_text(const fs::path& path, const std::string& text) {
  write_file(path.string(),
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

Model read_model(const std::string& path) { return load_checkpoint<float>(read_file(path)); }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct ModelOptions {
  ModelConfig config;
  std::string encoder = "lstm";
  std::string placement = "after-ffn";
};

void add_model_options(CLI::App* app, ModelOptions& m) {
  app->add_option("--encoder", m.encoder, "Encoder kind: lstm or transformer")->capture_default_str();
  app->add_option("--layers", m.config.num_encoder_layers, "Encoder layers")->capture_default_str();
  app->add_option("--d-model", m.config.d_model, "Encoder width")->capture_default_str();
  app->add_option("--heads", m.config.num_heads, "Attention heads (transformer)")->capture_default_str();
  app->add_option("--lstm-cells", m.config.lstm_cells, "LSTM cells per layer before projection")->capture_default_str();
  app->add_option("--d-ff", m.config.d_ff, "Feed-forward width (transformer)")->capture_default_str();
  app->add_option("--d-pred", m.config.d_pred, "Prediction network width")->capture_default_str();
  app->add_option("--joint-dim", m.config.joint_dim, "Joint network width")->capture_default_str();
  app->add_option("--vocab", m.config.vocab_size, "Token vocabulary size, blank excluded")->capture_default_str();
  app->add_option("--max-positions", m.config.max_positions, "Longest encoder input (transformer)")
      ->capture_default_str();
  app->add_option("--placement", m.placement, "Adapter placement: after-ffn or after-attention")
      ->capture_default_str();
}

struct TrainOptions {
  TrainConfig cfg;
  std::string optimizer = "adam";
  bool spec_augment = false;
};

void add_train_options(CLI::App* app, TrainOptions& t, double lr, Index steps, Index eval_every) {
  t.cfg.learning_rate = lr;
  t.cfg.max_steps = steps;
  t.cfg.eval_every = eval_every;
  app->add_option("--lr", t.cfg.learning_rate, "Learning rate")->capture_default_str();
  app->add_option("--steps", t.cfg.max_steps, "Training steps")->capture_default_str();
  app->add_option("--batch", t.cfg.batch_size, "Utterances per step")->capture_default_str();
  app->add_option("--eval-every", t.cfg.eval_every, "Steps between dev evaluations")->capture_default_str();
  app->add_option("--log-every", t.cfg.log_every, "Steps between step-log lines")->capture_default_str();
  app->add_option("--optimizer", t.optimizer, "Optimizer: adam or sgd")->capture_default_str();
  app->add_option("--clip-norm", t.cfg.clip_norm, "Global gradient-norm clip, 0 disables")->capture_default_str();
  app->add_flag("--spec-augment", t.spec_augment, "Apply SpecAugment to training features");
}

void add_decode_options(CLI::App* app, DecodeOptions& d) {
  app->add_option("--stack", d.stack, "Frames stacked per encoder input")->capture_default_str();
  app->add_option("--stride", d.stride, "Stride between stacked frames")->capture_default_str();
  app->add_option("--max-symbols", d.max_symbols_per_frame, "Greedy-decode emission cap per frame")
      ->capture_default_str();
  app->add_option("--decode-jobs", d.jobs, "Decoding threads")->capture_default_str();
}

TrainConfig finish_train_config(const TrainOptions& t, const DecodeOptions& d, std::uint64_t seed,
                                const std::string& out) {
  TrainConfig cfg = t.cfg;
  cfg.optimizer = parse_optimizer(t.optimizer);
  if (t.spec_augment) cfg.spec_augment = SpecAugmentConfig{};
  cfg.decode = d;
  cfg.seed = seed;
  cfg.out_dir = out;
  return cfg;
}

std::vector<Utterance> load_filtered(const std::string& manifest, const std::string& speaker) {
  auto corpus = load_corpus(manifest);
  if (speaker.empty()) return corpus;
  std::vector<Utterance> kept;
  for (auto& u : corpus) {
    if (u.speaker_id == speaker) kept.push_back(std::move(u));
  }
  if (kept.empty()) throw LookupError("no utterances for speaker '" + speaker + "' in " + manifest);
  return kept;
}

// The config file belongs to the root command, so `--config` is accepted
// anywhere on the line by moving it to the front.
std::vector<std::string> hoist_config(const std::vector<std::string>& args) {
  std::vector<std::string> front, rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      front.push_back(args[i]);
      front.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      front.push_back(args[i]);
    } else {
      rest.push_back(args[i]);
    }
  }
  front.insert(front.end(), rest.begin(), rest.end());
  return front;
}

// Writes every option of `command` with its effective value, in the form
// `--config` reads back.
void echo_config(const CLI::App* command, const fs::path& out) {
  fs::create_directories(out);
  write_text(out / "config.toml", "[" + command->get_name() + "]\n" + command->config_to_str(true, false));
}

std::string describe(const RunRecord& r) {
  return "best dev WER " + fixed(r.best_dev_wer, 2) + "% at step " + std::to_string(r.best_step) + " of " +
         std::to_string(r.steps) + "\n";
}

std::vector<Index> parse_layers(const std::string& text) {
  if (text == "all") return {};
  std::vector<Index> layers;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      layers.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ParameterError("--adapter-layers expects 'all' or comma-separated layer indices, got '" + text + "'");
    }
  }
  if (layers.empty()) throw ParameterError("--adapter-layers is empty");
  return layers;
}

std::map<std::string, EditCounts> per_speaker(const EvalReport& report) {
  std::map<std::string, EditCounts> m;
  for (const auto& u : report.utterances) m[u.speaker_id] += u.edits;
  return m;
}

std::string footer(const std::string& text) {
  const auto pos = text.find("---\n");
  return pos == std::string::npos ? text : text.substr(pos + 4);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual adapters for transducer speech recognizers", "xdk"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_config("--config", "", "TOML file of option values under [<command>] sections; flags override it");

  std::uint64_t seed = 0;
  std::string out_path, manifest, speaker, base_path, model_path, bundle_path, mode_name = "adapters";
  ModelOptions model_opts;
  TrainOptions train_opts;
  DecodeOptions decode_opts;
  AdapterConfig adapter_cfg;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Seed for initialization, shuffling, and augmentation")->capture_default_str();
  };
  auto add_adapter_options = [&](CLI::App* sub) {
    sub->add_option("--d-b", adapter_cfg.d_b, "Adapter bottleneck width")->capture_default_str();
    sub->add_option("--init-std", adapter_cfg.init_std, "Adapter weight init standard deviation")
        ->capture_default_str();
  };

  // synth-corpus
  SyntheticCorpusConfig synth;
  Index canonical = 8, perturbed = 4, perturbed_utts = 200;
  double severity = 0.8;
  auto* synth_cmd = app.add_subcommand("synth-corpus", "Generate the synthetic perturbed-speaker corpus");
  synth_cmd->add_option("--out", out_path, "Output directory")->required();
  synth_cmd->add_option("--canonical", canonical, "Canonical (unperturbed) speakers")->capture_default_str();
  synth_cmd->add_option("--perturbed", perturbed, "Perturbed speakers")->capture_default_str();
  synth_cmd->add_option("--severity", severity, "Perturbation severity of perturbed speakers, in [0, 1]")
      ->capture_default_str();
  synth_cmd->add_option("--utts", synth.utt_per_speaker, "Utterances per canonical speaker")->capture_default_str();
  synth_cmd->add_option("--perturbed-utts", perturbed_utts, "Utterances per perturbed speaker")
      ->capture_default_str();
  synth_cmd->add_option("--vocab", synth.vocab_size, "Token vocabulary size")->capture_default_str();
  synth_cmd->add_option("--feat-dim", synth.feat_dim, "Feature channels per frame")->capture_default_str();
  synth_cmd->add_option("--pattern-len", synth.token_pattern_len, "Frames per token pattern")->capture_default_str();
  synth_cmd->add_option("--min-tokens", synth.min_tokens, "Fewest tokens per utterance")->capture_default_str();
  synth_cmd->add_option("--max-tokens", synth.max_tokens, "Most tokens per utterance")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise_std, "Gaussian noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--language-seed", synth.language_seed, "Seed of the token patterns")->capture_default_str();
  add_seed(synth_cmd);

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train a base model on every parameter");
  pretrain_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  pretrain_cmd->add_option("--out", out_path, "Run directory")->required();
  pretrain_cmd->add_option("--speaker", speaker, "Train on this speaker only");
  add_model_options(pretrain_cmd, model_opts);
  add_train_options(pretrain_cmd, train_opts, 1e-3, 2000, 250);
  add_decode_options(pretrain_cmd, decode_opts);
  add_seed(pretrain_cmd);

  // adapt
  std::string adapter_layers = "all";
  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt a base model with adapters or fine-tuning");
  adapt_cmd->add_option("--base", base_path, "Base model checkpoint")->required();
  adapt_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  adapt_cmd->add_option("--out", out_path, "Run directory")->required();
  adapt_cmd->add_option("--mode", mode_name, "adapters, finetune-enc, finetune-layer1, or finetune-layers1-3")
      ->capture_default_str();
  adapt_cmd->add_option("--speaker", speaker, "Adapt to this speaker only");
  adapt_cmd->add_option("--adapter-layers", adapter_layers, "Comma-separated encoder layers that get adapters, or all")
      ->capture_default_str();
  add_adapter_options(adapt_cmd);
  add_train_options(adapt_cmd, train_opts, 1e-3, 400, 50);
  add_decode_options(adapt_cmd, decode_opts);
  add_seed(adapt_cmd);

  // eval
  std::string split_name = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Decode a split and score it");
  eval_cmd->add_option("--model", model_path, "Model checkpoint")->required();
  eval_cmd->add_option("--bundle", bundle_path, "Adapter bundle to import into the model first");
  eval_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  eval_cmd->add_option("--split", split_name, "train, dev, or test")->capture_default_str();
  eval_cmd->add_option("--speaker", speaker, "Score this speaker only");
  eval_cmd->add_option("--out", out_path, "Directory for report.txt and report.json");
  add_decode_options(eval_cmd, decode_opts);
  add_seed(eval_cmd);

  // sweep
  SweepGrid grid{{1e-5, 1e-4, 1e-3, 1e-2}, {4, 16, 32, 128}};
  int jobs = 1;
  bool per_speaker_runs = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over learning rate and bottleneck width");
  sweep_cmd->add_option("--base", base_path, "Base model checkpoint")->required();
  sweep_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  sweep_cmd->add_option("--out", out_path, "Sweep directory")->required();
  sweep_cmd->add_option("--mode", mode_name, "adapters, finetune-enc, finetune-layer1, or finetune-layers1-3")
      ->capture_default_str();
  sweep_cmd->add_option("--lrs", grid.learning_rates, "Learning rates")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--d-bs", grid.bottlenecks, "Bottleneck widths (adapters mode)")
      ->delimiter(',')
      ->capture_default_str();
  sweep_cmd->add_option("--jobs", jobs, "Parallel workers")->capture_default_str();
  sweep_cmd->add_option("--speaker", speaker, "Sweep on this speaker only");
  sweep_cmd->add_flag("--per-speaker", per_speaker_runs, "Run the grid separately for every speaker");
  sweep_cmd->add_option("--init-std", adapter_cfg.init_std, "Adapter weight init standard deviation")
      ->capture_default_str();
  add_train_options(sweep_cmd, train_opts, 1e-3, 400, 50);
  add_decode_options(sweep_cmd, decode_opts);
  add_seed(sweep_cmd);

  // export-bundle / import-bundle
  auto* export_cmd = app.add_subcommand("export-bundle", "Write the adapters of a model to a bundle file");
  export_cmd->add_option("--model", model_path, "Adapted model checkpoint")->required();
  export_cmd->add_option("--out", out_path, "Bundle file")->required();
  auto* import_cmd = app.add_subcommand("import-bundle", "Attach a bundle's adapters to its base model");
  import_cmd->add_option("--base", base_path, "Base model checkpoint")->required();
  import_cmd->add_option("--bundle", bundle_path, "Bundle file")->required();
  import_cmd->add_option("--out", out_path, "Output checkpoint")->required();

  // report
  std::string unadapted_path, adapted_path, finetuned_path, aggregation_name = "median_over_speakers";
  auto* report_cmd = app.add_subcommand("report", "Compare unadapted, adapted, and fine-tuned eval reports");
  report_cmd->add_option("--unadapted", unadapted_path, "Eval report JSON of the unadapted model")->required();
  report_cmd->add_option("--adapted", adapted_path, "Eval report JSON of the adapter model")->required();
  report_cmd->add_option("--finetuned", finetuned_path, "Eval report JSON of the fine-tuned model");
  report_cmd->add_option("--aggregation", aggregation_name, "median_over_speakers or mean_over_accents")
      ->capture_default_str();
  report_cmd->add_option("--out", out_path, "Directory for report.txt and report.json");

  try {
    const auto ordered = hoist_config(args);
    std::vector<std::string> reversed(ordered.rbegin(), ordered.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (deterministic_mode()) {
      decode_opts.jobs = 1;
      jobs = 1;
    }
    if (synth_cmd->parsed()) {
      std::vector<SpeakerSpec> canon, pert;
      char id[32];
      for (Index i = 0; i < canonical; ++i) {
        std::snprintf(id, sizeof id, "canon-%02lld", static_cast<long long>(i));
        canon.push_back({id, seed * 1000003 + 1000 + static_cast<std::uint64_t>(i), 0.0});
      }
      for (Index i = 0; i < perturbed; ++i) {
        std::snprintf(id, sizeof id, "pert-%02lld", static_cast<long long>(i));
        pert.push_back({id, seed * 1000003 + 2000 + static_cast<std::uint64_t>(i), severity});
      }
      auto corpus = generate_synthetic_corpus(synth, canon, seed);
      SyntheticCorpusConfig pcfg = synth;
      pcfg.utt_per_speaker = perturbed_utts;
      if (!pert.empty()) {
        auto extra = generate_synthetic_corpus(pcfg, pert, seed + 1);
        corpus.insert(corpus.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
      }
      const fs::path dir(out_path);
      write_corpus(dir.string(), corpus);
      echo_config(synth_cmd, dir);
      const auto entries = parse_manifest(read_text((dir / "manifest.tsv").string()));
      std::map<std::string, std::vector<ManifestEntry>> by_speaker;
      std::vector<ManifestEntry> canon_entries;
      for (const auto& e : entries) {
        if (e.speaker_id.rfind("canon-", 0) == 0) {
          canon_entries.push_back(e);
        } else {
          by_speaker[e.speaker_id].push_back(e);
        }
      }
      write_text(dir / "canonical.tsv", format_manifest(canon_entries));
      for (const auto& [spk, list] : by_speaker) write_text(dir / (spk + ".tsv"), format_manifest(list));
      out << "wrote " << corpus.size() << " utterances from " << canonical + perturbed << " speakers to "
          << dir.string() << "\n";
      return 0;
    }

    if (pretrain_cmd->parsed()) {
      const auto corpus = load_filtered(manifest, speaker);
      if (corpus.empty()) throw LookupError("manifest " + manifest + " is empty");
      ModelConfig mc = model_opts.config;
      mc.encoder_kind = parse_encoder_kind(model_opts.encoder);
      mc.adapter_placement = parse_adapter_placement(model_opts.placement);
      mc.input_dim = decode_opts.stack * corpus.front().features.feat_dim();
      Model model(mc, seed);
      TrainConfig cfg = finish_train_config(train_opts, decode_opts, seed, out_path);
      cfg.mask = TrainableMask{{"*"}};
      echo_config(pretrain_cmd, out_path);
      const auto record = train(model, corpus, cfg);
      write_file((fs::path(out_path) / "model.ckpt").string(), save_checkpoint(model));
      out << describe(record);
      return 0;
    }

    if (adapt_cmd->parsed()) {
      const auto corpus = load_filtered(manifest, speaker);
      Model model = read_model(base_path);
      const AdaptMode mode = parse_adapt_mode(mode_name);
      TrainConfig cfg = finish_train_config(train_opts, decode_opts, seed, out_path);
      cfg.mask = mask_for(mode);
      if (mode == AdaptMode::kAdapters) {
        adapter_cfg.layers = parse_layers(adapter_layers);
        inject(model, adapter_cfg, seed);
      }
      echo_config(adapt_cmd, out_path);
      const auto record = train(model, corpus, cfg);
      const fs::path dir(out_path);
      write_file((dir / "model.ckpt").string(), save_checkpoint(model));
      if (mode == AdaptMode::kAdapters) write_file((dir / "adapters.xdab").string(), export_bundle(model));
      const auto counts = count_params(model, cfg.mask.groups);
      out << to_string(mode) << ": " << counts.trainable << " of " << counts.total << " parameters trained ("
          << fixed(100.0 * counts.trainable_ratio(), 3) << "%)\n"
          << describe(record);
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto corpus = load_filtered(manifest, speaker);
      Model model = read_model(model_path);
      if (!bundle_path.empty()) import_bundle(model, read_file(bundle_path));
      const auto utts = select(corpus, "", parse_split(split_name));
      if (utts.empty()) throw LookupError("no " + split_name + " utterances in " + manifest);
      const auto report = evaluate(model, utts, decode_opts);
      if (!out_path.empty()) {
        fs::create_directories(out_path);
        write_report((fs::path(out_path) / "report").string(), report);
      }
      out << "WER " << fixed(report.wer(), 2) << "% over " << report.utterances.size() << " utterances\n";
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const auto corpus = load_filtered(manifest, speaker);
      const Model base = read_model(base_path);
      const AdaptMode mode = parse_adapt_mode(mode_name);
      TrainConfig cfg = finish_train_config(train_opts, decode_opts, seed, out_path);
      cfg.mask = mask_for(mode);
      echo_config(sweep_cmd, out_path);
      std::vector<std::string> speakers{""};
      if (per_speaker_runs) {
        speakers.clear();
        for (const auto& u : corpus) {
          if (std::find(speakers.begin(), speakers.end(), u.speaker_id) == speakers.end()) {
            speakers.push_back(u.speaker_id);
          }
        }
      }
      std::ostringstream table;
      table << "speaker\tlr\td_b\tbest_dev_wer\tbest_step\terror\n";
      for (const auto& spk : speakers) {
        std::vector<Utterance> subset;
        for (const auto& u : corpus) {
          if (spk.empty() || u.speaker_id == spk) subset.push_back(u);
        }
        TrainConfig spk_cfg = cfg;
        spk_cfg.out_dir = spk.empty() ? out_path : (fs::path(out_path) / spk).string();
        const auto cells = sweep(base, subset, mode, grid, spk_cfg, adapter_cfg.init_std, jobs);
        for (const auto& c : cells) {
          table << (spk.empty() ? "*" : spk) << '\t' << c.learning_rate << '\t' << c.d_b << '\t';
          if (c.record) {
            table << fixed(c.record->best_dev_wer, 2) << '\t' << c.record->best_step << "\t-\n";
          } else {
            table << "-\t-\t" << c.error << '\n';
          }
        }
        if (!cells.empty() && cells.front().record) {
          out << (spk.empty() ? std::string("best") : spk + " best") << ": lr " << cells.front().learning_rate;
          if (mode == AdaptMode::kAdapters) out << " d_b " << cells.front().d_b;
          out << " dev WER " << fixed(cells.front().record->best_dev_wer, 2) << "%\n";
        }
      }
      write_text(fs::path(out_path) / "sweep.tsv", table.str());
      return 0;
    }

    if (export_cmd->parsed()) {
      const Model model = read_model(model_path);
      const auto bytes = export_bundle(model);
      write_file(out_path, bytes);
      out << "wrote " << bytes.size() << " bytes to " << out_path << "\n";
      return 0;
    }

    if (import_cmd->parsed()) {
      Model model = read_model(base_path);
      import_bundle(model, read_file(bundle_path));
      write_file(out_path, save_checkpoint(model));
      out << "wrote " << out_path << "\n";
      return 0;
    }

    if (report_cmd->parsed()) {
      const auto unadapted = parse_report_json(read_text(unadapted_path));
      const auto adapted = parse_report_json(read_text(adapted_path));
      std::optional<EvalReport> finetuned;
      if (!finetuned_path.empty()) finetuned = parse_report_json(read_text(finetuned_path));
      const auto u_spk = per_speaker(unadapted), a_spk = per_speaker(adapted);
      std::map<std::string, EditCounts> f_spk;
      if (finetuned) f_spk = per_speaker(*finetuned);
      std::vector<AdaptationComparison> comparisons;
      for (const auto& [spk, counts] : u_spk) {
        const auto a = a_spk.find(spk);
        if (a == a_spk.end()) throw ContractError("speaker '" + spk + "' is missing from " + adapted_path);
        AdaptationComparison c{spk, counts.wer(), a->second.wer(), std::nullopt};
        if (finetuned) {
          const auto f = f_spk.find(spk);
          if (f == f_spk.end()) throw ContractError("speaker '" + spk + "' is missing from " + finetuned_path);
          c.wer_finetuned = f->second.wer();
        }
        comparisons.push_back(c);
      }
      if (a_spk.size() != u_spk.size() || (finetuned && f_spk.size() != u_spk.size())) {
        throw ContractError("reports cover different speakers");
      }
      const auto summary = aggregate_comparisons(comparisons, parse_aggregation(aggregation_name));
      if (!out_path.empty()) {
        fs::create_directories(out_path);
        write_report((fs::path(out_path) / "report").string(), adapted, comparisons, summary);
      }
      out << footer(format_report_text(adapted, comparisons, summary));
      return 0;
    }
    throw InternalError("no command ran");
  } catch (const InternalError& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace xdk::cli
