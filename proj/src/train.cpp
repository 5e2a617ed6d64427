#include "xdk/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include <json.hpp>

#include "xdk/byte_io.hpp"
#include "xdk/errors.hpp"
#include "xdk/rnnt_loss.hpp"

namespace xdk {
namespace {

using Clock = std::chrono::steady_clock;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path.string(),
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  throw ParameterError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::kAdapters: return "adapters";
    case AdaptMode::kFinetuneEncoder: return "finetune-enc";
    case AdaptMode::kFinetuneLayer1: return "finetune-layer1";
    case AdaptMode::kFinetuneLayers1To3: return "finetune-layers1-3";
  }
  throw InternalError("unknown adapt mode");
}

AdaptMode parse_adapt_mode(const std::string& name) {
  for (auto mode : {AdaptMode::kAdapters, AdaptMode::kFinetuneEncoder, AdaptMode::kFinetuneLayer1,
                    AdaptMode::kFinetuneLayers1To3}) {
    if (to_string(mode) == name) return mode;
  }
  throw ParameterError("unknown adapt mode '" + name +
                       "' (expected adapters, finetune-enc, finetune-layer1, or finetune-layers1-3)");
}

TrainableMask mask_for(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::kAdapters: return TrainableMask::adapters_only();
    case AdaptMode::kFinetuneEncoder: return TrainableMask::encoder();
    case AdaptMode::kFinetuneLayer1: return TrainableMask::encoder_layers(1);
    case AdaptMode::kFinetuneLayers1To3: return TrainableMask::encoder_layers(3);
  }
  throw InternalError("unknown adapt mode");
}

void TrainConfig::validate() const {
  if (mask.groups.empty()) throw ContractError("trainable mask is empty; nothing would train");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ParameterError("learning rate must be >= 0");
  if (max_steps < 1) throw ParameterError("max_steps must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (eval_every < 1 || eval_every > max_steps) throw ParameterError("eval_every must be in [1, max_steps]");
  if (log_every < 1) throw ParameterError("log_every must be >= 1");
  if (!(clip_norm >= 0)) throw ParameterError("clip_norm must be >= 0");
}

std::string run_record_json(const RunRecord& r, bool include_timing) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json history = nlohmann::ordered_json::array();
  for (const auto& p : r.history) history.push_back({{"step", p.step}, {"dev_wer", p.dev_wer}});
  j["history"] = std::move(history);
  j["best_step"] = r.best_step;
  j["best_dev_wer"] = r.best_dev_wer;
  j["steps"] = r.steps;
  if (include_timing) {
    j["train_seconds"] = r.train_seconds;
    j["steps_per_second"] = r.steps_per_second;
  }
  j["clip_norm"] = r.clip_norm;
  j["clipped_steps"] = r.clipped_steps;
  j["final_loss"] = r.final_loss;
  j["checkpoints"] = r.checkpoints;
  j["best_checkpoint"] = r.best_checkpoint;
  return j.dump(2) + "\n";
}

RunRecord parse_run_record(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunRecord r;
    for (const auto& p : j.at("history")) r.history.push_back({p.at("step").get<Index>(), p.at("dev_wer").get<double>()});
    r.best_step = j.at("best_step").get<Index>();
    r.best_dev_wer = j.at("best_dev_wer").get<double>();
    r.steps = j.at("steps").get<Index>();
    r.train_seconds = j.value("train_seconds", 0.0);
    r.steps_per_second = j.value("steps_per_second", 0.0);
    r.clip_norm = j.at("clip_norm").get<double>();
    r.clipped_steps = j.at("clipped_steps").get<Index>();
    r.final_loss = j.at("final_loss").get<double>();
    r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
    r.best_checkpoint = j.at("best_checkpoint").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run record: ") + e.what());
  }
}

template <typename S>
Optimizer<S>::Optimizer(OptimizerKind kind, std::vector<Tensor<S>> params, double learning_rate)
    : kind_(kind), params_(std::move(params)), lr_(learning_rate) {
  for (const auto& p : params_) {
    m_.push_back(Tensor<S>::Vector::Zero(p.size()));
    v_.push_back(Tensor<S>::Vector::Zero(p.size()));
  }
}

template <typename S>
double Optimizer<S>::step(double clip_norm) {
  double sq = 0;
  for (const auto& p : params_) {
    if (p.has_grad()) sq += static_cast<double>(p.grad_matrix().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  const S factor = clip_norm > 0 && norm > clip_norm ? static_cast<S>(clip_norm / norm) : S(1);
  ++t_;
  const S lr = static_cast<S>(lr_);
  const S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);
  const S c1 = S(1) - static_cast<S>(std::pow(0.9, static_cast<double>(t_)));
  const S c2 = S(1) - static_cast<S>(std::pow(0.999, static_cast<double>(t_)));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    Eigen::Map<typename Tensor<S>::Vector> w(p.data().data(), p.size());
    const auto g = Eigen::Map<const typename Tensor<S>::Vector>(p.grad().data(), p.size()) * factor;
    if (kind_ == OptimizerKind::kSgd) {
      w -= lr * g;
      continue;
    }
    m_[k] = b1 * m_[k] + (S(1) - b1) * g;
    v_[k] = b2 * v_[k] + (S(1) - b2) * g.cwiseAbs2();
    w.array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps);
  }
  return norm;
}

template <typename S>
void Optimizer<S>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename S>
RunRecord train(TransducerModel<S>& model, std::span<const Utterance> corpus, const TrainConfig& config) {
  namespace fs = std::filesystem;
  config.validate();
  apply_mask(model, config.mask);

  std::vector<const Utterance*> train_set, dev_set;
  for (const auto& u : corpus) {
    if (u.labels.empty()) continue;
    if (u.split == Split::kTrain) train_set.push_back(&u);
    if (u.split == Split::kDev) dev_set.push_back(&u);
  }
  if (train_set.empty()) throw ContractError("training corpus has no train-split utterances");
  if (dev_set.empty()) throw ContractError("training corpus has no dev-split utterances");

  std::vector<Tensor<S>> trainable;
  for (auto& p : model.parameters()) {
    if (p.value.requires_grad()) trainable.push_back(p.value);
  }
  Optimizer<S> optimizer(config.optimizer, trainable, config.learning_rate);

  DecodeOptions decode = config.decode;
  if (deterministic_mode()) decode.jobs = 1;

  const bool persist = !config.out_dir.empty();
  const fs::path out(config.out_dir);
  std::ofstream step_log, timing_log;
  if (persist) {
    fs::create_directories(out / "checkpoints");
    step_log.open(out / "steps.log", std::ios::trunc);
    timing_log.open(out / "timing.log", std::ios::trunc);
    if (!step_log || !timing_log) throw LookupError("cannot write logs under " + config.out_dir);
  }

  RunRecord record;
  record.clip_norm = config.clip_norm;
  std::vector<typename Tensor<S>::Vector> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& t : trainable) {
      best_values.push_back(Eigen::Map<const typename Tensor<S>::Vector>(t.data().data(), t.size()));
    }
  };
  auto evaluate_dev = [&](Index step) {
    const double wer = evaluate(model, dev_set, decode).wer();
    record.history.push_back({step, wer});
    if (persist) step_log << "eval step " << step << " dev_wer " << format_double(wer) << "\n" << std::flush;
    if (record.history.size() == 1 || wer < record.best_dev_wer) {
      record.best_dev_wer = wer;
      record.best_step = step;
      snapshot();
      if (persist) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoints/step-%06lld.ckpt", static_cast<long long>(step));
        const auto bytes = save_checkpoint(model);
        write_file((out / name).string(), bytes);
        record.checkpoints.push_back(name);
        record.best_checkpoint = name;
        write_text(out / "best.txt", std::string(name) + "\n");
      }
    }
  };

  std::mt19937_64 rng(config.seed);
  std::vector<const Utterance*> order = train_set;
  std::size_t cursor = order.size();
  auto next_utterance = [&]() {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  evaluate_dev(0);
  double loss_sum = 0;
  Index loss_count = 0;
  for (Index step = 1; step <= config.max_steps; ++step) {
    const auto t0 = Clock::now();
    std::vector<LogitLattice<S>> lattices;
    std::vector<std::vector<Index>> labels;
    Graph<S> graph;
    Tensor<S> loss;
    {
      GraphScope<S> scope(graph);
      for (Index b = 0; b < config.batch_size; ++b) {
        const Utterance* u = next_utterance();
        const std::uint64_t aug_seed = rng();
        const FeatureSequence feats =
            config.spec_augment ? spec_augment(u->features, *config.spec_augment, aug_seed) : u->features;
        lattices.push_back(model.forward(to_tensor<S>(stack_frames(feats, decode.stack, decode.stride)), u->labels));
        labels.push_back(u->labels);
      }
      loss = rnnt_loss_mean<S>(lattices, labels);
    }
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      throw DivergedError("training diverged at step " + std::to_string(step) + " (loss " + format_double(value) + ")",
                          static_cast<long>(step));
    }
    if (loss.requires_grad()) graph.backward(loss);
    const double norm = optimizer.step(config.clip_norm);
    optimizer.zero_grad();
    if (config.clip_norm > 0 && norm > config.clip_norm) ++record.clipped_steps;
    if (!std::isfinite(norm)) {
      throw DivergedError("training diverged at step " + std::to_string(step) + " (gradient norm not finite)",
                          static_cast<long>(step));
    }
    record.train_seconds += std::chrono::duration<double>(Clock::now() - t0).count();
    record.steps = step;
    record.final_loss = value;
    loss_sum += value;
    ++loss_count;
    if (persist && (step % config.log_every == 0 || step == config.max_steps)) {
      step_log << "step " << step << " loss " << format_double(loss_sum / static_cast<double>(loss_count))
               << " grad_norm " << format_double(norm) << "\n";
      timing_log << "step " << step << " train_seconds " << format_double(record.train_seconds) << "\n";
      loss_sum = 0;
      loss_count = 0;
    }
    if (step % config.eval_every == 0 || step == config.max_steps) evaluate_dev(step);
  }

  for (std::size_t k = 0; k < trainable.size(); ++k) {
    Eigen::Map<typename Tensor<S>::Vector>(trainable[k].data().data(), trainable[k].size()) = best_values[k];
  }
  record.steps_per_second = record.train_seconds > 0 ? static_cast<double>(record.steps) / record.train_seconds : 0;
  if (persist) {
    step_log << "best step " << record.best_step << " dev_wer " << format_double(record.best_dev_wer) << "\n";
    timing_log << "train_seconds " << format_double(record.train_seconds) << "\nsteps_per_second "
               << format_double(record.steps_per_second) << "\n";
    write_text(out / "record.json", run_record_json(record, false));
  }
  return record;
}

double measure_throughput(const RunRecord& record) {
  if (record.steps < 100) {
    throw MeasurementError("throughput needs a run of at least 100 steps, got " + std::to_string(record.steps));
  }
  if (!(record.train_seconds > 0)) throw MeasurementError("run has no recorded training time");
  return static_cast<double>(record.steps) / record.train_seconds;
}

bool deterministic_mode() {
  const char* v = std::getenv("XDK_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

template <typename S>
std::vector<SweepCell> sweep(const TransducerModel<S>& base, std::span<const Utterance> corpus, AdaptMode mode,
                             const SweepGrid& grid, const TrainConfig& base_config, double adapter_init_std,
                             int jobs) {
  if (grid.learning_rates.empty()) throw ContractError("sweep grid has no learning rates");
  const bool adapters = mode == AdaptMode::kAdapters;
  if (adapters && grid.bottlenecks.empty()) throw ContractError("adapter sweep grid has no bottleneck sizes");
  std::vector<SweepCell> cells;
  for (double lr : grid.learning_rates) {
    if (adapters) {
      for (Index d_b : grid.bottlenecks) cells.push_back({lr, d_b, std::nullopt, ""});
    } else {
      cells.push_back({lr, 0, std::nullopt, ""});
    }
  }
  auto run_cell = [&](SweepCell& cell) {
    TrainConfig cfg = base_config;
    cfg.mask = mask_for(mode);
    cfg.learning_rate = cell.learning_rate;
    if (!base_config.out_dir.empty()) {
      std::string name = "lr" + format_double(cell.learning_rate);
      if (adapters) name += "-db" + std::to_string(cell.d_b);
      cfg.out_dir = (std::filesystem::path(base_config.out_dir) / name).string();
    }
    try {
      TransducerModel<S> model = base.clone();
      if (adapters) inject(model, AdapterConfig{cell.d_b, adapter_init_std, {}}, base_config.seed);
      cell.record = train(model, corpus, cfg);
    } catch (const DivergedError& e) {
      cell.error = e.what();
    }
  };
  const std::size_t workers =
      deterministic_mode() ? 1 : std::min(cells.size(), static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (auto& c : cells) run_cell(c);
  } else {
    std::vector<std::thread> threads;
    std::mutex error_mutex;
    std::exception_ptr failure;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        for (std::size_t i = w; i < cells.size(); i += workers) {
          try {
            run_cell(cells[i]);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  std::stable_sort(cells.begin(), cells.end(), [](const SweepCell& a, const SweepCell& b) {
    if (a.record.has_value() != b.record.has_value()) return a.record.has_value();
    if (!a.record) return false;
    return a.record->best_dev_wer < b.record->best_dev_wer;
  });
  return cells;
}

template class Optimizer<float>;
template class Optimizer<double>;
template RunRecord train(TransducerModel<float>&, std::span<const Utterance>, const TrainConfig&);
template RunRecord train(TransducerModel<double>&, std::span<const Utterance>, const TrainConfig&);
template std::vector<SweepCell> sweep(const TransducerModel<float>&, std::span<const Utterance>, AdaptMode,
                                      const SweepGrid&, const TrainConfig&, double, int);
template std::vector<SweepCell> sweep(const TransducerModel<double>&, std::span<const Utterance>, AdaptMode,
                                      const SweepGrid&, const TrainConfig&, double, int);

}  // namespace xdk
