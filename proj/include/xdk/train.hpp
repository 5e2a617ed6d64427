#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xdk/adapters.hpp"
#include "xdk/data.hpp"
#include "xdk/decode_eval.hpp"
#include "xdk/model.hpp"

namespace xdk {

enum class OptimizerKind { kSgd, kAdam };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

// The adaptation styles compared in the evaluation: adapter-only training
// and three encoder fine-tuning variants.
enum class AdaptMode { kAdapters, kFinetuneEncoder, kFinetuneLayer1, kFinetuneLayers1To3 };
std::string to_string(AdaptMode mode);
AdaptMode parse_adapt_mode(const std::string& name);
TrainableMask mask_for(AdaptMode mode);

struct TrainConfig {
  TrainableMask mask;
  double learning_rate = 1e-3;
  Index max_steps = 1000;
  Index batch_size = 8;
  Index eval_every = 100;
  Index log_every = 10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double clip_norm = 5.0;
  std::optional<SpecAugmentConfig> spec_augment;
  DecodeOptions decode;
  // When set, the step log, timing log, checkpoints at each new best, a
  // best-checkpoint marker, and the run record are written here.
  std::string out_dir;

  void validate() const;
};

struct EvalPoint {
  Index step = 0;
  double dev_wer = 0;
};

struct RunRecord {
  std::vector<EvalPoint> history;
  Index best_step = 0;
  double best_dev_wer = 0;
  Index steps = 0;
  double train_seconds = 0;  // wall clock inside training steps only
  double steps_per_second = 0;
  double clip_norm = 0;
  Index clipped_steps = 0;
  double final_loss = 0;
  std::vector<std::string> checkpoints;
  std::string best_checkpoint;
};

// Timing fields vary between identical runs; the persisted record.json omits
// them and timing.log carries them instead.
std::string run_record_json(const RunRecord& record, bool include_timing = true);
// Missing timing fields read as 0. Throws FormatError.
RunRecord parse_run_record(const std::string& json);

// Adam with beta1 0.9, beta2 0.999, eps 1e-8, or plain SGD, over the tensors
// that require gradients. Moments are kept per tensor.
template <typename S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<Tensor<S>> params, double learning_rate);
  // Scales gradients to global norm <= clip_norm (if > 0) and updates.
  // Returns the pre-clip global norm.
  double step(double clip_norm);
  void zero_grad();

 private:
  OptimizerKind kind_;
  std::vector<Tensor<S>> params_;
  std::vector<typename Tensor<S>::Vector> m_, v_;
  double lr_;
  long t_ = 0;
};

// Trains the groups in cfg.mask (everything else is frozen) on the train
// split, evaluating dev WER at step 0, every eval_every steps, and at the
// end. The model is left at the best dev-WER point (earliest on ties).
// Throws DivergedError naming the step if the loss becomes non-finite.
template <typename S>
RunRecord train(TransducerModel<S>& model, std::span<const Utterance> corpus, const TrainConfig& config);

// Wall-clock training steps per second, excluding evaluation. Throws
// MeasurementError for runs shorter than 100 steps.
double measure_throughput(const RunRecord& record);

struct SweepGrid {
  std::vector<double> learning_rates;
  // Adapter bottlenecks; ignored (one cell per rate) for fine-tuning modes.
  std::vector<Index> bottlenecks;
};

struct SweepCell {
  double learning_rate = 0;
  Index d_b = 0;
  std::optional<RunRecord> record;
  std::string error;  // set when the run diverged or failed
};

// One run per grid cell from a copy of `base`, cells in parallel across
// `jobs` workers. Results are sorted by best dev WER (failed cells last).
template <typename S>
std::vector<SweepCell> sweep(const TransducerModel<S>& base, std::span<const Utterance> corpus, AdaptMode mode,
                             const SweepGrid& grid, const TrainConfig& base_config, double adapter_init_std = 1e-3,
                             int jobs = 1);

// Single-thread mode requested through XDK_DETERMINISTIC=1.
bool deterministic_mode();

}  // namespace xdk
