#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/backbone.hpp"
#include "slimunet/corpus.hpp"
#include "slimunet/diffusion.hpp"
#include "slimunet/distill.hpp"
#include "slimunet/pruning.hpp"

namespace slimunet {

/// Adam with bias correction over a fixed parameter set. Moments are kept
/// in the parameter precision.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the parameters' current gradients; parameters
  /// without a gradient are left untouched.
  void step();
  std::int64_t steps_taken() const noexcept { return t_; }
  double learning_rate() const noexcept { return lr_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

/// Rescales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(const std::vector<Var<T>>& params, double max_norm);

struct TrainHyper {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int max_steps = 2000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_clip = 1.0;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
  int eval_every = 500;   // 0 disables intermediate evaluation
  int log_every = 50;     // train records average the losses since the last record
  int eval_batch = 16;
  std::uint64_t eval_seed = 1234;
};

std::vector<std::string> validate_hyper(const TrainHyper& h);
nlohmann::json to_json(const TrainHyper& h);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
TrainHyper hyper_from_json(const nlohmann::json& j);

/// Encoded latents and captions ready for training.
struct LatentDataset {
  Tensor<float> latents;  // [N, C, h, w]
  std::vector<std::vector<int>> captions;

  std::int64_t size() const { return static_cast<std::int64_t>(captions.size()); }
  LatentDataset subset(const std::vector<std::size_t>& indices) const;
};

LatentDataset encode_corpus(const std::vector<CaptionedImage>& corpus, const FrozenEncoders& encoders);

/// Seed-stable split: the round(n/10) indices with the smallest hash are held out.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};
Split heldout_split(std::size_t n, std::uint64_t seed);

/// Frozen encoders plus the train/held-out partitions they produced.
struct TrainingData {
  std::shared_ptr<const FrozenEncoders> encoders;
  LatentDataset train;
  LatentDataset heldout;
};

TrainingData prepare_training_data(const std::vector<CaptionedImage>& corpus,
                                   std::shared_ptr<const FrozenEncoders> encoders, std::uint64_t split_seed);

/// Pooled conditioning derived from the context (token mean, truncated or
/// zero-padded to dim). Only used when the config has a pooled embedding.
Tensor<float> pooled_from_context(const Tensor<float>& context, int dim);

/// Append-only metrics sink; mirrors every record to JSONL when a path is set.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::filesystem::path jsonl);

  void append(nlohmann::json record);
  const std::vector<nlohmann::json>& records() const noexcept { return records_; }
  /// Records whose "kind" equals `kind`.
  std::vector<nlohmann::json> of_kind(const std::string& kind) const;

 private:
  std::optional<std::filesystem::path> path_;
  std::vector<nlohmann::json> records_;
};

struct TeacherEntry {
  std::string id;
  std::shared_ptr<const UNetModel> model;
  int start_step = 0;
};

/// Ordered teachers; entry k is active for updates k with start_step <= update index.
struct TeacherSchedule {
  std::vector<TeacherEntry> entries;

  std::vector<std::string> validate() const;
  /// Index of the teacher active once `completed` updates have been applied.
  std::size_t active(int completed) const;
};

struct DistillRunConfig {
  PruningPlan plan;
  DistillLossWeights weights;
  TeacherSchedule teachers;
  TrainHyper hyper;
};

struct RunOutput {
  std::optional<std::filesystem::path> dir;  // checkpoint + metrics.jsonl when set
};

struct TrainResult {
  UNetModel model;
  MetricsLog metrics;
  nlohmann::json summary;
};

/// Evaluation over a dataset with per-item fixed timestep and noise draws.
LossBreakdown evaluate(const UNetModel& student, const UNetModel& teacher, const LatentDataset& data,
                       const FrozenEncoders& encoders, const DiffusionSchedule& schedule,
                       const DistillLossWeights& weights, std::uint64_t seed = 1234, int batch_size = 16);

/// Epsilon-prediction training from scratch (task loss only).
TrainResult train_teacher(const TrainingData& data, const UNetConfig& config, const TrainHyper& hyper,
                          const DiffusionSchedule& schedule, const RunOutput& out = {});

/// Continues training an existing teacher on `subset`; zero steps returns an identical copy.
TrainResult finetune_teacher(const UNetModel& teacher, const TrainingData& subset, const TrainHyper& hyper,
                             const DiffusionSchedule& schedule, const RunOutput& out = {});

/// Distills a pruned student from the scheduled teachers.
TrainResult distill(const DistillRunConfig& run, const TrainingData& data, const DiffusionSchedule& schedule,
                    const RunOutput& out = {});

/// Distills starting from an explicit student rather than inheriting from the first teacher.
TrainResult distill_from(UNetModel student, const DistillRunConfig& run, const TrainingData& data,
                         const DiffusionSchedule& schedule, const RunOutput& out = {});

/// One distilled checkpoint per fraction; level i inherits from level i-1.
std::vector<TrainResult> progressive_distill(const std::vector<double>& fractions, const DistillRunConfig& base_run,
                                             const TrainingData& data, const DiffusionSchedule& schedule,
                                             const RunOutput& out = {}, RemovalOrder order = RemovalOrder::deepest_first);

}  // namespace slimunet
