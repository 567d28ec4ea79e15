#pragma once

// Minibatch SGD with momentum over the weighted MFSAN objective, with the
// inverse-power learning-rate decay, a sigmoid ramp on the alignment weights,
// per-group learning-rate multipliers and resumable checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfsan/data.hpp"
#include "mfsan/kernels.hpp"
#include "mfsan/model.hpp"

namespace mfsan {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iteration, const std::string& component);
  std::size_t iteration() const { return iteration_; }
  const std::string& component() const { return component_; }

 private:
  std::size_t iteration_;
  std::string component_;
};

enum class SourceMode { round_robin, all_sources };

std::string to_string(SourceMode m);
SourceMode source_mode_from_string(const std::string& s);

inline constexpr const char* kRampFormula = "2/(1+exp(-theta*p))-1";

struct TrainConfig {
  std::size_t iterations = 4000;
  std::size_t batch_size = 32;
  double eta0 = 0.01;
  double alpha = 10.0;
  double beta = 0.75;
  double momentum = 0.9;
  double theta = 10.0;
  double lambda_base = 0.5;
  double gamma_base = 0.5;
  double lr_multiplier_scratch = 10.0;
  SourceMode source_mode = SourceMode::round_robin;
  EstimatorKind estimator = EstimatorKind::biased_v;
  KernelSpec kernel = KernelSpec::median(5, 2.0);
  DiscReduction disc_reduction = DiscReduction::mean_over_classes;
  SamplingMode sampling = SamplingMode::shuffle_epoch;
  // Route every source through branch 0 (single-branch pooled training).
  bool shared_branch = false;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Inverse of to_json; missing keys keep their defaults. The formula keys are
// accepted only with the values this build implements.
TrainConfig train_config_from_json(const nlohmann::json& j);

// eta0 / (1 + alpha p)^beta
double lr_at(double p, double eta0 = 0.01, double alpha = 10.0, double beta = 0.75);
// 2 / (1 + exp(-theta p)) - 1
double ramp_at(double p, double theta = 10.0);

struct ScheduleState {
  double progress = 0.0;
  double lr = 0.0;
  double ramp = 0.0;
};

ScheduleState schedule_at(std::size_t iteration, const TrainConfig& config);

struct OptimizerState {
  std::vector<Tensor> velocities;    // one per model parameter, same order
  std::vector<double> multipliers;   // learning-rate multiplier per parameter

  static OptimizerState for_model(MfsanModel& model, double scratch_multiplier);
};

// v <- momentum * v - lr * multiplier * grad; param <- param + v
void sgd_momentum_update(std::span<Parameter* const> params, OptimizerState& state, double lr,
                         double momentum);

struct LossValues {
  double cls = 0.0;
  double mmd = 0.0;
  double disc = 0.0;
  double total = 0.0;
};

struct StepResult {
  std::size_t iteration = 0;
  ScheduleState schedule;
  double effective_lambda = 0.0;
  double effective_gamma = 0.0;
  LossValues losses;
};

struct MetricsRecord {
  std::size_t iteration = 0;
  double progress = 0.0;
  double lr = 0.0;
  double effective_lambda = 0.0;
  double effective_gamma = 0.0;
  LossValues losses;
  std::vector<double> per_classifier_accuracy;
  double average_vote_accuracy = 0.0;
  double max_pairwise_disagreement = 0.0;
  double source_accuracy = 0.0;
};

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::json& j);

// Called after a step whose (iteration + 1) is a multiple of eval_every.
using Evaluator = std::function<MetricsRecord(MfsanModel&, const StepResult&)>;

class Trainer {
 public:
  Trainer(MfsanModel& model, const TrainingData& data, TrainConfig config);

  StepResult step();
  std::size_t iteration() const { return iteration_; }
  bool done() const { return iteration_ >= config_.iterations; }
  const TrainConfig& config() const { return config_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  MfsanModel& model() { return model_; }

  // Writes model, velocities, sampler states and iteration count.
  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores a checkpoint written by a trainer with the same configuration.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<SourceBatch> draw_source_batches();

  MfsanModel& model_;
  const TrainingData& data_;
  TrainConfig config_;
  OptimizerState optimizer_;
  std::vector<BatchSampler> source_samplers_;
  BatchSampler target_sampler_;
  std::size_t iteration_ = 0;
};

struct TrainingLog {
  std::vector<MetricsRecord> records;
  std::optional<std::string> divergence;  // set when training aborted on NaN/Inf
};

// Runs the remaining iterations. Divergence stops training and is reported
// in the returned log alongside the records gathered so far.
TrainingLog train(MfsanModel& model, const TrainingData& data, const TrainConfig& config,
                  const Evaluator& evaluate = {});
TrainingLog run_trainer(Trainer& trainer, const Evaluator& evaluate);

// Model-only checkpoint (no optimizer state).
void save_model(const MfsanModel& model, const std::filesystem::path& path);
MfsanModel load_model(const std::filesystem::path& path);

inline constexpr const char* kCheckpointMagic = "MFSAN-CKPT-1";

}  // namespace mfsan
