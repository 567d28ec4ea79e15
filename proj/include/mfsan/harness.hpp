#pragma once

// Experiment orchestration: comparison methods, multi-seed summaries, the
// per-classifier report, lambda sweeps, convergence series and latent feature
// export. All outputs are plain JSON-lines / JSON / CSV files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mfsan/data.hpp"
#include "mfsan/model.hpp"
#include "mfsan/trainer.hpp"

namespace mfsan {

enum class Method { no_adapt, single_best, source_combine, mfsan_mmd, mfsan_disc, mfsan };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<std::string>& method_names();

// Default grid for the lambda sensitivity sweep.
inline const std::vector<double> kDefaultLambdaGrid{0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0};

struct ExperimentSpec {
  Method method = Method::mfsan;
  // Synthetic task description or path to a task manifest.
  std::variant<SyntheticSpec, std::filesystem::path> task = SyntheticSpec{};
  Architecture architecture;  // input_dim, num_classes, num_sources follow the task
  TrainConfig train;          // train.seed is replaced by each run seed
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir;
  std::size_t threads = 0;  // 0 = one per hardware thread

  void validate() const;
};

nlohmann::json to_json(const ExperimentSpec& spec);
// Inverse of to_json. A relative manifest path is resolved against base_dir.
ExperimentSpec experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

// Train config with the method's coefficient switches applied.
TrainConfig method_config(Method method, const TrainConfig& base);

MultiSourceTask load_experiment_task(const ExperimentSpec& spec);

// Accuracy of each classifier, the average vote and the disagreement rate on
// the held-out target labels; source accuracy of the average vote on the
// pooled source data.
MetricsRecord evaluate_model(MfsanModel& model, const MultiSourceTask& task);

// Fraction of rows where at least two branches' argmax labels differ.
double disagreement_rate(const std::vector<std::vector<std::size_t>>& per_branch);

// Largest pairwise difference between per-classifier accuracies.
double max_accuracy_gap(const std::vector<double>& per_classifier);

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> log;  // includes the final evaluation
  std::optional<MetricsRecord> final_metrics;
  std::optional<std::string> error;
  // single_best only: final average-vote accuracy of each single-source run.
  std::vector<double> constituent_accuracy;
  std::size_t chosen_source = 0;
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t count = 0;
};

Stat summarize(const std::vector<double>& values);

struct MethodResult {
  Method method = Method::mfsan;
  std::vector<SeedRun> runs;
  Stat average_vote_accuracy;
  std::vector<Stat> per_classifier_accuracy;
  Stat max_pairwise_disagreement;
  Stat max_classifier_gap;
  Stat source_accuracy;

  nlohmann::json summary_json() const;
};

// Trains one model for one seed and returns it with its log. The log's last
// record is the evaluation after the final step.
struct TrainedRun {
  MfsanModel model;
  SeedRun run;
};
TrainedRun train_method(Method method, const MultiSourceTask& task, const Architecture& arch,
                        const TrainConfig& base, std::uint64_t seed);

// Runs every seed (in parallel when threads allow). When output_dir is set,
// writes <outdir>/<method>/<seed>/log.jsonl and <outdir>/<method>/summary.json.
MethodResult run_method(const ExperimentSpec& spec, const MultiSourceTask& task);
MethodResult run_method(const ExperimentSpec& spec);

MethodResult aggregate(Method method, std::vector<SeedRun> runs);

// Per-classifier report: rows S1..SN and Avg for each method plus the mean
// largest inter-classifier gap.
struct Table4 {
  std::vector<std::string> methods;
  std::vector<std::string> rows;               // "S1".."SN", "Avg"
  std::vector<std::vector<double>> accuracy;   // [method][row], seed means
  std::vector<double> mean_gap;                // [method]

  void write_csv(const std::filesystem::path& path) const;
};

Table4 table4_report(const std::vector<MethodResult>& results);

struct SweepPoint {
  double lambda = 0.0;
  Stat average_vote_accuracy;
  std::size_t failures = 0;
};

// One run_method per value with lambda_base = gamma_base = value.
std::vector<SweepPoint> sweep_lambda(const ExperimentSpec& spec, const MultiSourceTask& task,
                                     const std::vector<double>& values);
void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);

struct ConvergencePoint {
  std::size_t iteration = 0;
  std::vector<double> per_classifier_accuracy;  // seed means
  double average_vote_accuracy = 0.0;
  double band() const;  // max - min over classifiers
};

struct ConvergenceSeries {
  Method method = Method::mfsan;
  std::vector<ConvergencePoint> points;
  // Band of each seed at each point, for per-seed analysis.
  std::vector<std::vector<double>> seed_bands;  // [seed][point]
};

// mfsan and mfsan_mmd on the same iteration grid.
std::vector<ConvergenceSeries> convergence_log(const ExperimentSpec& spec, const MultiSourceTask& task);
void write_convergence_csv(const std::vector<ConvergenceSeries>& series,
                           const std::filesystem::path& path);
// Mean inter-classifier band over the points in the last quarter of training.
double late_band(const ConvergenceSeries& series, std::size_t total_iterations);

// One CSV per branch: feature columns, domain tag (source_j | target), label.
std::vector<std::filesystem::path> export_embeddings(MfsanModel& model, const MultiSourceTask& task,
                                                     const std::filesystem::path& dir);

}  // namespace mfsan
