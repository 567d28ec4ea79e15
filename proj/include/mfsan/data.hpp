#pragma once

// Multi-source tasks: synthetic generation, CSV ingestion and minibatch
// sampling.
//
// Target labels are kept out of TrainingData entirely. Training code receives
// a TrainingData; only evaluation code goes through EvaluationAccess.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfsan/autodiff.hpp"
#include "mfsan/binary_io.hpp"
#include "mfsan/random.hpp"

namespace mfsan {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

class ConfigurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LabeledDomain {
  std::string name;
  Tensor features;  // n x d
  std::vector<std::size_t> labels;
};

struct UnlabeledDomain {
  std::string name;
  Tensor features;  // n x d
};

struct TrainingData {
  std::vector<LabeledDomain> sources;
  UnlabeledDomain target;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;

  std::size_t num_sources() const { return sources.size(); }
  void validate() const;
};

class MultiSourceTask {
 public:
  MultiSourceTask() = default;
  MultiSourceTask(TrainingData training, std::optional<std::vector<std::size_t>> target_labels);

  const TrainingData& training() const { return training_; }
  std::size_t num_sources() const { return training_.num_sources(); }
  std::size_t num_classes() const { return training_.num_classes; }
  std::size_t feature_dim() const { return training_.feature_dim; }
  bool has_target_labels() const { return target_labels_.has_value(); }

 private:
  friend class EvaluationAccess;
  TrainingData training_;
  std::optional<std::vector<std::size_t>> target_labels_;
};

// The one door to held-out target labels.
class EvaluationAccess {
 public:
  static const std::vector<std::size_t>& target_labels(const MultiSourceTask& task);
};

// ---- synthetic generation -------------------------------------------------------

// x -> scale * R(angle) x + translation. The rotation acts on every
// consecutive coordinate pair (0,1), (2,3), ...; an odd trailing coordinate is
// left unrotated.
struct AffineTransform {
  double angle_deg = 0.0;
  double scale = 1.0;
  std::vector<double> translation;  // empty = no translation

  std::vector<double> apply(std::span<const double> x) const;
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t feature_dim = 8;
  // K x d; when empty, means are drawn as mean_offset + N(0, class_separation^2)
  // per coordinate with a stream derived from `seed`.
  std::vector<std::vector<double>> class_means;
  double class_separation = 1.5;
  double mean_offset = 1.5;
  double class_cov_scale = 0.5;
  // N + 1 entries; the last one is the target domain.
  std::vector<AffineTransform> domain_transforms{{0.0, 1.0, {}}, {25.0, 1.0, {}}, {50.0, 1.0, {}}};
  std::size_t samples_per_domain = 400;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  std::size_t num_sources() const {
    return domain_transforms.empty() ? 0 : domain_transforms.size() - 1;
  }
  std::vector<std::string> violations() const;
  void validate() const;
};

MultiSourceTask generate_synthetic(const SyntheticSpec& spec);

nlohmann::json to_json(const SyntheticSpec& spec);
// Missing keys keep their defaults; unknown keys are a ValidationError.
SyntheticSpec synthetic_from_json(const nlohmann::json& j);

// Throws ValidationError when `j` is not an object or has a key outside
// `known`; the message lists the valid keys.
void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                        const std::string& where);

// Class means actually used by the generator (explicit or seeded).
std::vector<std::vector<double>> resolved_class_means(const SyntheticSpec& spec);

// ---- CSV -------------------------------------------------------------------------

struct CsvDomain {
  Tensor features;
  std::optional<std::vector<std::size_t>> labels;
};

struct CsvSchema {
  std::optional<std::size_t> feature_dim;  // enforce width when set
  bool require_labels = false;
};

// Header `feature_0,...,feature_{d-1}[,label]`. Errors carry the 1-based
// file line (the header is line 1).
CsvDomain load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
CsvDomain parse_csv(std::istream& in, const std::string& name, const CsvSchema& schema = {});
void write_csv(const std::filesystem::path& path, const Tensor& features,
               const std::vector<std::size_t>* labels);

// ---- manifest ----------------------------------------------------------------------

// JSON: {"format": "mfsan-task-1", "num_classes": K, "feature_dim": d,
//        "sources": ["source_0.csv", ...], "target": "target.csv"}
// Paths are relative to the manifest's directory. The target file may carry
// a label column; it is loaded into the evaluation-only slot.
MultiSourceTask load_task(const std::filesystem::path& manifest);
std::vector<std::filesystem::path> write_task(const MultiSourceTask& task,
                                              const std::filesystem::path& dir);

// ---- sampling ----------------------------------------------------------------------

enum class SamplingMode { shuffle_epoch, with_replacement };

std::string to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(const std::string& s);

struct LabeledBatch {
  Tensor features;
  std::vector<std::size_t> labels;
};

class BatchSampler {
 public:
  BatchSampler(std::size_t domain_size, std::size_t batch_size, SamplingMode mode,
               std::uint64_t seed);

  std::vector<std::size_t> next_indices();
  LabeledBatch next(const LabeledDomain& d);
  Tensor next(const UnlabeledDomain& d);

  std::size_t domain_size() const { return n_; }
  std::size_t batch_size() const { return m_; }

  void write(BinaryWriter& w) const;
  void read(BinaryReader& r);

  friend bool operator==(const BatchSampler&, const BatchSampler&) = default;

 private:
  void reshuffle();

  std::size_t n_ = 0;
  std::size_t m_ = 0;
  SamplingMode mode_ = SamplingMode::shuffle_epoch;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mfsan
