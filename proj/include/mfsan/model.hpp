#pragma once

// Multi-branch network: a common extractor F shared by all domains, and per
// source j an unshared extractor H_j followed by a softmax classifier C_j.
// The loss functions here cover classification, per-branch MMD alignment,
// pairwise classifier discrepancy and their weighted total.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mfsan/autodiff.hpp"
#include "mfsan/binary_io.hpp"
#include "mfsan/kernels.hpp"
#include "mfsan/random.hpp"

namespace mfsan {

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // out
};

// Fully connected stack. Every layer except the last is followed by relu; the
// last one too when `activate_output` is set.
class MlpBlock {
 public:
  MlpBlock() = default;
  MlpBlock(std::vector<std::size_t> layer_dims, bool activate_output, Rng& rng);

  Var forward(Graph& g, Var x);

  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  std::size_t input_width() const { return dims_.front(); }
  std::size_t output_width() const { return dims_.back(); }
  bool activate_output() const { return activate_output_; }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<std::size_t> dims_;
  bool activate_output_ = false;
  std::vector<Linear> layers_;
};

enum class DiscReduction { mean_over_classes, sum_over_classes };

std::string to_string(DiscReduction r);  // "mean" | "sum"
DiscReduction disc_reduction_from_string(const std::string& s);

struct Architecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> common_hidden{32};     // widths of F's layers
  std::vector<std::size_t> branch_hidden{32, 16};  // widths of H_j's layers; last = feature width
  std::size_t num_classes = 4;
  std::size_t num_sources = 2;

  std::size_t common_width() const {
    return common_hidden.empty() ? input_dim : common_hidden.back();
  }
  std::size_t feature_width() const { return branch_hidden.back(); }
  void validate() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Branch {
  MlpBlock extractor;
  Linear classifier;
};

struct BranchOutput {
  Var features;
  Var logits;
  Var probs;
};

// A labeled minibatch routed to one branch.
struct SourceBatch {
  std::size_t branch = 0;
  Tensor features;
  std::vector<std::size_t> labels;
};

class MfsanModel {
 public:
  MfsanModel() = default;
  MfsanModel(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  std::size_t num_sources() const { return branches_.size(); }
  std::size_t num_classes() const { return arch_.num_classes; }

  Var common(Graph& g, Var x);
  BranchOutput branch(Graph& g, std::size_t j, Var common_features);

  BranchOutput forward_source(Graph& g, std::size_t j, Var x);
  // F(x) is computed once and fed to every branch.
  std::vector<BranchOutput> forward_target(Graph& g, Var x);

  MlpBlock& common_block() { return common_; }
  std::vector<Branch>& branches() { return branches_; }
  const std::vector<Branch>& branches() const { return branches_; }

  // Parameters of F (learning-rate group 0) and of every H_j, C_j (group 1).
  std::vector<Parameter*> common_parameters();
  std::vector<Parameter*> branch_parameters();
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  void zero_grad();

  void write(BinaryWriter& w) const;
  static MfsanModel read(BinaryReader& r);

  friend bool parameters_equal(const MfsanModel& a, const MfsanModel& b);

 private:
  Architecture arch_;
  MlpBlock common_;
  std::vector<Branch> branches_;
};

// ---- losses ------------------------------------------------------------------

// Mean cross-entropy of one batch given logits.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

// Sum over batches of the mean cross-entropy of each batch on its branch.
Var cls_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches);

// Mean over batches of D(H_b(F(x_s)), H_b(F(x_t))), b = batch branch.
Var mmd_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches,
             const Tensor& target, const KernelSpec& spec, EstimatorKind kind);

// Average over branch pairs of the mean absolute difference of their target
// probabilities. Exactly 0 for a single branch.
Var disc_loss(MfsanModel& model, Graph& g, const Tensor& target,
              DiscReduction reduction = DiscReduction::mean_over_classes);
Var disc_from_probs(Graph& g, std::span<const Var> probs, DiscReduction reduction);

struct LossBreakdown {
  Var cls;
  Var mmd;
  Var disc;
  Var total;
  double effective_lambda = 0.0;
  double effective_gamma = 0.0;
};

struct LossWeights {
  double lambda = 0.0;
  double gamma = 0.0;
  DiscReduction disc_reduction = DiscReduction::mean_over_classes;
};

// total = cls + lambda * mmd + gamma * disc, sharing one forward pass. The
// discrepancy term uses every branch on the target batch regardless of which
// branches the source batches feed.
LossBreakdown total_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches,
                         const Tensor& target, const KernelSpec& spec, EstimatorKind kind,
                         const LossWeights& weights);

// ---- prediction ----------------------------------------------------------------

struct Prediction {
  std::vector<std::size_t> labels;                   // argmax of avg_probs
  Tensor avg_probs;                                  // n x K
  std::vector<std::vector<std::size_t>> per_branch;  // N x n
  std::vector<Tensor> branch_probs;                  // N tensors, n x K
};

// Row argmax; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& probs);

Prediction predict(MfsanModel& model, const Tensor& x);

// Rows of H_j(F(x)) for every branch j.
std::vector<Tensor> extract_features(MfsanModel& model, const Tensor& x);

}  // namespace mfsan
