#pragma once

// Gaussian-mixture kernels and differentiable MMD estimators.

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsan/autodiff.hpp"

namespace mfsan {

class DegenerateDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientSampleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BandwidthMode { fixed, median_heuristic };
enum class EstimatorKind { biased_v, unbiased_u };

std::string to_string(BandwidthMode m);
std::string to_string(EstimatorKind k);
EstimatorKind estimator_from_string(const std::string& s);

// k(x, y) = sum_u weights[u] * exp(-|x - y|^2 / (2 * bandwidths[u]))
//
// `bandwidths` holds sigma^2 values. In median_heuristic mode the bandwidths
// are chosen per call from the data (see resolve_kernel) and the stored lists
// are ignored.
struct KernelSpec {
  std::vector<double> bandwidths;
  std::vector<double> weights;
  BandwidthMode mode = BandwidthMode::fixed;
  std::size_t ladder_size = 5;
  double step_multiplier = 2.0;

  static KernelSpec fixed(std::vector<double> bandwidths);
  static KernelSpec fixed(std::vector<double> bandwidths, std::vector<double> weights);
  static KernelSpec median(std::size_t ladder_size = 5, double step_multiplier = 2.0);

  // Throws std::invalid_argument listing every violated constraint.
  void validate() const;
};

struct MmdEstimate {
  Var value;
  EstimatorKind kind = EstimatorKind::biased_v;
  std::size_t n_source = 0;
  std::size_t n_target = 0;
};

// Median of the nonzero pairwise squared distances of the pooled rows of x and
// y, expanded into a geometric ladder {base * step^(i - ceil(L/2))}, i = 1..L,
// with uniform weights.
KernelSpec median_heuristic(const Tensor& x, const Tensor& y, std::size_t ladder_size,
                            double step_multiplier);

// Fixed specs are returned as-is; median specs are evaluated on the (detached)
// values of x and y, so no gradient flows through the bandwidth choice.
KernelSpec resolve_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& y);

Var gram(Var x, Var y, const KernelSpec& spec);

// Squared distance between empirical mean embeddings (V-statistic, includes
// the i == j terms). Nonnegative up to rounding.
MmdEstimate mmd_biased(Var x, Var y, const KernelSpec& spec);

// U-statistic: within-sample sums exclude the diagonal. Requires n, m >= 2;
// may be negative.
MmdEstimate mmd_unbiased(Var x, Var y, const KernelSpec& spec);

MmdEstimate mmd(Var x, Var y, const KernelSpec& spec, EstimatorKind kind);

// Alignment-loss extension point: any differentiable discrepancy between a
// batch of source features and a batch of target features. MMD is the only
// implementation shipped; CORAL or adversarial terms would plug in here.
using AlignmentLoss = std::function<Var(Var source_features, Var target_features)>;

AlignmentLoss make_mmd_alignment(KernelSpec spec, EstimatorKind kind);

}  // namespace mfsan
