#include "mfsan/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mfsan {

std::string to_string(BandwidthMode m) {
  return m == BandwidthMode::fixed ? "fixed" : "median_heuristic";
}

std::string to_string(EstimatorKind k) {
  return k == EstimatorKind::biased_v ? "biased_v" : "unbiased_u";
}

EstimatorKind estimator_from_string(const std::string& s) {
  if (s == "biased_v") return EstimatorKind::biased_v;
  if (s == "unbiased_u") return EstimatorKind::unbiased_u;
  throw std::invalid_argument("unknown estimator '" + s + "' (expected biased_v or unbiased_u)");
}

KernelSpec KernelSpec::fixed(std::vector<double> bandwidths) {
  const std::size_t n = bandwidths.size();
  return fixed(std::move(bandwidths), std::vector<double>(n, n ? 1.0 / static_cast<double>(n) : 0.0));
}

KernelSpec KernelSpec::fixed(std::vector<double> bandwidths, std::vector<double> weights) {
  KernelSpec s;
  s.bandwidths = std::move(bandwidths);
  s.weights = std::move(weights);
  s.mode = BandwidthMode::fixed;
  s.validate();
  return s;
}

KernelSpec KernelSpec::median(std::size_t ladder_size, double step_multiplier) {
  KernelSpec s;
  s.mode = BandwidthMode::median_heuristic;
  s.ladder_size = ladder_size;
  s.step_multiplier = step_multiplier;
  s.validate();
  return s;
}

void KernelSpec::validate() const {
  std::vector<std::string> problems;
  if (mode == BandwidthMode::fixed) {
    if (bandwidths.empty()) problems.push_back("bandwidths must be nonempty");
    if (weights.size() != bandwidths.size())
      problems.push_back("weights must match bandwidths in length");
    for (double b : bandwidths)
      if (!(b > 0.0) || !std::isfinite(b)) problems.push_back("bandwidths must be positive");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) problems.push_back("weights must be nonnegative");
      total += w;
    }
    if (std::fabs(total - 1.0) > 1e-12) problems.push_back("weights must sum to 1");
  } else {
    if (ladder_size < 1) problems.push_back("ladder_size must be >= 1");
    if (!(step_multiplier > 1.0)) problems.push_back("step_multiplier must be > 1");
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "invalid kernel spec:";
    for (const auto& p : problems) os << ' ' << p << ';';
    throw std::invalid_argument(os.str());
  }
}

KernelSpec median_heuristic(const Tensor& x, const Tensor& y, std::size_t ladder_size,
                            double step_multiplier) {
  if (x.cols() != y.cols())
    throw DimensionError("median_heuristic: feature dimensions differ for " +
                         shape_string(x.shape()) + " and " + shape_string(y.shape()));
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  if (n + m < 2) throw InsufficientSampleError("median_heuristic needs at least 2 points");
  x.check_finite("median_heuristic input");
  y.check_finite("median_heuristic input");
  auto row = [&](std::size_t i) { return i < n ? &x.values()[i * d] : &y.values()[(i - n) * d]; };
  std::vector<double> dists;
  dists.reserve((n + m) * (n + m - 1) / 2);
  for (std::size_t i = 0; i < n + m; ++i) {
    const double* a = row(i);
    for (std::size_t j = i + 1; j < n + m; ++j) {
      const double* b = row(j);
      double s = 0.0;
      for (std::size_t u = 0; u < d; ++u) s += (a[u] - b[u]) * (a[u] - b[u]);
      if (s > 0.0) dists.push_back(s);
    }
  }
  if (dists.empty()) throw DegenerateDataError("median_heuristic: all pairwise distances are zero");
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double base = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    base = 0.5 * (base + lower);
  }
  if (!std::isfinite(base)) throw DomainError("median_heuristic: median squared distance overflows");
  KernelSpec probe = KernelSpec::median(ladder_size, step_multiplier);
  const auto center = static_cast<long>((ladder_size + 1) / 2);
  std::vector<double> bandwidths;
  for (std::size_t i = 1; i <= probe.ladder_size; ++i)
    bandwidths.push_back(base * std::pow(step_multiplier, static_cast<long>(i) - center));
  return KernelSpec::fixed(std::move(bandwidths));
}

KernelSpec resolve_kernel(const KernelSpec& spec, const Tensor& x, const Tensor& y) {
  if (spec.mode == BandwidthMode::fixed) return spec;
  return median_heuristic(x, y, spec.ladder_size, spec.step_multiplier);
}

Var gram(Var x, Var y, const KernelSpec& spec) {
  const KernelSpec k = resolve_kernel(spec, x.value(), y.value());
  Var d2 = pairwise_sq_dist(x, y);
  Var out;
  for (std::size_t u = 0; u < k.bandwidths.size(); ++u) {
    Var term = mul_scalar(exp(mul_scalar(d2, -1.0 / (2.0 * k.bandwidths[u]))), k.weights[u]);
    out = out.valid() ? add(out, term) : term;
  }
  return out;
}

MmdEstimate mmd_biased(Var x, Var y, const KernelSpec& spec) {
  const KernelSpec k = resolve_kernel(spec, x.value(), y.value());
  Var kxx = mean(gram(x, x, k));
  Var kyy = mean(gram(y, y, k));
  Var kxy = mean(gram(x, y, k));
  Var value = sub(add(kxx, kyy), mul_scalar(kxy, 2.0));
  return {value, EstimatorKind::biased_v, x.value().rows(), y.value().rows()};
}

namespace {

Tensor off_diagonal_mask(std::size_t n) {
  Tensor mask(Shape{n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask.at(i, i) = 0.0;
  return mask;
}

}  // namespace

MmdEstimate mmd_unbiased(Var x, Var y, const KernelSpec& spec) {
  const std::size_t n = x.value().rows(), m = y.value().rows();
  if (n < 2 || m < 2)
    throw InsufficientSampleError("mmd_unbiased needs at least 2 samples per side, got " +
                                  std::to_string(n) + " and " + std::to_string(m));
  const KernelSpec k = resolve_kernel(spec, x.value(), y.value());
  Graph& g = x.graph();
  Var within_x = sum(mul(gram(x, x, k), g.constant(off_diagonal_mask(n))));
  Var within_y = sum(mul(gram(y, y, k), g.constant(off_diagonal_mask(m))));
  Var cross = mean(gram(x, y, k));
  const double nx = static_cast<double>(n), ny = static_cast<double>(m);
  Var value = sub(add(mul_scalar(within_x, 1.0 / (nx * (nx - 1.0))),
                      mul_scalar(within_y, 1.0 / (ny * (ny - 1.0)))),
                  mul_scalar(cross, 2.0));
  return {value, EstimatorKind::unbiased_u, n, m};
}

MmdEstimate mmd(Var x, Var y, const KernelSpec& spec, EstimatorKind kind) {
  return kind == EstimatorKind::biased_v ? mmd_biased(x, y, spec) : mmd_unbiased(x, y, spec);
}

AlignmentLoss make_mmd_alignment(KernelSpec spec, EstimatorKind kind) {
  spec.validate();
  return [spec = std::move(spec), kind](Var s, Var t) { return mmd(s, t, spec, kind).value; };
}

}  // namespace mfsan
