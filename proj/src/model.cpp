#include "mfsan/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mfsan {

std::string to_string(DiscReduction r) {
  return r == DiscReduction::mean_over_classes ? "mean" : "sum";
}

DiscReduction disc_reduction_from_string(const std::string& s) {
  if (s == "mean") return DiscReduction::mean_over_classes;
  if (s == "sum") return DiscReduction::sum_over_classes;
  throw std::invalid_argument("unknown disc reduction '" + s + "' (expected mean or sum)");
}

namespace {

Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w(Shape{in, out});
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
  return Linear{Parameter(std::move(w)), Parameter(Tensor(Shape{out}))};
}

Var apply_linear(Graph& g, Linear& layer, Var x) {
  return add(matmul(x, g.param(layer.weight)), g.param(layer.bias));
}

void write_dims(BinaryWriter& w, const std::vector<std::size_t>& dims) {
  w.u64(dims.size());
  for (std::size_t d : dims) w.u64(d);
}

std::vector<std::size_t> read_dims(BinaryReader& r) {
  const std::uint64_t n = r.u64();
  if (n > 64) throw CheckpointError("checkpoint layer list too long");
  std::vector<std::size_t> dims;
  for (std::uint64_t i = 0; i < n; ++i) dims.push_back(static_cast<std::size_t>(r.u64()));
  return dims;
}

}  // namespace

MlpBlock::MlpBlock(std::vector<std::size_t> layer_dims, bool activate_output, Rng& rng)
    : dims_(std::move(layer_dims)), activate_output_(activate_output) {
  if (dims_.empty()) throw std::invalid_argument("MlpBlock needs at least an input width");
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) {
    if (dims_[i] == 0 || dims_[i + 1] == 0) throw std::invalid_argument("MlpBlock widths must be positive");
    layers_.push_back(make_linear(dims_[i], dims_[i + 1], rng));
  }
}

Var MlpBlock::forward(Graph& g, Var x) {
  if (x.value().rank() != 2 || x.value().cols() != input_width())
    throw DimensionError("MlpBlock expects input width " + std::to_string(input_width()) +
                         ", got shape " + shape_string(x.value().shape()));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = apply_linear(g, layers_[i], x);
    if (i + 1 < layers_.size() || activate_output_) x = relu(x);
  }
  return x;
}

void Architecture::validate() const {
  std::vector<std::string> problems;
  if (input_dim == 0) problems.push_back("input_dim must be positive");
  if (num_classes < 2) problems.push_back("num_classes must be >= 2");
  if (num_sources < 1) problems.push_back("num_sources must be >= 1");
  if (branch_hidden.empty()) problems.push_back("branch_hidden must be nonempty");
  for (std::size_t w : common_hidden)
    if (w == 0) problems.push_back("common_hidden widths must be positive");
  for (std::size_t w : branch_hidden)
    if (w == 0) problems.push_back("branch_hidden widths must be positive");
  if (!problems.empty()) {
    std::ostringstream os;
    os << "invalid architecture:";
    for (const auto& p : problems) os << ' ' << p << ';';
    throw std::invalid_argument(os.str());
  }
}

MfsanModel::MfsanModel(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  Rng rng(seed);
  std::vector<std::size_t> common_dims{arch_.input_dim};
  common_dims.insert(common_dims.end(), arch_.common_hidden.begin(), arch_.common_hidden.end());
  common_ = MlpBlock(common_dims, true, rng);
  std::vector<std::size_t> branch_dims{arch_.common_width()};
  branch_dims.insert(branch_dims.end(), arch_.branch_hidden.begin(), arch_.branch_hidden.end());
  for (std::size_t j = 0; j < arch_.num_sources; ++j) {
    Branch b;
    b.extractor = MlpBlock(branch_dims, false, rng);
    b.classifier = make_linear(arch_.feature_width(), arch_.num_classes, rng);
    branches_.push_back(std::move(b));
  }
}

Var MfsanModel::common(Graph& g, Var x) { return common_.forward(g, x); }

BranchOutput MfsanModel::branch(Graph& g, std::size_t j, Var common_features) {
  if (j >= branches_.size())
    throw std::out_of_range("branch index " + std::to_string(j) + " out of range for " +
                            std::to_string(branches_.size()) + " branches");
  Branch& b = branches_[j];
  BranchOutput out;
  out.features = b.extractor.forward(g, common_features);
  out.logits = apply_linear(g, b.classifier, out.features);
  out.probs = softmax(out.logits);
  return out;
}

BranchOutput MfsanModel::forward_source(Graph& g, std::size_t j, Var x) {
  if (j >= branches_.size())
    throw std::out_of_range("branch index " + std::to_string(j) + " out of range for " +
                            std::to_string(branches_.size()) + " branches");
  return branch(g, j, common(g, x));
}

std::vector<BranchOutput> MfsanModel::forward_target(Graph& g, Var x) {
  Var f = common(g, x);
  std::vector<BranchOutput> outs;
  for (std::size_t j = 0; j < branches_.size(); ++j) outs.push_back(branch(g, j, f));
  return outs;
}

std::vector<Parameter*> MfsanModel::common_parameters() {
  std::vector<Parameter*> ps;
  for (Linear& l : common_.layers()) {
    ps.push_back(&l.weight);
    ps.push_back(&l.bias);
  }
  return ps;
}

std::vector<Parameter*> MfsanModel::branch_parameters() {
  std::vector<Parameter*> ps;
  for (Branch& b : branches_) {
    for (Linear& l : b.extractor.layers()) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
    }
    ps.push_back(&b.classifier.weight);
    ps.push_back(&b.classifier.bias);
  }
  return ps;
}

std::vector<Parameter*> MfsanModel::parameters() {
  auto ps = common_parameters();
  auto bs = branch_parameters();
  ps.insert(ps.end(), bs.begin(), bs.end());
  return ps;
}

std::vector<const Parameter*> MfsanModel::parameters() const {
  auto ps = const_cast<MfsanModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

void MfsanModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

void MfsanModel::write(BinaryWriter& w) const {
  w.u64(arch_.input_dim);
  write_dims(w, arch_.common_hidden);
  write_dims(w, arch_.branch_hidden);
  w.u64(arch_.num_classes);
  w.u64(arch_.num_sources);
  const auto ps = parameters();
  w.u64(ps.size());
  for (const Parameter* p : ps) w.tensor(p->value);
}

MfsanModel MfsanModel::read(BinaryReader& r) {
  Architecture arch;
  arch.input_dim = static_cast<std::size_t>(r.u64());
  arch.common_hidden = read_dims(r);
  arch.branch_hidden = read_dims(r);
  arch.num_classes = static_cast<std::size_t>(r.u64());
  arch.num_sources = static_cast<std::size_t>(r.u64());
  if (arch.num_sources > 1024 || arch.num_classes > (1u << 20) || arch.input_dim > (1u << 20))
    throw CheckpointError("checkpoint architecture out of range");
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  MfsanModel model(arch, 0);
  auto ps = model.parameters();
  if (r.u64() != ps.size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (Parameter* p : ps) {
    Tensor t = r.tensor();
    if (t.shape() != p->value.shape())
      throw CheckpointError("checkpoint parameter shape " + shape_string(t.shape()) +
                            " does not match architecture " + shape_string(p->value.shape()));
    *p = Parameter(std::move(t));
  }
  return model;
}

bool parameters_equal(const MfsanModel& a, const MfsanModel& b) {
  if (!(a.arch_ == b.arch_)) return false;
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i]->value == pb[i]->value)) return false;
  return true;
}

// ---- losses ------------------------------------------------------------------

namespace {

void check_labels(std::span<const std::size_t> labels, std::size_t k) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= k)
      throw LabelError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(k) + ")");
}

void check_batch(const SourceBatch& b, const MfsanModel& model) {
  if (b.features.rank() != 2 || b.features.rows() != b.labels.size())
    throw DimensionError("source batch has " + std::to_string(b.labels.size()) +
                         " labels for features of shape " + shape_string(b.features.shape()));
  check_labels(b.labels, model.num_classes());
}

}  // namespace

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  check_labels(labels, logits.value().cols());
  return mul_scalar(mean(pick(log_softmax(logits), labels)), -1.0);
}

Var cls_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches) {
  Var total = g.constant(Tensor::scalar(0.0));
  for (const SourceBatch& b : batches) {
    check_batch(b, model);
    BranchOutput out = model.forward_source(g, b.branch, g.constant(b.features));
    total = add(total, cross_entropy(out.logits, b.labels));
  }
  return total;
}

namespace {

// Every feature row identical (e.g. all relus dead) leaves the median
// heuristic undefined; the estimate is then 0 with zero gradient under any
// bandwidth, so a unit ladder stands in.
Var branch_mmd(Var s, Var t, const KernelSpec& spec, EstimatorKind kind) {
  KernelSpec k = spec;
  if (spec.mode == BandwidthMode::median_heuristic) {
    try {
      k = resolve_kernel(spec, s.value(), t.value());
    } catch (const DegenerateDataError&) {
      k = KernelSpec::fixed(std::vector<double>(spec.ladder_size, 1.0));
    }
  }
  return mmd(s, t, k, kind).value;
}

}  // namespace

Var mmd_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches,
             const Tensor& target, const KernelSpec& spec, EstimatorKind kind) {
  if (batches.empty()) throw std::invalid_argument("mmd_loss needs at least one source batch");
  Var ft = model.common(g, g.constant(target));
  Var total = g.constant(Tensor::scalar(0.0));
  for (const SourceBatch& b : batches) {
    Var fs = model.forward_source(g, b.branch, g.constant(b.features)).features;
    Var ht = model.branch(g, b.branch, ft).features;
    total = add(total, branch_mmd(fs, ht, spec, kind));
  }
  return mul_scalar(total, 1.0 / static_cast<double>(batches.size()));
}

Var disc_from_probs(Graph& g, std::span<const Var> probs, DiscReduction reduction) {
  const std::size_t n = probs.size();
  if (n < 2) return g.constant(Tensor::scalar(0.0));
  Var total = g.constant(Tensor::scalar(0.0));
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t i = j + 1; i < n; ++i) {
      Var pair = mean(abs(sub(probs[i], probs[j])));
      if (reduction == DiscReduction::sum_over_classes)
        pair = mul_scalar(pair, static_cast<double>(probs[i].value().cols()));
      total = add(total, pair);
    }
  return mul_scalar(total, 2.0 / (static_cast<double>(n) * static_cast<double>(n - 1)));
}

Var disc_loss(MfsanModel& model, Graph& g, const Tensor& target, DiscReduction reduction) {
  auto outs = model.forward_target(g, g.constant(target));
  std::vector<Var> probs;
  for (const auto& o : outs) probs.push_back(o.probs);
  return disc_from_probs(g, probs, reduction);
}

LossBreakdown total_loss(MfsanModel& model, Graph& g, std::span<const SourceBatch> batches,
                         const Tensor& target, const KernelSpec& spec, EstimatorKind kind,
                         const LossWeights& weights) {
  if (weights.lambda < 0.0 || weights.gamma < 0.0)
    throw std::invalid_argument("loss weights must be nonnegative");
  if (batches.empty()) throw std::invalid_argument("total_loss needs at least one source batch");
  std::vector<BranchOutput> target_out = model.forward_target(g, g.constant(target));
  LossBreakdown out;
  out.effective_lambda = weights.lambda;
  out.effective_gamma = weights.gamma;
  out.cls = g.constant(Tensor::scalar(0.0));
  Var mmd_sum = g.constant(Tensor::scalar(0.0));
  for (const SourceBatch& b : batches) {
    check_batch(b, model);
    BranchOutput s = model.forward_source(g, b.branch, g.constant(b.features));
    out.cls = add(out.cls, cross_entropy(s.logits, b.labels));
    mmd_sum = add(mmd_sum, branch_mmd(s.features, target_out[b.branch].features, spec, kind));
  }
  out.mmd = mul_scalar(mmd_sum, 1.0 / static_cast<double>(batches.size()));
  std::vector<Var> probs;
  for (const auto& o : target_out) probs.push_back(o.probs);
  out.disc = disc_from_probs(g, probs, weights.disc_reduction);
  out.total = add(add(out.cls, mul_scalar(out.mmd, weights.lambda)),
                  mul_scalar(out.disc, weights.gamma));
  return out;
}

// ---- prediction ----------------------------------------------------------------

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  std::vector<std::size_t> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.cols(); ++k)
      if (probs.at(i, k) > probs.at(i, best)) best = k;
    out[i] = best;
  }
  return out;
}

Prediction predict(MfsanModel& model, const Tensor& x) {
  Graph g;
  auto outs = model.forward_target(g, g.constant(x));
  Prediction p;
  p.avg_probs = Tensor(Shape{x.rows(), model.num_classes()});
  for (const auto& o : outs) {
    const Tensor& pr = o.probs.value();
    for (std::size_t i = 0; i < pr.size(); ++i) p.avg_probs[i] += pr[i];
    p.per_branch.push_back(argmax_rows(pr));
    p.branch_probs.push_back(pr);
  }
  const double inv = 1.0 / static_cast<double>(outs.size());
  for (double& v : p.avg_probs.values()) v *= inv;
  p.labels = argmax_rows(p.avg_probs);
  return p;
}

std::vector<Tensor> extract_features(MfsanModel& model, const Tensor& x) {
  Graph g;
  auto outs = model.forward_target(g, g.constant(x));
  std::vector<Tensor> feats;
  for (const auto& o : outs) feats.push_back(o.features.value());
  return feats;
}

}  // namespace mfsan
