#include "mfsan/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace mfsan {

DivergenceError::DivergenceError(std::size_t iteration, const std::string& component)
    : std::runtime_error("training diverged at iteration " + std::to_string(iteration) +
                         ": non-finite " + component),
      iteration_(iteration),
      component_(component) {}

std::string to_string(SourceMode m) { return m == SourceMode::round_robin ? "round_robin" : "all_sources"; }

SourceMode source_mode_from_string(const std::string& s) {
  if (s == "round_robin") return SourceMode::round_robin;
  if (s == "all_sources") return SourceMode::all_sources;
  throw std::invalid_argument("unknown source mode '" + s + "' (expected round_robin or all_sources)");
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> p;
  if (batch_size < 2) p.push_back("batch_size must be >= 2");
  if (!(eta0 > 0.0)) p.push_back("eta0 must be positive");
  if (!(alpha > 0.0)) p.push_back("alpha must be positive");
  if (!(beta > 0.0)) p.push_back("beta must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) p.push_back("momentum must be in [0, 1)");
  if (!(theta > 0.0)) p.push_back("theta must be positive");
  if (!(lambda_base >= 0.0)) p.push_back("lambda_base must be nonnegative");
  if (!(gamma_base >= 0.0)) p.push_back("gamma_base must be nonnegative");
  if (!(lr_multiplier_scratch > 0.0)) p.push_back("lr_multiplier_scratch must be positive");
  if (eval_every == 0) p.push_back("eval_every must be positive");
  try {
    kernel.validate();
  } catch (const std::invalid_argument& e) {
    p.push_back(e.what());
  }
  return p;
}

void TrainConfig::validate() const {
  auto p = violations();
  if (!p.empty()) throw ValidationError(std::move(p));
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json k;
  k["mode"] = to_string(c.kernel.mode);
  if (c.kernel.mode == BandwidthMode::median_heuristic) {
    k["ladder_size"] = c.kernel.ladder_size;
    k["step_multiplier"] = c.kernel.step_multiplier;
  } else {
    k["bandwidths"] = c.kernel.bandwidths;
    k["weights"] = c.kernel.weights;
  }
  return {
      {"iterations", c.iterations},
      {"batch_size", c.batch_size},
      {"eta0", c.eta0},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"momentum", c.momentum},
      {"theta", c.theta},
      {"lambda_base", c.lambda_base},
      {"gamma_base", c.gamma_base},
      {"lr_multiplier_scratch", c.lr_multiplier_scratch},
      {"source_mode", to_string(c.source_mode)},
      {"estimator", to_string(c.estimator)},
      {"kernel", k},
      {"disc_reduction", to_string(c.disc_reduction)},
      {"sampling", to_string(c.sampling)},
      {"shared_branch", c.shared_branch},
      {"eval_every", c.eval_every},
      {"seed", c.seed},
      {"lr_formula", "eta0/(1+alpha*p)^beta"},
      {"ramp_formula", kRampFormula},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"iterations", "batch_size", "eta0", "alpha", "beta", "momentum", "theta",
                         "lambda_base", "gamma_base", "lr_multiplier_scratch", "source_mode",
                         "estimator", "kernel", "disc_reduction", "sampling", "shared_branch",
                         "eval_every", "seed", "lr_formula", "ramp_formula"},
                     "train");
  TrainConfig c;
  try {
    if (j.contains("iterations")) c.iterations = j["iterations"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("eta0")) c.eta0 = j["eta0"].get<double>();
    if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
    if (j.contains("beta")) c.beta = j["beta"].get<double>();
    if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
    if (j.contains("theta")) c.theta = j["theta"].get<double>();
    if (j.contains("lambda_base")) c.lambda_base = j["lambda_base"].get<double>();
    if (j.contains("gamma_base")) c.gamma_base = j["gamma_base"].get<double>();
    if (j.contains("lr_multiplier_scratch")) c.lr_multiplier_scratch = j["lr_multiplier_scratch"].get<double>();
    if (j.contains("source_mode")) c.source_mode = source_mode_from_string(j["source_mode"].get<std::string>());
    if (j.contains("estimator")) c.estimator = estimator_from_string(j["estimator"].get<std::string>());
    if (j.contains("disc_reduction")) c.disc_reduction = disc_reduction_from_string(j["disc_reduction"].get<std::string>());
    if (j.contains("sampling")) c.sampling = sampling_mode_from_string(j["sampling"].get<std::string>());
    if (j.contains("shared_branch")) c.shared_branch = j["shared_branch"].get<bool>();
    if (j.contains("eval_every")) c.eval_every = j["eval_every"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("kernel")) {
      const auto& k = j["kernel"];
      require_known_keys(k, {"mode", "ladder_size", "step_multiplier", "bandwidths", "weights"}, "kernel");
      const std::string mode = k.value("mode", std::string("median_heuristic"));
      if (mode == "median_heuristic") {
        c.kernel = KernelSpec::median(k.value("ladder_size", std::size_t{5}), k.value("step_multiplier", 2.0));
      } else if (mode == "fixed") {
        const auto bw = k.at("bandwidths").get<std::vector<double>>();
        c.kernel = k.contains("weights") ? KernelSpec::fixed(bw, k["weights"].get<std::vector<double>>())
                                         : KernelSpec::fixed(bw);
      } else {
        throw std::invalid_argument("unknown kernel mode '" + mode + "' (expected fixed or median_heuristic)");
      }
    }
    if (j.contains("lr_formula") && j["lr_formula"].get<std::string>() != "eta0/(1+alpha*p)^beta")
      throw std::invalid_argument("unsupported lr_formula '" + j["lr_formula"].get<std::string>() + "'");
    if (j.contains("ramp_formula") && j["ramp_formula"].get<std::string>() != kRampFormula)
      throw std::invalid_argument("unsupported ramp_formula '" + j["ramp_formula"].get<std::string>() +
                                  "' (this build implements " + kRampFormula + ")");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({std::string("train: ") + e.what()});
  } catch (const ValidationError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("train: ") + e.what()});
  }
  return c;
}

double lr_at(double p, double eta0, double alpha, double beta) {
  return eta0 / std::pow(1.0 + alpha * p, beta);
}

double ramp_at(double p, double theta) { return 2.0 / (1.0 + std::exp(-theta * p)) - 1.0; }

ScheduleState schedule_at(std::size_t iteration, const TrainConfig& config) {
  ScheduleState s;
  s.progress = config.iterations == 0
                   ? 0.0
                   : static_cast<double>(iteration) / static_cast<double>(config.iterations);
  s.lr = lr_at(s.progress, config.eta0, config.alpha, config.beta);
  s.ramp = ramp_at(s.progress, config.theta);
  return s;
}

OptimizerState OptimizerState::for_model(MfsanModel& model, double scratch_multiplier) {
  OptimizerState st;
  for (Parameter* p : model.common_parameters()) {
    st.velocities.emplace_back(p->value.shape());
    st.multipliers.push_back(1.0);
  }
  for (Parameter* p : model.branch_parameters()) {
    st.velocities.emplace_back(p->value.shape());
    st.multipliers.push_back(scratch_multiplier);
  }
  return st;
}

void sgd_momentum_update(std::span<Parameter* const> params, OptimizerState& state, double lr,
                         double momentum) {
  if (params.size() != state.velocities.size())
    throw ContractError("optimizer state does not match parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& v = state.velocities[k];
    if (v.shape() != p.value.shape()) throw ContractError("velocity shape mismatch");
    const double step = lr * state.multipliers[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] - step * p.grad[i];
      p.value[i] += v[i];
    }
  }
}

nlohmann::json to_json(const MetricsRecord& r) {
  return {
      {"iteration", r.iteration},
      {"p", r.progress},
      {"lr", r.lr},
      {"lambda_eff", r.effective_lambda},
      {"gamma_eff", r.effective_gamma},
      {"loss_cls", r.losses.cls},
      {"loss_mmd", r.losses.mmd},
      {"loss_disc", r.losses.disc},
      {"loss_total", r.losses.total},
      {"per_classifier_accuracy", r.per_classifier_accuracy},
      {"average_vote_accuracy", r.average_vote_accuracy},
      {"max_pairwise_disagreement", r.max_pairwise_disagreement},
      {"source_accuracy", r.source_accuracy},
  };
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.iteration = j.at("iteration").get<std::size_t>();
  r.progress = j.at("p").get<double>();
  r.lr = j.at("lr").get<double>();
  r.effective_lambda = j.at("lambda_eff").get<double>();
  r.effective_gamma = j.at("gamma_eff").get<double>();
  r.losses = {j.at("loss_cls").get<double>(), j.at("loss_mmd").get<double>(),
              j.at("loss_disc").get<double>(), j.at("loss_total").get<double>()};
  r.per_classifier_accuracy = j.at("per_classifier_accuracy").get<std::vector<double>>();
  r.average_vote_accuracy = j.at("average_vote_accuracy").get<double>();
  r.max_pairwise_disagreement = j.at("max_pairwise_disagreement").get<double>();
  r.source_accuracy = j.value("source_accuracy", 0.0);
  return r;
}

// ---- Trainer -------------------------------------------------------------------

namespace {

std::vector<BatchSampler> make_source_samplers(const TrainingData& data, const TrainConfig& c) {
  std::vector<BatchSampler> out;
  for (std::size_t j = 0; j < data.sources.size(); ++j)
    out.emplace_back(data.sources[j].features.rows(), c.batch_size, c.sampling,
                     derive_seed(c.seed, 100 + j));
  return out;
}

const TrainConfig& validated(const TrainConfig& c) {
  c.validate();
  return c;
}

}  // namespace

Trainer::Trainer(MfsanModel& model, const TrainingData& data, TrainConfig config)
    : model_(model),
      data_(data),
      config_(validated(config)),
      optimizer_(OptimizerState::for_model(model, config_.lr_multiplier_scratch)),
      source_samplers_(make_source_samplers(data, config_)),
      target_sampler_(data.target.features.rows(), config_.batch_size, config_.sampling,
                      derive_seed(config_.seed, 99)) {
  data_.validate();
  const Architecture& a = model_.architecture();
  std::vector<std::string> problems;
  if (a.input_dim != data_.feature_dim) problems.push_back("model input_dim does not match task feature_dim");
  if (a.num_classes != data_.num_classes) problems.push_back("model num_classes does not match task");
  if (config_.shared_branch) {
    if (model_.num_sources() != 1) problems.push_back("shared_branch training needs a single-branch model");
  } else if (model_.num_sources() != data_.num_sources()) {
    problems.push_back("model has " + std::to_string(model_.num_sources()) + " branches for " +
                       std::to_string(data_.num_sources()) + " sources");
  }
  if (!problems.empty()) throw ValidationError(problems);
}

std::vector<SourceBatch> Trainer::draw_source_batches() {
  auto route = [&](std::size_t j) { return config_.shared_branch ? std::size_t{0} : j; };
  std::vector<SourceBatch> batches;
  if (config_.source_mode == SourceMode::round_robin) {
    const std::size_t j = iteration_ % data_.num_sources();
    LabeledBatch b = source_samplers_[j].next(data_.sources[j]);
    batches.push_back({route(j), std::move(b.features), std::move(b.labels)});
  } else {
    for (std::size_t j = 0; j < data_.num_sources(); ++j) {
      LabeledBatch b = source_samplers_[j].next(data_.sources[j]);
      batches.push_back({route(j), std::move(b.features), std::move(b.labels)});
    }
  }
  return batches;
}

StepResult Trainer::step() {
  StepResult r;
  r.iteration = iteration_;
  r.schedule = schedule_at(iteration_, config_);
  r.effective_lambda = config_.lambda_base * r.schedule.ramp;
  r.effective_gamma = config_.gamma_base * r.schedule.ramp;

  std::vector<SourceBatch> batches = draw_source_batches();
  Tensor target = target_sampler_.next(data_.target);

  model_.zero_grad();
  Graph g;
  LossBreakdown loss;
  try {
    loss = total_loss(model_, g, batches, target, config_.kernel, config_.estimator,
                      {r.effective_lambda, r.effective_gamma, config_.disc_reduction});
  } catch (const DomainError&) {
    // Non-finite activations reached a kernel bandwidth or a log.
    throw DivergenceError(iteration_, "features");
  }
  r.losses = {loss.cls.item(), loss.mmd.item(), loss.disc.item(), loss.total.item()};
  if (!std::isfinite(r.losses.cls)) throw DivergenceError(iteration_, "classification loss");
  if (!std::isfinite(r.losses.mmd)) throw DivergenceError(iteration_, "mmd loss");
  if (!std::isfinite(r.losses.disc)) throw DivergenceError(iteration_, "disc loss");
  if (!std::isfinite(r.losses.total)) throw DivergenceError(iteration_, "total loss");
  g.backward(loss.total);

  auto params = model_.parameters();
  for (std::size_t k = 0; k < params.size(); ++k)
    if (!params[k]->grad.all_finite())
      throw DivergenceError(iteration_, "gradient of parameter " + std::to_string(k));
  sgd_momentum_update(params, optimizer_, r.schedule.lr, config_.momentum);
  ++iteration_;
  return r;
}

namespace {

void write_trainer_state(BinaryWriter& w, std::size_t iteration, const OptimizerState& opt,
                         const std::vector<BatchSampler>& sources, const BatchSampler& target) {
  w.u64(iteration);
  w.u64(opt.velocities.size());
  for (const Tensor& v : opt.velocities) w.tensor(v);
  w.u64(sources.size());
  for (const BatchSampler& s : sources) s.write(w);
  target.write(w);
}

void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("error writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::istringstream read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::istringstream(buf.str());
}

void expect_header(BinaryReader& r) {
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  std::string got;
  try {
    got = r.raw(magic.size());
  } catch (const CheckpointError&) {
    throw CheckpointError("not a checkpoint (missing header)");
  }
  if (got != magic) {
    if (got.rfind("MFSAN-CKPT-", 0) == 0)
      throw CheckpointError("unsupported checkpoint version '" + got.substr(0, got.size() - 1) + "'");
    throw CheckpointError("not a checkpoint (bad header)");
  }
}

void expect_trailer(BinaryReader& r) {
  std::string end;
  try {
    end = r.raw(4);
  } catch (const CheckpointError&) {
    throw CheckpointError("checkpoint truncated");
  }
  if (end != "END\n") throw CheckpointError("checkpoint trailer missing");
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::ostringstream os(std::ios::binary);
  BinaryWriter w(os);
  w.raw(std::string(kCheckpointMagic) + "\n");
  w.u8(1);
  model_.write(w);
  write_trainer_state(w, iteration_, optimizer_, source_samplers_, target_sampler_);
  w.raw("END\n");
  write_atomically(path, os.str());
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  auto is = read_all(path);
  BinaryReader r(is);
  expect_header(r);
  if (r.u8() != 1) throw CheckpointError("checkpoint carries no optimizer state");
  MfsanModel model = MfsanModel::read(r);
  if (!(model.architecture() == model_.architecture()))
    throw CheckpointError("checkpoint architecture differs from the trainer's model");
  const std::size_t iteration = static_cast<std::size_t>(r.u64());
  OptimizerState opt = OptimizerState::for_model(model, config_.lr_multiplier_scratch);
  if (r.u64() != opt.velocities.size()) throw CheckpointError("checkpoint velocity count mismatch");
  for (Tensor& v : opt.velocities) {
    Tensor t = r.tensor();
    if (t.shape() != v.shape()) throw CheckpointError("checkpoint velocity shape mismatch");
    v = std::move(t);
  }
  if (r.u64() != source_samplers_.size()) throw CheckpointError("checkpoint sampler count mismatch");
  std::vector<BatchSampler> sources = source_samplers_;
  for (BatchSampler& s : sources) s.read(r);
  BatchSampler target = target_sampler_;
  target.read(r);
  expect_trailer(r);

  model_ = std::move(model);
  optimizer_ = std::move(opt);
  source_samplers_ = std::move(sources);
  target_sampler_ = std::move(target);
  iteration_ = iteration;
}

void save_model(const MfsanModel& model, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  BinaryWriter w(os);
  w.raw(std::string(kCheckpointMagic) + "\n");
  w.u8(0);
  model.write(w);
  w.raw("END\n");
  write_atomically(path, os.str());
}

MfsanModel load_model(const std::filesystem::path& path) {
  auto is = read_all(path);
  BinaryReader r(is);
  expect_header(r);
  const std::uint8_t kind = r.u8();
  if (kind > 1) throw CheckpointError("unknown checkpoint kind");
  MfsanModel model = MfsanModel::read(r);
  if (kind == 0) expect_trailer(r);
  return model;
}

// ---- training loop --------------------------------------------------------------

TrainingLog run_trainer(Trainer& trainer, const Evaluator& evaluate) {
  TrainingLog log;
  const std::size_t every = trainer.config().eval_every;
  try {
    while (!trainer.done()) {
      StepResult r = trainer.step();
      if (evaluate && (r.iteration + 1) % every == 0) {
        // Evaluation is reported against the completed-step count.
        StepResult at = r;
        at.iteration = r.iteration + 1;
        log.records.push_back(evaluate(trainer.model(), at));
      }
    }
  } catch (const DivergenceError& e) {
    log.divergence = e.what();
  }
  return log;
}

TrainingLog train(MfsanModel& model, const TrainingData& data, const TrainConfig& config,
                  const Evaluator& evaluate) {
  Trainer trainer(model, data, config);
  return run_trainer(trainer, evaluate);
}

}  // namespace mfsan
