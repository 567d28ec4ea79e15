#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mfsan/trainer.hpp"
#include "test_util.hpp"

using namespace mfsan;
namespace fs = std::filesystem;

namespace {

MultiSourceTask small_task() {
  SyntheticSpec s;
  s.num_classes = 3;
  s.feature_dim = 4;
  s.samples_per_domain = 60;
  return generate_synthetic(s);
}

Architecture small_arch(const MultiSourceTask& t) {
  Architecture a;
  a.input_dim = t.feature_dim();
  a.common_hidden = {8};
  a.branch_hidden = {8, 4};
  a.num_classes = t.num_classes();
  a.num_sources = t.num_sources();
  return a;
}

TrainConfig small_config(std::size_t iterations) {
  TrainConfig c;
  c.iterations = iterations;
  c.batch_size = 8;
  c.eval_every = 50;
  c.seed = 3;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mfsan_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule values") {
  CHECK(lr_at(0.0) == 0.01);
  CHECK(std::fabs(lr_at(1.0) - 0.0016556) < 1e-7);
  CHECK(std::fabs(lr_at(0.5) - 0.0026084) < 1e-7);
  CHECK(std::fabs(lr_at(0.3) - 0.01 / std::pow(4.0, 0.75)) < 1e-15);
}

TEST_CASE("ramp schedule values") {
  CHECK(ramp_at(0.0) == 0.0);
  CHECK(std::fabs(ramp_at(1.0) - 0.9999092) < 1e-7);
  CHECK(std::fabs(ramp_at(0.1) - 0.4621172) < 1e-7);
  CHECK(std::string(kRampFormula) == "2/(1+exp(-theta*p))-1");
}

TEST_CASE("schedules are monotone on [0, 1]") {
  double lr_prev = lr_at(0.0), ramp_prev = ramp_at(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double p = i / 1000.0;
    CHECK(lr_at(p) < lr_prev);
    CHECK(ramp_at(p) > ramp_prev);
    CHECK(ramp_at(p) < 1.0);
    lr_prev = lr_at(p);
    ramp_prev = ramp_at(p);
  }
  TrainConfig c;
  c.iterations = 200;
  const ScheduleState s = schedule_at(100, c);
  CHECK(s.progress == 0.5);
  CHECK(s.lr == lr_at(0.5));
  CHECK(s.ramp == ramp_at(0.5));
}

TEST_CASE("momentum update by hand") {
  Parameter p(Tensor::vector({1.0, -2.0}));
  std::vector<Parameter*> ps{&p};
  OptimizerState st;
  st.velocities.emplace_back(Shape{2});
  st.multipliers.push_back(10.0);

  SUBCASE("zero learning rate leaves parameters alone") {
    p.grad = Tensor::vector({3.0, 4.0});
    sgd_momentum_update(ps, st, 0.0, 0.9);
    CHECK(p.value == Tensor::vector({1.0, -2.0}));
  }
  SUBCASE("zero momentum is plain gradient descent") {
    p.grad = Tensor::vector({3.0, 4.0});
    sgd_momentum_update(ps, st, 0.01, 0.0);
    CHECK(std::fabs(p.value[0] - (1.0 - 0.01 * 10.0 * 3.0)) < 1e-15);
    CHECK(std::fabs(p.value[1] - (-2.0 - 0.01 * 10.0 * 4.0)) < 1e-15);
  }
  SUBCASE("two steps follow the recursion") {
    const double mu = 0.9, lr1 = 0.01, lr2 = 0.008;
    p.grad = Tensor::vector({3.0, 4.0});
    sgd_momentum_update(ps, st, lr1, mu);
    p.grad = Tensor::vector({-1.0, 0.5});
    sgd_momentum_update(ps, st, lr2, mu);
    const double v1a = -lr1 * 10 * 3.0, v1b = -lr1 * 10 * 4.0;
    const double v2a = mu * v1a - lr2 * 10 * -1.0, v2b = mu * v1b - lr2 * 10 * 0.5;
    CHECK(std::fabs(p.value[0] - (1.0 + v1a + v2a)) < 1e-12);
    CHECK(std::fabs(p.value[1] - (-2.0 + v1b + v2b)) < 1e-12);
    CHECK(std::fabs(st.velocities[0][0] - v2a) < 1e-12);
  }
}

TEST_CASE("branch parameters get the scratch multiplier") {
  const MultiSourceTask task = small_task();
  MfsanModel model(small_arch(task), 1);
  const OptimizerState st = OptimizerState::for_model(model, 10.0);
  const std::size_t nc = model.common_parameters().size();
  for (std::size_t k = 0; k < st.multipliers.size(); ++k)
    CHECK(st.multipliers[k] == (k < nc ? 1.0 : 10.0));
}

TEST_CASE("zero weights remove the alignment terms from the gradient") {
  const MultiSourceTask task = small_task();
  MfsanModel model(small_arch(task), 2);
  const auto& d = task.training();
  std::vector<SourceBatch> batches{{0, d.sources[0].features.row_slice(0, 8),
                                    std::vector<std::size_t>(d.sources[0].labels.begin(), d.sources[0].labels.begin() + 8)},
                                   {1, d.sources[1].features.row_slice(0, 8),
                                    std::vector<std::size_t>(d.sources[1].labels.begin(), d.sources[1].labels.begin() + 8)}};
  const Tensor target = d.target.features.row_slice(0, 8);
  model.zero_grad();
  {
    Graph g;
    g.backward(total_loss(model, g, batches, target, KernelSpec::median(), EstimatorKind::biased_v,
                          {0.0, 0.0, DiscReduction::mean_over_classes}).total);
  }
  std::vector<Tensor> with_zero;
  for (Parameter* p : model.parameters()) with_zero.push_back(p->grad);
  model.zero_grad();
  {
    Graph g;
    g.backward(cls_loss(model, g, batches));
  }
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) CHECK(params[k]->grad == with_zero[k]);
}

TEST_CASE("zero iterations is a no-op") {
  const MultiSourceTask task = small_task();
  MfsanModel model(small_arch(task), 4);
  const MfsanModel before = model;
  TrainingLog log = train(model, task.training(), small_config(0),
                          [](MfsanModel&, const StepResult&) { return MetricsRecord{}; });
  CHECK(log.records.empty());
  CHECK_FALSE(log.divergence);
  CHECK(parameters_equal(model, before));
}

TEST_CASE("training is deterministic") {
  const MultiSourceTask task = small_task();
  MfsanModel a(small_arch(task), 5), b(small_arch(task), 5);
  train(a, task.training(), small_config(60));
  train(b, task.training(), small_config(60));
  CHECK(parameters_equal(a, b));
  MfsanModel c(small_arch(task), 5);
  TrainConfig other = small_config(60);
  other.seed = 4;
  train(c, task.training(), other);
  CHECK_FALSE(parameters_equal(a, c));
}

TEST_CASE("evaluation cadence counts completed steps") {
  const MultiSourceTask task = small_task();
  MfsanModel model(small_arch(task), 6);
  std::vector<std::size_t> seen;
  TrainConfig c = small_config(120);
  train(model, task.training(), c, [&](MfsanModel&, const StepResult& r) {
    seen.push_back(r.iteration);
    MetricsRecord m;
    m.iteration = r.iteration;
    return m;
  });
  CHECK(seen == std::vector<std::size_t>{50, 100});
}

TEST_CASE("resuming from a checkpoint is bit-exact") {
  const MultiSourceTask task = small_task();
  const fs::path dir = fresh_dir("resume");
  const TrainConfig cfg = small_config(200);

  MfsanModel straight(small_arch(task), 7);
  train(straight, task.training(), cfg);

  MfsanModel first(small_arch(task), 7);
  {
    Trainer t(first, task.training(), cfg);
    for (int i = 0; i < 100; ++i) t.step();
    t.save_checkpoint(dir / "half.ckpt");
  }
  MfsanModel resumed(small_arch(task), 99);  // different init; overwritten by the load
  Trainer t(resumed, task.training(), cfg);
  t.load_checkpoint(dir / "half.ckpt");
  CHECK(t.iteration() == 100);
  while (!t.done()) t.step();
  CHECK(parameters_equal(resumed, straight));
}

TEST_CASE("bad checkpoints are rejected without touching the model") {
  const MultiSourceTask task = small_task();
  const fs::path dir = fresh_dir("corrupt");
  const TrainConfig cfg = small_config(20);
  MfsanModel model(small_arch(task), 8);
  Trainer t(model, task.training(), cfg);
  for (int i = 0; i < 5; ++i) t.step();
  t.save_checkpoint(dir / "ok.ckpt");

  std::string bytes;
  {
    std::ifstream in(dir / "ok.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir / "header.ckpt", std::ios::binary) << bad;
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    std::string v2 = bytes;
    v2[11] = '2';
    std::ofstream(dir / "version.ckpt", std::ios::binary) << v2;
  }
  MfsanModel other(small_arch(task), 9);
  const MfsanModel before = other;
  Trainer u(other, task.training(), cfg);
  CHECK_THROWS_AS(u.load_checkpoint(dir / "header.ckpt"), CheckpointError);
  CHECK_THROWS_AS(u.load_checkpoint(dir / "short.ckpt"), CheckpointError);
  try {
    u.load_checkpoint(dir / "version.ckpt");
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  CHECK_THROWS_AS(u.load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  CHECK(parameters_equal(other, before));
  CHECK(u.iteration() == 0);

  save_model(model, dir / "model.bin");
  CHECK(parameters_equal(load_model(dir / "model.bin"), model));
  CHECK_FALSE(fs::exists(dir / "model.bin.tmp"));
}

TEST_CASE("divergence is reported, not thrown") {
  const MultiSourceTask task = small_task();
  MfsanModel model(small_arch(task), 10);
  TrainConfig cfg = small_config(200);
  cfg.eta0 = 1e6;
  TrainingLog log = train(model, task.training(), cfg);
  REQUIRE(log.divergence);
  CHECK(log.divergence->find("iteration") != std::string::npos);
}

TEST_CASE("config validation lists problems") {
  TrainConfig c;
  c.batch_size = 1;
  c.momentum = 1.0;
  c.lambda_base = -1.0;
  CHECK(c.violations().size() == 3);
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(to_json(TrainConfig{})["ramp_formula"] == kRampFormula);
}

TEST_CASE("metrics records round trip through JSON") {
  MetricsRecord r;
  r.iteration = 300;
  r.progress = 0.1;
  r.lr = lr_at(0.1);
  r.effective_lambda = 0.25;
  r.losses = {1.5, 0.25, 0.125, 1.6875};
  r.per_classifier_accuracy = {0.9, 0.8};
  r.average_vote_accuracy = 0.85;
  r.max_pairwise_disagreement = 0.1;
  r.source_accuracy = 0.99;
  const MetricsRecord back = metrics_from_json(nlohmann::json::parse(to_json(r).dump()));
  CHECK(back.iteration == 300);
  CHECK(back.lr == r.lr);
  CHECK(back.losses.disc == 0.125);
  CHECK(back.per_classifier_accuracy == r.per_classifier_accuracy);
  CHECK(back.source_accuracy == 0.99);
}
