// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfsan/harness.hpp"
#include "test_util.hpp"

using namespace mfsan;
using mfsan::testing::mmd_biased_oracle;
using mfsan::testing::mmd_unbiased_oracle;
using mfsan::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::vector<std::size_t> random_labels(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = rng.index(k);
  return out;
}

Outcome mmd_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng.index(7), m = 2 + rng.index(7), d = 1 + rng.index(4);
    const Tensor x = random_matrix(rng, n, d), y = random_matrix(rng, m, d);
    std::vector<double> bw;
    for (std::size_t b = 0; b < 1 + rng.index(4); ++b) bw.push_back(0.1 + 5.0 * rng.uniform());
    const KernelSpec spec = KernelSpec::fixed(bw);
    Graph g;
    const double vb = mmd_biased(g.constant(x), g.constant(y), spec).value.item();
    const double vu = mmd_unbiased(g.constant(x), g.constant(y), spec).value.item();
    worst = std::max({worst, std::fabs(vb - mmd_biased_oracle(x, y, spec)),
                      std::fabs(vu - mmd_unbiased_oracle(x, y, spec))});
  }
  std::ostringstream os;
  os << "max abs diff " << worst << " over 50 instances";
  return {worst < 1e-10, os.str()};
}

Architecture grad_arch(std::size_t sources, std::size_t classes) {
  Architecture a;
  a.input_dim = 3;
  a.common_hidden = {6};
  a.branch_hidden = {5, 3};
  a.num_classes = classes;
  a.num_sources = sources;
  return a;
}

Outcome gradient_suite() {
  double worst = 0.0;
  std::string worst_case;
  const KernelSpec spec = KernelSpec::fixed({0.5, 2.0, 8.0});
  for (std::size_t n_src : {1u, 2u, 3u})
    for (std::size_t k : {2u, 4u}) {
      Rng rng(500 + 10 * n_src + k);
      MfsanModel model(grad_arch(n_src, k), 31 + n_src * k);
      // Zero-initialised biases put rows whose common features are all zero
      // exactly on the relu kink; move the point off it.
      for (Parameter* p : model.parameters())
        if (p->value.shape().size() == 1)
          for (double& v : p->value.values()) v = 0.1 * rng.normal();
      std::vector<SourceBatch> batches;
      for (std::size_t j = 0; j < n_src; ++j)
        batches.push_back({j, random_matrix(rng, 5, 3), random_labels(rng, 5, k)});
      const Tensor target = random_matrix(rng, 6, 3);
      auto params = model.parameters();
      const std::vector<std::pair<std::string, ScalarFunction>> losses{
          {"cls", [&](Graph& g) { return cls_loss(model, g, batches); }},
          {"mmd",
           [&](Graph& g) { return mmd_loss(model, g, batches, target, spec, EstimatorKind::biased_v); }},
          {"mmd_u",
           [&](Graph& g) { return mmd_loss(model, g, batches, target, spec, EstimatorKind::unbiased_u); }},
          {"disc", [&](Graph& g) { return disc_loss(model, g, target); }},
          {"total", [&](Graph& g) {
             return total_loss(model, g, batches, target, spec, EstimatorKind::biased_v,
                               {0.7, 0.3, DiscReduction::mean_over_classes})
                 .total;
           }}};
      for (const auto& [name, f] : losses) {
        if (name == "disc" && n_src == 1) continue;  // identically zero
        const auto report = check_gradients(f, params, 1e-5, 1e-4);
        if (report.max_rel_error() >= worst) {
          worst = report.max_rel_error();
          worst_case = name + " N=" + std::to_string(n_src) + " K=" + std::to_string(k);
          if (std::getenv("MFSAN_ACCEPT_VERBOSE")) std::cerr << worst_case << "\n" << report.describe() << "\n";
        }
      }
    }
  std::ostringstream os;
  os << "max rel error " << worst << " (" << worst_case << ")";
  return {worst < 1e-4, os.str()};
}

Outcome identities() {
  Rng rng(77);
  double mmd_self = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_matrix(rng, 2 + rng.index(9), 1 + rng.index(4));
    Graph g;
    mmd_self = std::max(mmd_self, std::fabs(mmd_biased(g.constant(x), g.constant(x),
                                                       KernelSpec::median(5, 2.0)).value.item()));
  }

  Architecture a = grad_arch(3, 4);
  MfsanModel model(a, 5);
  for (std::size_t j = 1; j < model.num_sources(); ++j) model.branches()[j] = model.branches()[0];
  double disc = 0.0;
  {
    Graph g;
    disc = disc_loss(model, g, random_matrix(rng, 9, 3)).item();
  }

  double cls_err = 0.0;
  for (std::size_t n_src : {1u, 2u, 3u})
    for (std::size_t k : {2u, 4u, 7u}) {
      MfsanModel m(grad_arch(n_src, k), 6);
      for (Branch& b : m.branches()) {
        for (double& v : b.classifier.weight.value.values()) v = 0.0;
        for (double& v : b.classifier.bias.value.values()) v = 0.0;
      }
      std::vector<SourceBatch> batches;
      for (std::size_t j = 0; j < n_src; ++j)
        batches.push_back({j, random_matrix(rng, 6, 3), random_labels(rng, 6, k)});
      Graph g;
      const double v = cls_loss(m, g, batches).item();
      cls_err = std::max(cls_err, std::fabs(v - static_cast<double>(n_src) * std::log(static_cast<double>(k))));
    }
  std::ostringstream os;
  os << "mmd(X,X) " << mmd_self << ", disc(identical) " << disc << ", |cls - N ln K| " << cls_err;
  return {mmd_self < 1e-12 && std::fabs(disc) < 1e-12 && cls_err < 1e-12, os.str()};
}

Outcome unbiasedness() {
  Rng rng(4242);
  const KernelSpec spec = KernelSpec::fixed({1.0, 2.0, 4.0, 8.0, 16.0});
  const int draws = 200;
  double total = 0.0, total_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    Graph g;
    const double v = mmd_unbiased(g.constant(random_matrix(rng, 32, 2)),
                                  g.constant(random_matrix(rng, 32, 2)), spec).value.item();
    total += v;
    total_sq += v * v;
  }
  const double mean = total / draws;
  const double se = std::sqrt((total_sq - draws * mean * mean) / (draws - 1)) / std::sqrt(double(draws));
  std::ostringstream os;
  os << "mean " << mean << ", standard error " << se << ", |mean|/se " << std::fabs(mean) / se;
  return {std::fabs(mean) <= 3.0 * se, os.str()};
}

Outcome schedules() {
  bool ok = lr_at(0.0) == 0.01 && ramp_at(0.0) == 0.0;
  double prev_lr = lr_at(0.0), prev_ramp = ramp_at(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double p = i / 1000.0;
    ok = ok && lr_at(p) < prev_lr && ramp_at(p) > prev_ramp;
    prev_lr = lr_at(p);
    prev_ramp = ramp_at(p);
  }
  ok = ok && std::fabs(ramp_at(1.0) - 0.9999092) < 1e-7;
  std::ostringstream os;
  os.precision(10);
  os << "lr(0)=" << lr_at(0.0) << " lr(1)=" << lr_at(1.0) << " ramp(0)=" << ramp_at(0.0)
     << " ramp(1)=" << ramp_at(1.0);
  return {ok, os.str()};
}

ExperimentSpec default_experiment() {
  ExperimentSpec spec;
  spec.seeds = {0, 1, 2, 3, 4};
  spec.train.eval_every = spec.train.iterations;  // final evaluation only
  return spec;
}

// Shared by criteria 6 and 7 so mfsan is trained once.
std::map<Method, MethodResult>& method_results() {
  static std::map<Method, MethodResult> cache;
  return cache;
}

const MethodResult& result_for(Method m) {
  auto& cache = method_results();
  auto it = cache.find(m);
  if (it != cache.end()) return it->second;
  ExperimentSpec spec = default_experiment();
  spec.method = m;
  static const MultiSourceTask task = load_experiment_task(default_experiment());
  return cache.emplace(m, run_method(spec, task)).first->second;
}

double seed_accuracy(const MethodResult& r, std::size_t i) {
  const auto& run = r.runs.at(i);
  return run.final_metrics ? run.final_metrics->average_vote_accuracy : 0.0;
}

Outcome method_ordering() {
  const MethodResult& none = result_for(Method::no_adapt);
  const MethodResult& combine = result_for(Method::source_combine);
  const MethodResult& full = result_for(Method::mfsan);
  std::size_t ordered = 0;
  std::ostringstream os;
  os << "per seed (mfsan/source_combine/no_adapt):";
  for (std::size_t i = 0; i < full.runs.size(); ++i) {
    const double a = seed_accuracy(full, i), b = seed_accuracy(combine, i), c = seed_accuracy(none, i);
    if (a >= b && b >= c) ++ordered;
    os << ' ' << a << '/' << b << '/' << c;
  }
  const double mf = full.average_vote_accuracy.mean, sc = combine.average_vote_accuracy.mean,
               na = none.average_vote_accuracy.mean;
  os << "; means " << mf << '/' << sc << '/' << na << "; full ordering in " << ordered << "/5";
  const bool ok = mf >= sc && mf >= na && mf - na >= 0.05 && ordered >= 4;
  return {ok, os.str()};
}

Outcome table4_gap() {
  const MethodResult& with_disc = result_for(Method::mfsan);
  const MethodResult& without = result_for(Method::mfsan_mmd);
  const Table4 t = table4_report({without, with_disc});
  std::ostringstream os;
  os << "mean max classifier gap: mfsan_mmd " << t.mean_gap[0] << ", mfsan " << t.mean_gap[1];
  return {t.mean_gap[1] <= t.mean_gap[0], os.str()};
}

Outcome determinism_and_resume() {
  ExperimentSpec spec;
  const MultiSourceTask task = load_experiment_task(spec);
  Architecture arch = spec.architecture;
  arch.input_dim = task.feature_dim();
  arch.num_classes = task.num_classes();
  arch.num_sources = task.num_sources();
  TrainConfig cfg = spec.train;
  cfg.iterations = 400;
  cfg.seed = 11;

  MfsanModel a(arch, 3), b(arch, 3);
  train(a, task.training(), cfg);
  train(b, task.training(), cfg);
  const bool same_seed = parameters_equal(a, b);

  const fs::path dir = fs::temp_directory_path() / "mfsan_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  MfsanModel straight(arch, 3);
  std::vector<double> straight_losses;
  {
    Trainer t(straight, task.training(), cfg);
    while (!t.done()) {
      const StepResult s = t.step();
      if (s.iteration >= 200) straight_losses.push_back(s.losses.total);
    }
  }
  MfsanModel first(arch, 3);
  {
    Trainer t(first, task.training(), cfg);
    for (int i = 0; i < 200; ++i) t.step();
    t.save_checkpoint(dir / "mid.ckpt");
  }
  MfsanModel resumed(arch, 99);
  std::vector<double> resumed_losses;
  {
    Trainer t(resumed, task.training(), cfg);
    t.load_checkpoint(dir / "mid.ckpt");
    while (!t.done()) resumed_losses.push_back(t.step().losses.total);
  }
  fs::remove_all(dir);
  const bool resume_ok = parameters_equal(resumed, straight) && resumed_losses == straight_losses;
  std::ostringstream os;
  os << "same seed identical: " << (same_seed ? "yes" : "no")
     << "; resume at 200/400 identical losses and parameters: " << (resume_ok ? "yes" : "no");
  return {same_seed && resume_ok, os.str()};
}

Outcome lambda_sweep() {
  ExperimentSpec spec;
  spec.seeds = {0};
  spec.train.iterations = 300;  // mechanism check only
  spec.train.eval_every = spec.train.iterations;
  const MultiSourceTask task = load_experiment_task(spec);
  const auto points = sweep_lambda(spec, task, kDefaultLambdaGrid);
  const fs::path csv = fs::temp_directory_path() / "mfsan_acceptance_sweep.csv";
  write_sweep_csv(points, csv);
  std::ifstream in(csv);
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  fs::remove(csv);
  std::size_t failures = 0;
  for (const auto& p : points) failures += p.failures;
  std::ostringstream os;
  os << rows << " rows for " << kDefaultLambdaGrid.size() << " values, " << failures << " failed runs";
  return {points.size() == kDefaultLambdaGrid.size() && rows == kDefaultLambdaGrid.size() && failures == 0,
          os.str()};
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0 = none
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  const std::vector<Criterion> criteria{
      {1, "mmd oracle equivalence", 1.0, mmd_oracle},
      {2, "gradient suite", 30.0, gradient_suite},
      {3, "identity cases", 0.0, identities},
      {4, "unbiasedness", 0.0, unbiasedness},
      {5, "schedule values", 0.0, schedules},
      {6, "method ordering", 600.0, method_ordering},
      {7, "classifier gap with vs without disc", 0.0, table4_gap},
      {8, "determinism and resume", 0.0, determinism_and_resume},
      {9, "lambda sweep mechanism", 0.0, lambda_sweep},
  };

  bool all = true;
  for (const Criterion& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_seconds == 0.0 || secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::printf("%s %d %s: %s [%.2fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                o.detail.c_str(), secs, in_time ? "" : ", over time budget");
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
