// mfsan command-line entry point.
//
// Subcommands: generate, train, experiment, sweep, export-embeddings.
// Config overrides are given as `key=value` or `--key value` after the
// subcommand; unknown keys are rejected with the list of valid ones.
//
// Exit codes: 0 ok, 2 invalid configuration, 3 output conflict, 4 numeric
// divergence, 5 I/O failure.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mfsan/harness.hpp"

namespace fs = std::filesystem;
using namespace mfsan;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kValidation = 2, kConflict = 3, kDivergence = 4, kIo = 5 };

struct ExitError : std::runtime_error {
  ExitError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

// ---- override registry ------------------------------------------------------

struct Settings {
  SyntheticSpec synthetic;
  ExperimentSpec experiment;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::uint64_t>> seeds;
};

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw ValidationError({key + ": cannot parse '" + text + "' as a number"});
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::size_t a = 0;
  while (a <= text.size()) {
    std::size_t b = text.find(',', a);
    if (b == std::string::npos) b = text.size();
    out.push_back(parse_number<T>(key, text.substr(a, b - a)));
    a = b + 1;
  }
  return out;
}

using Setter = std::function<void(Settings&, const std::string&)>;

struct Override {
  std::string key;
  std::string help;
  Setter set;
};

const std::vector<Override>& registry() {
  static const std::vector<Override> table = [] {
    std::vector<Override> r;
    auto add = [&](std::string key, std::string help, Setter set) {
      r.push_back({std::move(key), std::move(help), std::move(set)});
    };
    auto sz = [](auto member) {
      return [member](Settings& s, const std::string& v) { member(s) = parse_number<std::size_t>("", v); };
    };
    auto dbl = [](auto member) {
      return [member](Settings& s, const std::string& v) { member(s) = parse_number<double>("", v); };
    };
    // synthetic task
    add("num-classes", "classes K", sz([](Settings& s) -> std::size_t& { return s.synthetic.num_classes; }));
    add("feature-dim", "input dimension d", sz([](Settings& s) -> std::size_t& { return s.synthetic.feature_dim; }));
    add("samples-per-domain", "rows per domain",
        sz([](Settings& s) -> std::size_t& { return s.synthetic.samples_per_domain; }));
    add("class-separation", "std of drawn class means",
        dbl([](Settings& s) -> double& { return s.synthetic.class_separation; }));
    add("mean-offset", "offset of drawn class means", dbl([](Settings& s) -> double& { return s.synthetic.mean_offset; }));
    add("class-cov-scale", "within-class std", dbl([](Settings& s) -> double& { return s.synthetic.class_cov_scale; }));
    add("noise-std", "additive noise std", dbl([](Settings& s) -> double& { return s.synthetic.noise_std; }));
    add("rotations", "comma list of angles, sources then target", [](Settings& s, const std::string& v) {
      s.synthetic.domain_transforms.clear();
      for (double a : parse_list<double>("rotations", v)) s.synthetic.domain_transforms.push_back({a, 1.0, {}});
    });
    add("task-seed", "synthetic task seed", [](Settings& s, const std::string& v) {
      s.synthetic.seed = parse_number<std::uint64_t>("task-seed", v);
    });
    // training
    add("iterations", "training iterations T", sz([](Settings& s) -> std::size_t& { return s.experiment.train.iterations; }));
    add("batch-size", "minibatch size per domain", sz([](Settings& s) -> std::size_t& { return s.experiment.train.batch_size; }));
    add("eta0", "base learning rate", dbl([](Settings& s) -> double& { return s.experiment.train.eta0; }));
    add("alpha", "lr decay alpha", dbl([](Settings& s) -> double& { return s.experiment.train.alpha; }));
    add("beta", "lr decay beta", dbl([](Settings& s) -> double& { return s.experiment.train.beta; }));
    add("momentum", "SGD momentum", dbl([](Settings& s) -> double& { return s.experiment.train.momentum; }));
    add("theta", "ramp steepness", dbl([](Settings& s) -> double& { return s.experiment.train.theta; }));
    add("lambda", "mmd weight base", dbl([](Settings& s) -> double& { return s.experiment.train.lambda_base; }));
    add("gamma", "disc weight base", dbl([](Settings& s) -> double& { return s.experiment.train.gamma_base; }));
    add("lr-multiplier", "lr multiplier of branches and classifiers",
        dbl([](Settings& s) -> double& { return s.experiment.train.lr_multiplier_scratch; }));
    add("eval-every", "evaluation cadence", sz([](Settings& s) -> std::size_t& { return s.experiment.train.eval_every; }));
    add("source-mode", "round_robin | all_sources", [](Settings& s, const std::string& v) {
      s.experiment.train.source_mode = source_mode_from_string(v);
    });
    add("estimator", "biased_v | unbiased_u", [](Settings& s, const std::string& v) {
      s.experiment.train.estimator = estimator_from_string(v);
    });
    add("disc-reduction", "mean | sum", [](Settings& s, const std::string& v) {
      s.experiment.train.disc_reduction = disc_reduction_from_string(v);
    });
    add("sampling", "shuffle_epoch | with_replacement", [](Settings& s, const std::string& v) {
      s.experiment.train.sampling = sampling_mode_from_string(v);
    });
    add("kernel-ladder", "median-heuristic ladder size", [](Settings& s, const std::string& v) {
      auto& k = s.experiment.train.kernel;
      k = KernelSpec::median(parse_number<std::size_t>("kernel-ladder", v), k.step_multiplier);
    });
    add("kernel-step", "median-heuristic ladder step", [](Settings& s, const std::string& v) {
      auto& k = s.experiment.train.kernel;
      k = KernelSpec::median(k.ladder_size, parse_number<double>("kernel-step", v));
    });
    add("kernel-bandwidths", "fixed sigma^2 list (disables the median heuristic)",
        [](Settings& s, const std::string& v) {
          s.experiment.train.kernel = KernelSpec::fixed(parse_list<double>("kernel-bandwidths", v));
        });
    // architecture
    add("common-hidden", "comma list of shared layer widths", [](Settings& s, const std::string& v) {
      s.experiment.architecture.common_hidden = parse_list<std::size_t>("common-hidden", v);
    });
    add("branch-hidden", "comma list of branch layer widths", [](Settings& s, const std::string& v) {
      s.experiment.architecture.branch_hidden = parse_list<std::size_t>("branch-hidden", v);
    });
    // run
    add("method", "one of the method names", [](Settings& s, const std::string& v) {
      s.experiment.method = method_from_string(v);
    });
    add("seed", "run seed (task seed for generate); falls back to MFSAN_SEED",
        [](Settings& s, const std::string& v) { s.seed = parse_number<std::uint64_t>("seed", v); });
    add("seeds", "comma list of run seeds", [](Settings& s, const std::string& v) {
      s.seeds = parse_list<std::uint64_t>("seeds", v);
    });
    add("threads", "worker threads (0 = hardware)",
        sz([](Settings& s) -> std::size_t& { return s.experiment.threads; }));
    return r;
  }();
  return table;
}

std::string valid_keys() {
  std::string out;
  for (const auto& o : registry()) out += (out.empty() ? "" : ", ") + o.key;
  return out;
}

void apply_override(Settings& s, const std::string& key, const std::string& value) {
  for (const auto& o : registry())
    if (o.key == key) {
      try {
        o.set(s, value);
      } catch (const ValidationError&) {
        throw ValidationError({key + ": cannot parse '" + value + "'"});
      } catch (const std::invalid_argument& e) {
        throw ValidationError({key + ": " + e.what()});
      }
      return;
    }
  throw ValidationError({"unknown key '" + key + "' (valid keys: " + valid_keys() + ")"});
}

// Accepts `key=value`, `--key=value` and `--key value`.
void apply_overrides(Settings& s, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string a = args[i];
    const bool dashed = a.rfind("--", 0) == 0;
    if (dashed) a = a.substr(2);
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      apply_override(s, a.substr(0, eq), a.substr(eq + 1));
    } else if (dashed && i + 1 < args.size()) {
      apply_override(s, a, args[++i]);
    } else {
      throw ValidationError({"cannot read argument '" + args[i] + "' (use key=value or --key value; valid keys: " +
                             valid_keys() + ")"});
    }
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* e = std::getenv("MFSAN_SEED");
  if (!e || !*e) return std::nullopt;
  return parse_number<std::uint64_t>("MFSAN_SEED", e);
}

// Resolved run seeds: --seeds, else --seed, else MFSAN_SEED, else the spec's.
void resolve_run_seeds(Settings& s) {
  if (s.seeds) s.experiment.seeds = *s.seeds;
  else if (s.seed) s.experiment.seeds = {*s.seed};
  else if (auto e = env_seed()) s.experiment.seeds = {*e};
}

// ---- output helpers ------------------------------------------------------------

void prepare_outdir(const fs::path& dir, bool force) {
  if (dir.empty()) throw ValidationError({"--out is required"});
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force)
    throw ExitError(kConflict, "output directory " + dir.string() + " exists and is not empty; pass --force to reuse it");
  fs::create_directories(dir, ec);
  if (ec) throw ExitError(kIo, "cannot create " + dir.string() + ": " + ec.message());
}

void print_resolved(const json& j) {
  std::cout << "resolved config:\n" << j.dump(2) << std::endl;
}

json read_json_file(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError({"spec file " + p.string() + " does not exist"});
  std::ifstream in(p);
  if (!in) throw ExitError(kIo, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError({p.string() + ": " + e.what()});
  }
}

void append_jsonl(std::ofstream& out, const MetricsRecord& r) {
  out << to_json(r).dump() << '\n';
  out.flush();
}

std::string brief(const MetricsRecord& r) {
  std::ostringstream os;
  os << "iter " << r.iteration << " lr " << r.lr << " loss " << r.losses.total << " (cls " << r.losses.cls
     << " mmd " << r.losses.mmd << " disc " << r.losses.disc << ")";
  if (!r.per_classifier_accuracy.empty()) {
    os << " acc";
    for (double a : r.per_classifier_accuracy) os << ' ' << a;
    os << " avg " << r.average_vote_accuracy;
  }
  return os.str();
}

// ---- subcommands -----------------------------------------------------------------

struct Common {
  fs::path out;
  bool force = false;
  std::vector<std::string> overrides;
};

int cmd_generate(const Common& c, const std::string& spec_path) {
  Settings s;
  if (!spec_path.empty()) s.synthetic = synthetic_from_json(read_json_file(spec_path));
  apply_overrides(s, c.overrides);
  if (s.seed) s.synthetic.seed = *s.seed;
  else if (auto e = env_seed()) s.synthetic.seed = *e;
  print_resolved({{"subcommand", "generate"}, {"synthetic", to_json(s.synthetic)}});
  s.synthetic.validate();
  prepare_outdir(c.out, c.force);
  const MultiSourceTask task = generate_synthetic(s.synthetic);
  for (const auto& p : write_task(task, c.out)) std::cout << "wrote " << p.string() << '\n';
  std::cout << "seed " << s.synthetic.seed << std::endl;
  return kOk;
}

MultiSourceTask task_from(const std::string& manifest, const Settings& s, ExperimentSpec& spec) {
  if (!manifest.empty()) spec.task = fs::path(manifest);
  else if (std::holds_alternative<SyntheticSpec>(spec.task)) spec.task = s.synthetic;
  return load_experiment_task(spec);
}

int cmd_train(const Common& c, const std::string& manifest, const std::string& resume,
              std::size_t checkpoint_every, std::size_t log_every, std::size_t stop_at) {
  Settings s;
  apply_overrides(s, c.overrides);
  resolve_run_seeds(s);
  ExperimentSpec& spec = s.experiment;
  if (spec.seeds.size() != 1) throw ValidationError({"train runs exactly one seed; use experiment for several"});
  if (spec.method == Method::single_best)
    throw ValidationError({"method single_best trains one model per source; use the experiment subcommand"});
  const std::uint64_t seed = spec.seeds.front();
  TrainConfig cfg = method_config(spec.method, spec.train);
  cfg.seed = seed;

  json resolved{{"subcommand", "train"}, {"method", to_string(spec.method)}, {"seed", seed}};
  if (!manifest.empty()) resolved["task"] = {{"manifest", manifest}};
  else resolved["task"] = {{"synthetic", to_json(s.synthetic)}};
  resolved["architecture"] = {{"common_hidden", spec.architecture.common_hidden},
                              {"branch_hidden", spec.architecture.branch_hidden}};
  resolved["train"] = to_json(cfg);
  print_resolved(resolved);
  cfg.validate();
  spec.validate();

  const MultiSourceTask task = task_from(manifest, s, spec);
  Architecture arch = spec.architecture;
  arch.input_dim = task.feature_dim();
  arch.num_classes = task.num_classes();
  arch.num_sources = spec.method == Method::source_combine ? 1 : task.num_sources();
  arch.validate();
  prepare_outdir(c.out, c.force);

  MfsanModel model(arch, derive_seed(seed, 1));
  Trainer trainer(model, task.training(), cfg);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    std::cout << "resumed at iteration " << trainer.iteration() << std::endl;
  }
  const fs::path ckpt = c.out / "checkpoint.ckpt";
  std::ofstream log(c.out / "log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw ExitError(kIo, "cannot write " + (c.out / "log.jsonl").string());

  std::size_t evaluations = 0;
  auto record = [&](const StepResult& r, std::size_t completed) {
    MetricsRecord m = task.has_target_labels() ? evaluate_model(model, task) : MetricsRecord{};
    m.iteration = completed;
    m.progress = r.schedule.progress;
    m.lr = r.schedule.lr;
    m.effective_lambda = r.effective_lambda;
    m.effective_gamma = r.effective_gamma;
    m.losses = r.losses;
    append_jsonl(log, m);
    if (evaluations++ % log_every == 0 || completed == cfg.iterations) std::cout << brief(m) << std::endl;
  };
  try {
    while (!trainer.done() && (stop_at == 0 || trainer.iteration() < stop_at)) {
      const StepResult r = trainer.step();
      const std::size_t completed = r.iteration + 1;
      if (completed % cfg.eval_every == 0 || completed == cfg.iterations) record(r, completed);
      if (checkpoint_every > 0 && completed % checkpoint_every == 0) trainer.save_checkpoint(ckpt);
    }
  } catch (const DivergenceError&) {
    trainer.save_checkpoint(c.out / "diverged.ckpt");
    throw;
  }
  trainer.save_checkpoint(ckpt);
  std::cout << "wrote " << ckpt.string() << std::endl;
  return kOk;
}

struct Reports {
  std::vector<Method> methods;
  bool table4 = true;
  bool convergence = false;
  std::vector<double> sweep;
};

// The experiment file is an experiment spec plus two optional keys:
// "methods" (list, overrides "method") and "reports"
// ({"table4": bool, "convergence": bool, "sweep": [lambda values]}).
// The informational keys of a printed resolved config are dropped, so that
// block can be fed back in as a spec.
Reports split_reports(json& j) {
  Reports r;
  if (!j.is_object()) throw ValidationError({"experiment spec must be a JSON object"});
  for (const char* info : {"subcommand", "effective_train"}) j.erase(info);
  try {
    if (j.contains("values")) {
      r.sweep = j["values"].get<std::vector<double>>();
      j.erase("values");
    }
    if (j.contains("methods")) {
      for (const auto& m : j["methods"]) r.methods.push_back(method_from_string(m.get<std::string>()));
      j.erase("methods");
    }
    if (j.contains("reports")) {
      const json rep = j["reports"];
      require_known_keys(rep, {"table4", "convergence", "sweep"}, "reports");
      r.table4 = rep.value("table4", true);
      r.convergence = rep.value("convergence", false);
      if (rep.contains("sweep")) {
        if (rep["sweep"].is_boolean()) {
          if (rep["sweep"].get<bool>()) r.sweep = kDefaultLambdaGrid;
        } else {
          r.sweep = rep["sweep"].get<std::vector<double>>();
        }
      }
      j.erase("reports");
    }
  } catch (const json::exception& e) {
    throw ValidationError({std::string("experiment: ") + e.what()});
  } catch (const ValidationError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("experiment: ") + e.what()});
  }
  return r;
}

Settings settings_from_spec(const std::string& spec_path, json& j, const std::vector<std::string>& overrides,
                            Reports& reports) {
  Settings s;
  if (!spec_path.empty()) {
    j = read_json_file(spec_path);
    reports = split_reports(j);
    s.experiment = experiment_from_json(j, fs::path(spec_path).parent_path());
    if (const auto* syn = std::get_if<SyntheticSpec>(&s.experiment.task)) s.synthetic = *syn;
  }
  apply_overrides(s, overrides);
  if (std::holds_alternative<SyntheticSpec>(s.experiment.task)) s.experiment.task = s.synthetic;
  resolve_run_seeds(s);
  return s;
}

int cmd_experiment(const Common& c, const std::string& spec_path) {
  if (spec_path.empty()) throw ValidationError({"--spec is required"});
  json j;
  Reports reports;
  Settings s = settings_from_spec(spec_path, j, c.overrides, reports);
  ExperimentSpec& spec = s.experiment;
  if (!c.out.empty()) spec.output_dir = c.out;
  if (reports.methods.empty()) reports.methods = {spec.method};

  json resolved = to_json(spec);
  resolved["subcommand"] = "experiment";
  json ms = json::array();
  for (Method m : reports.methods) ms.push_back(to_string(m));
  resolved["methods"] = ms;
  resolved["reports"] = {{"table4", reports.table4}, {"convergence", reports.convergence}, {"sweep", reports.sweep}};
  for (Method m : reports.methods) {
    json eff = to_json(method_config(m, spec.train));
    resolved["effective_train"][to_string(m)] = eff;
  }
  print_resolved(resolved);
  spec.validate();
  prepare_outdir(spec.output_dir, c.force);

  const MultiSourceTask task = load_experiment_task(spec);
  std::vector<MethodResult> results;
  for (Method m : reports.methods) {
    ExperimentSpec ms_spec = spec;
    ms_spec.method = m;
    MethodResult r = run_method(ms_spec, task);
    std::cout << to_string(m) << ": average-vote accuracy " << r.average_vote_accuracy.mean << " +- "
              << r.average_vote_accuracy.std << " over " << r.average_vote_accuracy.count << " seeds";
    std::size_t failed = 0;
    for (const auto& run : r.runs) failed += run.error ? 1 : 0;
    if (failed) std::cout << " (" << failed << " diverged)";
    std::cout << std::endl;
    results.push_back(std::move(r));
  }
  bool multi = false;
  for (const auto& r : results) multi = multi || r.per_classifier_accuracy.size() >= 2;
  if (reports.table4 && multi) {
    std::vector<MethodResult> multi_results;
    for (const auto& r : results)
      if (r.per_classifier_accuracy.size() >= 2) multi_results.push_back(r);
    table4_report(multi_results).write_csv(spec.output_dir / "table4.csv");
    std::cout << "wrote " << (spec.output_dir / "table4.csv").string() << std::endl;
  }
  if (reports.convergence) {
    write_convergence_csv(convergence_log(spec, task), spec.output_dir / "convergence.csv");
    std::cout << "wrote " << (spec.output_dir / "convergence.csv").string() << std::endl;
  }
  if (!reports.sweep.empty()) {
    write_sweep_csv(sweep_lambda(spec, task, reports.sweep), spec.output_dir / "sweep_lambda.csv");
    std::cout << "wrote " << (spec.output_dir / "sweep_lambda.csv").string() << std::endl;
  }
  bool all_failed = true;
  for (const auto& r : results) all_failed = all_failed && r.average_vote_accuracy.count == 0;
  return all_failed ? kDivergence : kOk;
}

int cmd_sweep(const Common& c, const std::string& spec_path, const std::string& values) {
  json j;
  Reports reports;
  Settings s = settings_from_spec(spec_path, j, c.overrides, reports);
  ExperimentSpec& spec = s.experiment;
  if (!c.out.empty()) spec.output_dir = c.out;
  std::vector<double> grid = reports.sweep.empty() ? kDefaultLambdaGrid : reports.sweep;
  if (!values.empty()) grid = parse_list<double>("values", values);

  json resolved = to_json(spec);
  resolved["subcommand"] = "sweep";
  resolved["values"] = grid;
  resolved["effective_train"] = to_json(method_config(spec.method, spec.train));
  print_resolved(resolved);
  spec.validate();
  prepare_outdir(spec.output_dir, c.force);

  const MultiSourceTask task = load_experiment_task(spec);
  const auto points = sweep_lambda(spec, task, grid);
  for (const auto& p : points)
    std::cout << "lambda " << p.lambda << ": " << p.average_vote_accuracy.mean << " +- "
              << p.average_vote_accuracy.std << " (" << p.failures << " failed)" << std::endl;
  write_sweep_csv(points, spec.output_dir / "sweep_lambda.csv");
  std::cout << "wrote " << (spec.output_dir / "sweep_lambda.csv").string() << std::endl;
  return kOk;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& manifest) {
  if (checkpoint.empty()) throw ValidationError({"--checkpoint is required"});
  Settings s;
  apply_overrides(s, c.overrides);
  ExperimentSpec spec = s.experiment;
  print_resolved({{"subcommand", "export-embeddings"},
                  {"checkpoint", checkpoint},
                  {"task", manifest.empty() ? json{{"synthetic", to_json(s.synthetic)}} : json{{"manifest", manifest}}}});
  MfsanModel model = load_model(checkpoint);
  const MultiSourceTask task = task_from(manifest, s, spec);
  if (task.feature_dim() != model.architecture().input_dim)
    throw ValidationError({"task feature_dim does not match the checkpoint's input width"});
  prepare_outdir(c.out, c.force);
  for (const auto& p : export_embeddings(model, task, c.out)) std::cout << "wrote " << p.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source domain adaptation with per-source alignment and classifier agreement"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress standard output");

  Common common;
  std::string spec_path, manifest, resume, checkpoint, values;
  std::size_t checkpoint_every = 0, log_every = 1, stop_at = 0;

  auto with_common = [&](CLI::App* sub, bool needs_out) {
    auto* o = sub->add_option("--out", common.out, "output directory");
    if (needs_out) o->required();
    sub->add_flag("--force", common.force, "write into an existing non-empty output directory");
    sub->allow_extras();
    return sub;
  };
  auto keys_help = "\nOverrides (key=value or --key value): " + valid_keys();

  auto* gen = with_common(app.add_subcommand("generate", "write a synthetic task (CSV files + manifest)" + keys_help), true);
  gen->add_option("--spec", spec_path, "synthetic task JSON");

  auto* train = with_common(app.add_subcommand("train", "train one model; writes checkpoint.ckpt and log.jsonl" + keys_help), true);
  train->add_option("--task", manifest, "task manifest (default: synthetic task from overrides)");
  train->add_option("--resume", resume, "trainer checkpoint to continue from");
  train->add_option("--checkpoint-every", checkpoint_every, "also checkpoint every N iterations");
  train->add_option("--stop-at", stop_at, "pause after N completed iterations (checkpoint kept for --resume)");
  train->add_option("--log-every", log_every, "print every N-th evaluation record")->check(CLI::PositiveNumber);

  auto* exp = with_common(app.add_subcommand("experiment", "run methods over seeds from a spec file" + keys_help), false);
  exp->add_option("--spec", spec_path, "experiment spec JSON");

  auto* sweep = with_common(app.add_subcommand("sweep", "lambda sensitivity sweep" + keys_help), false);
  sweep->add_option("--spec", spec_path, "experiment spec JSON (optional)");
  sweep->add_option("--values", values, "comma list of lambda values");

  auto* exp_emb = with_common(app.add_subcommand("export-embeddings", "write per-branch latent features" + keys_help), true);
  exp_emb->add_option("--checkpoint", checkpoint, "model or trainer checkpoint")->required();
  exp_emb->add_option("--task", manifest, "task manifest (default: synthetic task from overrides)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  std::streambuf* saved = nullptr;
  std::ostringstream sink;
  if (quiet) saved = std::cout.rdbuf(sink.rdbuf());
  int code = kOk;
  try {
    for (CLI::App* sub : app.get_subcommands()) common.overrides = sub->remaining();
    if (gen->parsed()) code = cmd_generate(common, spec_path);
    else if (train->parsed()) code = cmd_train(common, manifest, resume, checkpoint_every, log_every, stop_at);
    else if (exp->parsed()) code = cmd_experiment(common, spec_path);
    else if (sweep->parsed()) code = cmd_sweep(common, spec_path, values);
    else if (exp_emb->parsed()) code = cmd_export(common, checkpoint, manifest);
  } catch (const ExitError& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = e.code;
  } catch (const ValidationError& e) {
    std::cerr << "invalid configuration:\n";
    for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
    code = kValidation;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kDivergence;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kIo;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    code = kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = kIo;
  }
  if (saved) std::cout.rdbuf(saved);
  return code;
}
