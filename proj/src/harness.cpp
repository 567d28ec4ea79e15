#include "mfsan/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace mfsan {

namespace {

const std::vector<std::pair<Method, std::string>>& method_table() {
  static const std::vector<std::pair<Method, std::string>> table{
      {Method::no_adapt, "no_adapt"},       {Method::single_best, "single_best"},
      {Method::source_combine, "source_combine"}, {Method::mfsan_mmd, "mfsan_mmd"},
      {Method::mfsan_disc, "mfsan_disc"},   {Method::mfsan, "mfsan"},
  };
  return table;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [k, name] : method_table())
    if (k == m) return name;
  return "unknown";
}

Method method_from_string(const std::string& s) {
  for (const auto& [k, name] : method_table())
    if (name == s) return k;
  std::string valid;
  for (const auto& n : method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown method '" + s + "' (valid: " + valid + ")");
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [k, name] : method_table()) v.push_back(name);
    return v;
  }();
  return names;
}

void ExperimentSpec::validate() const {
  std::vector<std::string> problems;
  if (seeds.empty()) problems.push_back("at least one seed is required");
  for (auto& p : train.violations()) problems.push_back(p);
  if (const auto* s = std::get_if<SyntheticSpec>(&task))
    for (auto& p : s->violations()) problems.push_back(p);
  if (architecture.branch_hidden.empty()) problems.push_back("branch_hidden must be nonempty");
  if (!problems.empty()) throw ValidationError(problems);
}

nlohmann::json to_json(const ExperimentSpec& spec) {
  nlohmann::json j;
  j["method"] = to_string(spec.method);
  if (const auto* s = std::get_if<SyntheticSpec>(&spec.task)) {
    j["task"] = {{"synthetic", to_json(*s)}};
  } else {
    j["task"] = {{"manifest", std::get<std::filesystem::path>(spec.task).string()}};
  }
  j["architecture"] = {{"common_hidden", spec.architecture.common_hidden},
                       {"branch_hidden", spec.architecture.branch_hidden}};
  j["train"] = to_json(spec.train);
  j["seeds"] = spec.seeds;
  j["output_dir"] = spec.output_dir.string();
  j["threads"] = spec.threads;
  return j;
}

ExperimentSpec experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  require_known_keys(j, {"method", "task", "architecture", "train", "seeds", "output_dir", "threads"},
                     "experiment");
  ExperimentSpec spec;
  try {
    if (j.contains("method")) spec.method = method_from_string(j["method"].get<std::string>());
    if (j.contains("task")) {
      const auto& t = j["task"];
      require_known_keys(t, {"synthetic", "manifest"}, "task");
      if (t.contains("synthetic") && t.contains("manifest"))
        throw ValidationError({"task: give either synthetic or manifest, not both"});
      if (t.contains("manifest")) {
        std::filesystem::path p = t["manifest"].get<std::string>();
        spec.task = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      } else if (t.contains("synthetic")) {
        spec.task = synthetic_from_json(t["synthetic"]);
      }
    }
    if (j.contains("architecture")) {
      const auto& a = j["architecture"];
      require_known_keys(a, {"common_hidden", "branch_hidden"}, "architecture");
      if (a.contains("common_hidden")) spec.architecture.common_hidden = a["common_hidden"].get<std::vector<std::size_t>>();
      if (a.contains("branch_hidden")) spec.architecture.branch_hidden = a["branch_hidden"].get<std::vector<std::size_t>>();
    }
    if (j.contains("train")) spec.train = train_config_from_json(j["train"]);
    if (j.contains("seeds")) spec.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("output_dir")) spec.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("threads")) spec.threads = j["threads"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({std::string("experiment: ") + e.what()});
  } catch (const ValidationError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ValidationError({std::string("experiment: ") + e.what()});
  }
  return spec;
}

TrainConfig method_config(Method method, const TrainConfig& base) {
  TrainConfig c = base;
  switch (method) {
    case Method::no_adapt:
      c.lambda_base = 0.0;
      c.gamma_base = 0.0;
      break;
    case Method::mfsan_mmd:
      c.gamma_base = 0.0;
      break;
    case Method::mfsan_disc:
      c.lambda_base = 0.0;
      break;
    case Method::source_combine:
      c.shared_branch = true;
      c.gamma_base = 0.0;
      break;
    case Method::single_best:
      c.gamma_base = 0.0;
      break;
    case Method::mfsan:
      break;
  }
  return c;
}

MultiSourceTask load_experiment_task(const ExperimentSpec& spec) {
  if (const auto* s = std::get_if<SyntheticSpec>(&spec.task)) return generate_synthetic(*s);
  return load_task(std::get<std::filesystem::path>(spec.task));
}

double disagreement_rate(const std::vector<std::vector<std::size_t>>& per_branch) {
  if (per_branch.size() < 2 || per_branch[0].empty()) return 0.0;
  const std::size_t n = per_branch[0].size();
  std::size_t conflicts = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j < per_branch.size(); ++j)
      if (per_branch[j][i] != per_branch[0][i]) {
        ++conflicts;
        break;
      }
  }
  return static_cast<double>(conflicts) / static_cast<double>(n);
}

double max_accuracy_gap(const std::vector<double>& per_classifier) {
  if (per_classifier.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(per_classifier.begin(), per_classifier.end());
  return *hi - *lo;
}

namespace {

double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

MetricsRecord evaluate_model(MfsanModel& model, const MultiSourceTask& task) {
  const auto& truth = EvaluationAccess::target_labels(task);
  Prediction p = predict(model, task.training().target.features);
  MetricsRecord r;
  for (const auto& labels : p.per_branch) r.per_classifier_accuracy.push_back(accuracy(labels, truth));
  r.average_vote_accuracy = accuracy(p.labels, truth);
  r.max_pairwise_disagreement = disagreement_rate(p.per_branch);
  std::size_t hits = 0, total = 0;
  for (const auto& s : task.training().sources) {
    Prediction ps = predict(model, s.features);
    for (std::size_t i = 0; i < s.labels.size(); ++i) hits += ps.labels[i] == s.labels[i] ? 1 : 0;
    total += s.labels.size();
  }
  r.source_accuracy = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return r;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

nlohmann::json stat_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.std}, {"count", s.count}}; }

Architecture architecture_for(Method method, const MultiSourceTask& task, const Architecture& base) {
  Architecture a = base;
  a.input_dim = task.feature_dim();
  a.num_classes = task.num_classes();
  const bool single = method == Method::source_combine || method == Method::single_best;
  a.num_sources = single ? 1 : task.num_sources();
  return a;
}

TrainedRun train_on(Method method, const MultiSourceTask& task, const Architecture& base_arch,
                    const TrainConfig& base, std::uint64_t seed) {
  const Architecture arch = architecture_for(method, task, base_arch);
  TrainConfig cfg = method_config(method, base);
  cfg.seed = seed;
  TrainedRun out{MfsanModel(arch, derive_seed(seed, 1)), SeedRun{}};
  out.run.seed = seed;
  auto evaluator = [&task](MfsanModel& m, const StepResult& s) {
    MetricsRecord r = evaluate_model(m, task);
    r.iteration = s.iteration;
    r.progress = s.schedule.progress;
    r.lr = s.schedule.lr;
    r.effective_lambda = s.effective_lambda;
    r.effective_gamma = s.effective_gamma;
    r.losses = s.losses;
    return r;
  };
  Trainer trainer(out.model, task.training(), cfg);
  TrainingLog log = run_trainer(trainer, evaluator);
  out.run.log = std::move(log.records);
  if (log.divergence) {
    out.run.error = *log.divergence;
    return out;
  }
  if (out.run.log.empty() || out.run.log.back().iteration != cfg.iterations) {
    MetricsRecord r = evaluate_model(out.model, task);
    const ScheduleState s = schedule_at(cfg.iterations, cfg);
    r.iteration = cfg.iterations;
    r.progress = s.progress;
    r.lr = s.lr;
    r.effective_lambda = cfg.lambda_base * s.ramp;
    r.effective_gamma = cfg.gamma_base * s.ramp;
    if (!out.run.log.empty()) r.losses = out.run.log.back().losses;
    out.run.log.push_back(r);
  }
  out.run.final_metrics = out.run.log.back();
  return out;
}

MultiSourceTask single_source_task(const MultiSourceTask& task, std::size_t j) {
  TrainingData d;
  d.sources = {task.training().sources[j]};
  d.target = task.training().target;
  d.num_classes = task.num_classes();
  d.feature_dim = task.feature_dim();
  return MultiSourceTask(std::move(d), EvaluationAccess::target_labels(task));
}

}  // namespace

TrainedRun train_method(Method method, const MultiSourceTask& task, const Architecture& arch,
                        const TrainConfig& base, std::uint64_t seed) {
  if (method != Method::single_best) return train_on(method, task, arch, base, seed);
  // Best single-source transfer, selected by held-out target accuracy.
  std::optional<TrainedRun> best;
  std::vector<double> constituents;
  std::size_t chosen = 0;
  for (std::size_t j = 0; j < task.num_sources(); ++j) {
    TrainedRun r = train_on(method, single_source_task(task, j), arch, base, seed);
    if (r.run.error) {
      constituents.push_back(std::nan(""));
      if (!best) best = std::move(r);
      continue;
    }
    const double acc = r.run.final_metrics->average_vote_accuracy;
    constituents.push_back(acc);
    if (!best || best->run.error || acc > best->run.final_metrics->average_vote_accuracy) {
      best = std::move(r);
      chosen = j;
    }
  }
  best->run.constituent_accuracy = std::move(constituents);
  best->run.chosen_source = chosen;
  return std::move(*best);
}

MethodResult aggregate(Method method, std::vector<SeedRun> runs) {
  MethodResult res;
  res.method = method;
  res.runs = std::move(runs);
  std::vector<double> avg, dis, gap, src;
  std::vector<std::vector<double>> per;
  for (const auto& r : res.runs) {
    if (!r.final_metrics) continue;
    const auto& m = *r.final_metrics;
    avg.push_back(m.average_vote_accuracy);
    dis.push_back(m.max_pairwise_disagreement);
    gap.push_back(max_accuracy_gap(m.per_classifier_accuracy));
    src.push_back(m.source_accuracy);
    if (per.size() < m.per_classifier_accuracy.size()) per.resize(m.per_classifier_accuracy.size());
    for (std::size_t i = 0; i < m.per_classifier_accuracy.size(); ++i)
      per[i].push_back(m.per_classifier_accuracy[i]);
  }
  res.average_vote_accuracy = summarize(avg);
  res.max_pairwise_disagreement = summarize(dis);
  res.max_classifier_gap = summarize(gap);
  res.source_accuracy = summarize(src);
  for (const auto& v : per) res.per_classifier_accuracy.push_back(summarize(v));
  return res;
}

nlohmann::json MethodResult::summary_json() const {
  nlohmann::json j;
  j["method"] = to_string(method);
  j["average_vote_accuracy"] = stat_json(average_vote_accuracy);
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : per_classifier_accuracy) per.push_back(stat_json(s));
  j["per_classifier_accuracy"] = per;
  j["max_pairwise_disagreement"] = stat_json(max_pairwise_disagreement);
  j["max_classifier_gap"] = stat_json(max_classifier_gap);
  j["source_accuracy"] = stat_json(source_accuracy);
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json s{{"seed", r.seed}};
    if (r.final_metrics) s["final"] = to_json(*r.final_metrics);
    if (r.error) s["error"] = *r.error;
    if (!r.constituent_accuracy.empty()) {
      nlohmann::json c = nlohmann::json::array();
      for (double a : r.constituent_accuracy) c.push_back(std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a));
      s["constituent_accuracy"] = c;
      s["chosen_source"] = r.chosen_source;
    }
    seeds.push_back(s);
  }
  j["seeds"] = seeds;
  return j;
}

namespace {

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

void write_jsonl(const std::filesystem::path& path, const std::vector<MetricsRecord>& log) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : log) out << to_json(r).dump() << '\n';
}

}  // namespace

MethodResult run_method(const ExperimentSpec& spec, const MultiSourceTask& task) {
  spec.validate();
  std::vector<SeedRun> runs(spec.seeds.size());
  parallel_for(spec.seeds.size(), spec.threads, [&](std::size_t i) {
    try {
      runs[i] = train_method(spec.method, task, spec.architecture, spec.train, spec.seeds[i]).run;
    } catch (const std::exception& e) {
      runs[i].seed = spec.seeds[i];
      runs[i].error = e.what();
    }
  });
  MethodResult res = aggregate(spec.method, std::move(runs));
  if (!spec.output_dir.empty()) {
    const auto dir = spec.output_dir / to_string(spec.method);
    for (const auto& r : res.runs) write_jsonl(dir / std::to_string(r.seed) / "log.jsonl", r.log);
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "summary.json");
    out << res.summary_json().dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + (dir / "summary.json").string());
  }
  return res;
}

MethodResult run_method(const ExperimentSpec& spec) {
  spec.validate();
  const MultiSourceTask task = load_experiment_task(spec);
  return run_method(spec, task);
}

// ---- per-classifier report ------------------------------------------------------

Table4 table4_report(const std::vector<MethodResult>& results) {
  Table4 t;
  std::size_t n = 0;
  for (const auto& r : results) n = std::max(n, r.per_classifier_accuracy.size());
  if (n < 2) throw std::invalid_argument("per-classifier report needs at least two classifiers");
  for (std::size_t i = 0; i < n; ++i) t.rows.push_back("S" + std::to_string(i + 1));
  t.rows.push_back("Avg");
  for (const auto& r : results) {
    t.methods.push_back(to_string(r.method));
    std::vector<double> col;
    for (std::size_t i = 0; i < n; ++i)
      col.push_back(i < r.per_classifier_accuracy.size() ? r.per_classifier_accuracy[i].mean : std::nan(""));
    col.push_back(r.average_vote_accuracy.mean);
    t.accuracy.push_back(std::move(col));
    t.mean_gap.push_back(r.max_classifier_gap.mean);
  }
  return t;
}

void Table4::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "row";
  for (const auto& m : methods) out << ',' << m;
  out << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << rows[r];
    for (const auto& col : accuracy) out << ',' << format_double(col[r]);
    out << '\n';
  }
  out << "max_gap";
  for (double g : mean_gap) out << ',' << format_double(g);
  out << '\n';
}

// ---- lambda sweep ------------------------------------------------------------------

std::vector<SweepPoint> sweep_lambda(const ExperimentSpec& spec, const MultiSourceTask& task,
                                     const std::vector<double>& values) {
  for (double v : values)
    if (!(v > 0.0)) throw std::invalid_argument("sweep values must be positive");
  std::vector<SweepPoint> points;
  for (double v : values) {
    ExperimentSpec s = spec;
    s.train.lambda_base = v;
    s.train.gamma_base = v;
    if (!spec.output_dir.empty()) s.output_dir = spec.output_dir / "sweep" / ("lambda_" + format_double(v));
    SweepPoint p;
    p.lambda = v;
    try {
      MethodResult r = run_method(s, task);
      p.average_vote_accuracy = r.average_vote_accuracy;
      for (const auto& run : r.runs) p.failures += run.final_metrics ? 0 : 1;
    } catch (const std::exception&) {
      p.failures = spec.seeds.size();
    }
    points.push_back(p);
  }
  return points;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "lambda,mean_accuracy,std_accuracy,seeds_ok,seeds_failed\n";
  for (const auto& p : points)
    out << format_double(p.lambda) << ',' << format_double(p.average_vote_accuracy.mean) << ','
        << format_double(p.average_vote_accuracy.std) << ',' << p.average_vote_accuracy.count << ','
        << p.failures << '\n';
}

// ---- convergence -----------------------------------------------------------------

double ConvergencePoint::band() const { return max_accuracy_gap(per_classifier_accuracy); }

std::vector<ConvergenceSeries> convergence_log(const ExperimentSpec& spec, const MultiSourceTask& task) {
  std::vector<ConvergenceSeries> out;
  for (Method m : {Method::mfsan, Method::mfsan_mmd}) {
    ExperimentSpec s = spec;
    s.method = m;
    MethodResult r = run_method(s, task);
    ConvergenceSeries series;
    series.method = m;
    std::vector<const SeedRun*> ok;
    for (const auto& run : r.runs)
      if (run.final_metrics) ok.push_back(&run);
    if (ok.empty()) {
      out.push_back(series);
      continue;
    }
    const std::size_t points = ok.front()->log.size();
    for (std::size_t k = 0; k < points; ++k) {
      ConvergencePoint p;
      p.iteration = ok.front()->log[k].iteration;
      std::vector<double> avg;
      std::vector<std::vector<double>> per;
      for (const SeedRun* run : ok) {
        const auto& rec = run->log[k];
        avg.push_back(rec.average_vote_accuracy);
        per.resize(rec.per_classifier_accuracy.size());
        for (std::size_t i = 0; i < rec.per_classifier_accuracy.size(); ++i)
          per[i].push_back(rec.per_classifier_accuracy[i]);
      }
      p.average_vote_accuracy = summarize(avg).mean;
      for (const auto& v : per) p.per_classifier_accuracy.push_back(summarize(v).mean);
      series.points.push_back(p);
    }
    for (const SeedRun* run : ok) {
      std::vector<double> bands;
      for (const auto& rec : run->log) bands.push_back(max_accuracy_gap(rec.per_classifier_accuracy));
      series.seed_bands.push_back(std::move(bands));
    }
    out.push_back(std::move(series));
  }
  return out;
}

void write_convergence_csv(const std::vector<ConvergenceSeries>& series,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::size_t n = 0;
  for (const auto& s : series)
    for (const auto& p : s.points) n = std::max(n, p.per_classifier_accuracy.size());
  out << "method,iteration";
  for (std::size_t i = 0; i < n; ++i) out << ",acc_S" << i + 1;
  out << ",acc_avg,band\n";
  for (const auto& s : series)
    for (const auto& p : s.points) {
      out << to_string(s.method) << ',' << p.iteration;
      for (std::size_t i = 0; i < n; ++i)
        out << ',' << (i < p.per_classifier_accuracy.size() ? format_double(p.per_classifier_accuracy[i]) : "");
      out << ',' << format_double(p.average_vote_accuracy) << ',' << format_double(p.band()) << '\n';
    }
}

double late_band(const ConvergenceSeries& series, std::size_t total_iterations) {
  const double start = 0.75 * static_cast<double>(total_iterations);
  std::vector<double> vals;
  for (const auto& bands : series.seed_bands)
    for (std::size_t k = 0; k < bands.size() && k < series.points.size(); ++k)
      if (static_cast<double>(series.points[k].iteration) >= start) vals.push_back(bands[k]);
  return summarize(vals).mean;
}

// ---- embeddings ------------------------------------------------------------------

std::vector<std::filesystem::path> export_embeddings(MfsanModel& model, const MultiSourceTask& task,
                                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& t = task.training();
  struct Part {
    std::string tag;
    const Tensor* features;
    const std::vector<std::size_t>* labels;
  };
  std::vector<Part> parts;
  for (std::size_t j = 0; j < t.sources.size(); ++j)
    parts.push_back({"source_" + std::to_string(j), &t.sources[j].features, &t.sources[j].labels});
  const std::vector<std::size_t>* tl =
      task.has_target_labels() ? &EvaluationAccess::target_labels(task) : nullptr;
  parts.push_back({"target", &t.target.features, tl});

  std::vector<std::vector<Tensor>> feats;  // [part][branch]
  for (const auto& p : parts) feats.push_back(extract_features(model, *p.features));

  std::vector<std::filesystem::path> written;
  char buf[64];
  for (std::size_t b = 0; b < model.num_sources(); ++b) {
    const auto path = dir / ("embeddings_branch" + std::to_string(b) + ".csv");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::size_t h = model.architecture().feature_width();
    for (std::size_t u = 0; u < h; ++u) out << "feature_" << u << ',';
    out << "domain,label\n";
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const Tensor& f = feats[p][b];
      for (std::size_t i = 0; i < f.rows(); ++i) {
        for (std::size_t u = 0; u < h; ++u) {
          auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, f.at(i, u));
          out.write(buf, ptr - buf);
          out << ',';
        }
        out << parts[p].tag << ',';
        if (parts[p].labels) out << (*parts[p].labels)[i];
        out << '\n';
      }
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
    written.push_back(path);
  }
  return written;
}

}  // namespace mfsan
