#include "mfsan/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace mfsan {

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string s = "validation failed:";
  for (const auto& p : problems) s += " " + p + ";";
  return s;
}

}  // namespace

ParseError::ParseError(const std::string& file, std::size_t line, const std::string& what)
    : std::runtime_error(file + ": line " + std::to_string(line) + ": " + what), line_(line) {}

ValidationError::ValidationError(std::vector<std::string> problems)
    : std::invalid_argument(join_problems(problems)), problems_(std::move(problems)) {}

void TrainingData::validate() const {
  std::vector<std::string> problems;
  if (sources.empty()) problems.push_back("at least one source domain is required");
  if (num_classes < 2) problems.push_back("num_classes must be >= 2");
  auto check_features = [&](const Tensor& f, const std::string& name) {
    if (f.rank() != 2 || f.cols() != feature_dim) {
      problems.push_back(name + " features must be n x " + std::to_string(feature_dim));
      return;
    }
    if (f.rows() == 0) problems.push_back(name + " is empty");
    if (!f.all_finite()) problems.push_back(name + " has non-finite features");
  };
  for (const auto& s : sources) {
    check_features(s.features, s.name);
    if (s.features.rank() == 2 && s.labels.size() != s.features.rows())
      problems.push_back(s.name + " label count does not match rows");
    for (std::size_t y : s.labels)
      if (y >= num_classes) {
        problems.push_back(s.name + " has a label outside [0, " + std::to_string(num_classes) + ")");
        break;
      }
  }
  check_features(target.features, target.name);
  if (!problems.empty()) throw ValidationError(problems);
}

MultiSourceTask::MultiSourceTask(TrainingData training,
                                 std::optional<std::vector<std::size_t>> target_labels)
    : training_(std::move(training)), target_labels_(std::move(target_labels)) {
  training_.validate();
  if (target_labels_) {
    std::vector<std::string> problems;
    if (target_labels_->size() != training_.target.features.rows())
      problems.push_back("target label count does not match target rows");
    for (std::size_t y : *target_labels_)
      if (y >= training_.num_classes) {
        problems.push_back("target label outside class range");
        break;
      }
    if (!problems.empty()) throw ValidationError(problems);
  }
}

const std::vector<std::size_t>& EvaluationAccess::target_labels(const MultiSourceTask& task) {
  if (!task.target_labels_) throw std::logic_error("task has no held-out target labels");
  return *task.target_labels_;
}

// ---- synthetic generation -------------------------------------------------------

std::vector<double> AffineTransform::apply(std::span<const double> x) const {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i + 1 < out.size(); i += 2) {
    const double u = x[i], v = x[i + 1];
    out[i] = c * u - s * v;
    out[i + 1] = s * u + c * v;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= scale;
    if (i < translation.size()) out[i] += translation[i];
  }
  return out;
}

std::vector<std::string> SyntheticSpec::violations() const {
  std::vector<std::string> problems;
  if (num_classes < 2) problems.push_back("num_classes must be >= 2");
  if (feature_dim < 1) problems.push_back("feature_dim must be >= 1");
  if (domain_transforms.size() < 2)
    problems.push_back("domain_transforms needs at least one source plus the target");
  if (samples_per_domain < num_classes || samples_per_domain == 0)
    problems.push_back("samples_per_domain must be >= num_classes");
  if (!(class_cov_scale > 0.0)) problems.push_back("class_cov_scale must be positive");
  if (!(noise_std >= 0.0)) problems.push_back("noise_std must be nonnegative");
  if (class_means.empty() && !(class_separation > 0.0))
    problems.push_back("class_separation must be positive");
  if (!class_means.empty()) {
    if (class_means.size() != num_classes) problems.push_back("class_means must have num_classes rows");
    for (const auto& row : class_means)
      if (row.size() != feature_dim) {
        problems.push_back("class_means rows must have feature_dim entries");
        break;
      }
  }
  for (std::size_t i = 0; i < domain_transforms.size(); ++i) {
    const auto& t = domain_transforms[i];
    if (t.scale == 0.0 || !std::isfinite(t.scale))
      problems.push_back("domain_transforms[" + std::to_string(i) + "].scale must be nonzero");
    if (!t.translation.empty() && t.translation.size() != feature_dim)
      problems.push_back("domain_transforms[" + std::to_string(i) +
                         "].translation must be empty or have feature_dim entries");
  }
  return problems;
}

void SyntheticSpec::validate() const {
  auto problems = violations();
  if (!problems.empty()) throw ValidationError(std::move(problems));
}

std::vector<std::vector<double>> resolved_class_means(const SyntheticSpec& spec) {
  if (!spec.class_means.empty()) return spec.class_means;
  Rng rng(derive_seed(spec.seed, 0x6d65616e73));
  std::vector<std::vector<double>> means(spec.num_classes, std::vector<double>(spec.feature_dim));
  for (auto& row : means)
    for (double& v : row) v = spec.mean_offset + spec.class_separation * rng.normal();
  return means;
}

MultiSourceTask generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto means = resolved_class_means(spec);
  const std::size_t k = spec.num_classes, d = spec.feature_dim, n = spec.samples_per_domain;
  const double sd = std::sqrt(spec.class_cov_scale);

  TrainingData training;
  training.num_classes = k;
  training.feature_dim = d;
  std::vector<std::size_t> target_labels;

  for (std::size_t dom = 0; dom < spec.domain_transforms.size(); ++dom) {
    Rng rng(derive_seed(spec.seed, dom));
    // Balanced allocation; a remainder goes to the lowest class indices.
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t count = n / k + (c < n % k ? 1 : 0);
      labels.insert(labels.end(), count, c);
    }
    rng.shuffle(std::span<std::size_t>(labels));
    Tensor x(Shape{n, d});
    std::vector<double> point(d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t u = 0; u < d; ++u) point[u] = means[labels[i]][u] + sd * rng.normal();
      auto moved = spec.domain_transforms[dom].apply(point);
      for (std::size_t u = 0; u < d; ++u) x.at(i, u) = moved[u] + spec.noise_std * rng.normal();
    }
    if (dom + 1 < spec.domain_transforms.size()) {
      training.sources.push_back({"source_" + std::to_string(dom), std::move(x), std::move(labels)});
    } else {
      training.target = {"target", std::move(x)};
      target_labels = std::move(labels);
    }
  }
  return MultiSourceTask(std::move(training), std::move(target_labels));
}

// ---- CSV -------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view f = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    out.push_back(f);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

CsvDomain parse_csv(std::istream& in, const std::string& name, const CsvSchema& schema) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError(name, 1, "missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_fields(line);
  bool has_label = !header.empty() && header.back() == "label";
  const std::size_t d = header.size() - (has_label ? 1 : 0);
  for (std::size_t i = 0; i < d; ++i)
    if (header[i] != "feature_" + std::to_string(i))
      throw ParseError(name, 1, "expected column 'feature_" + std::to_string(i) + "', found '" +
                                    std::string(header[i]) + "'");
  if (d == 0) throw ParseError(name, 1, "missing feature columns");
  if (schema.feature_dim && *schema.feature_dim != d)
    throw ParseError(name, 1, "expected " + std::to_string(*schema.feature_dim) +
                                  " feature columns, found " + std::to_string(d));
  if (schema.require_labels && !has_label) throw ParseError(name, 1, "missing column 'label'");

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw ParseError(name, lineno, "expected " + std::to_string(header.size()) + " fields, found " +
                                         std::to_string(fields.size()));
    for (std::size_t i = 0; i < d; ++i) {
      double v = 0.0;
      const auto f = fields[i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || ec != std::errc() || ptr != f.data() + f.size())
        throw ParseError(name, lineno, "non-numeric cell '" + std::string(f) + "' in column feature_" +
                                           std::to_string(i));
      if (!std::isfinite(v))
        throw ParseError(name, lineno, "non-finite cell '" + std::string(f) + "' in column feature_" +
                                           std::to_string(i));
      values.push_back(v);
    }
    if (has_label) {
      const auto f = fields[d];
      std::size_t y = 0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), y);
      if (f.empty() || ec != std::errc() || ptr != f.data() + f.size())
        throw ParseError(name, lineno, "label '" + std::string(f) + "' is not a nonnegative integer");
      labels.push_back(y);
    }
    ++rows;
  }
  CsvDomain out;
  out.features = Tensor(Shape{rows, d}, std::move(values));
  if (has_label) out.labels = std::move(labels);
  return out;
}

CsvDomain load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_csv(in, path.string(), schema);
}

void write_csv(const std::filesystem::path& path, const Tensor& features,
               const std::vector<std::size_t>* labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t n = features.rows(), d = features.cols();
  for (std::size_t u = 0; u < d; ++u) out << (u ? "," : "") << "feature_" << u;
  if (labels) out << ",label";
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < d; ++u) {
      // Shortest representation that parses back to the same double.
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, features.at(i, u));
      if (u) out << ',';
      out.write(buf, ptr - buf);
    }
    if (labels) out << ',' << (*labels)[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

// ---- manifest ----------------------------------------------------------------------

MultiSourceTask load_task(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("manifest " + manifest.string() + ": " + e.what());
  }
  std::vector<std::string> problems;
  if (!j.is_object()) throw ConfigurationError("manifest must be a JSON object");
  if (j.value("format", std::string("mfsan-task-1")) != "mfsan-task-1")
    problems.push_back("unsupported manifest format");
  if (!j.contains("num_classes") || !j["num_classes"].is_number_unsigned())
    problems.push_back("num_classes must be a nonnegative integer");
  if (!j.contains("sources") || !j["sources"].is_array() || j["sources"].empty())
    problems.push_back("sources must be a nonempty list of paths");
  if (!j.contains("target") || !j["target"].is_string()) problems.push_back("target must be a path");
  if (!problems.empty()) throw ValidationError(problems);

  const auto base = manifest.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  TrainingData training;
  training.num_classes = j["num_classes"].get<std::size_t>();
  CsvSchema schema;
  if (j.contains("feature_dim")) schema.feature_dim = j["feature_dim"].get<std::size_t>();
  for (std::size_t s = 0; s < j["sources"].size(); ++s) {
    CsvSchema src_schema = schema;
    src_schema.require_labels = true;
    auto dom = load_csv(resolve(j["sources"][s].get<std::string>()), src_schema);
    if (!schema.feature_dim) schema.feature_dim = dom.features.cols();
    training.sources.push_back({"source_" + std::to_string(s), std::move(dom.features), std::move(*dom.labels)});
  }
  auto tgt = load_csv(resolve(j["target"].get<std::string>()), schema);
  training.feature_dim = *schema.feature_dim;
  training.target = {"target", std::move(tgt.features)};
  return MultiSourceTask(std::move(training), std::move(tgt.labels));
}

std::vector<std::filesystem::path> write_task(const MultiSourceTask& task,
                                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& t = task.training();
  std::vector<std::filesystem::path> written;
  nlohmann::json j;
  j["format"] = "mfsan-task-1";
  j["num_classes"] = t.num_classes;
  j["feature_dim"] = t.feature_dim;
  j["sources"] = nlohmann::json::array();
  for (std::size_t s = 0; s < t.sources.size(); ++s) {
    const std::string file = "source_" + std::to_string(s) + ".csv";
    write_csv(dir / file, t.sources[s].features, &t.sources[s].labels);
    j["sources"].push_back(file);
    written.push_back(dir / file);
  }
  const std::vector<std::size_t>* tl =
      task.has_target_labels() ? &EvaluationAccess::target_labels(task) : nullptr;
  write_csv(dir / "target.csv", t.target.features, tl);
  written.push_back(dir / "target.csv");
  j["target"] = "target.csv";
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  written.push_back(dir / "manifest.json");
  return written;
}

// ---- sampling ----------------------------------------------------------------------

BatchSampler::BatchSampler(std::size_t domain_size, std::size_t batch_size, SamplingMode mode,
                           std::uint64_t seed)
    : n_(domain_size), m_(batch_size), mode_(mode), rng_(seed) {
  if (n_ == 0) throw ConfigurationError("cannot sample from an empty domain");
  if (m_ == 0) throw ConfigurationError("batch size must be positive");
  if (mode_ == SamplingMode::shuffle_epoch && m_ > n_)
    throw ConfigurationError("batch size " + std::to_string(m_) + " exceeds domain size " +
                             std::to_string(n_) + " in shuffle-epoch mode");
  if (mode_ == SamplingMode::shuffle_epoch) {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    cursor_ = n_;  // first call shuffles
  }
}

void BatchSampler::reshuffle() {
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  rng_.shuffle(std::span<std::size_t>(order_));
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next_indices() {
  std::vector<std::size_t> idx(m_);
  if (mode_ == SamplingMode::with_replacement) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng_.index(n_));
    return idx;
  }
  // An incomplete tail of an epoch is dropped.
  if (cursor_ + m_ > n_) reshuffle();
  std::copy_n(order_.begin() + static_cast<std::ptrdiff_t>(cursor_), m_, idx.begin());
  cursor_ += m_;
  return idx;
}

LabeledBatch BatchSampler::next(const LabeledDomain& d) {
  if (d.features.rows() != n_) throw ConfigurationError("sampler bound to a domain of different size");
  auto idx = next_indices();
  LabeledBatch b;
  b.features = d.features.gather_rows(idx);
  b.labels.reserve(idx.size());
  for (std::size_t i : idx) b.labels.push_back(d.labels[i]);
  return b;
}

Tensor BatchSampler::next(const UnlabeledDomain& d) {
  if (d.features.rows() != n_) throw ConfigurationError("sampler bound to a domain of different size");
  return d.features.gather_rows(next_indices());
}

void BatchSampler::write(BinaryWriter& w) const {
  w.u64(n_);
  w.u64(m_);
  w.u8(mode_ == SamplingMode::shuffle_epoch ? 0 : 1);
  w.bytes(rng_.state());
  w.u64(order_.size());
  for (std::size_t i : order_) w.u64(i);
  w.u64(cursor_);
}

void BatchSampler::read(BinaryReader& r) {
  const std::size_t n = static_cast<std::size_t>(r.u64());
  const std::size_t m = static_cast<std::size_t>(r.u64());
  const SamplingMode mode = r.u8() == 0 ? SamplingMode::shuffle_epoch : SamplingMode::with_replacement;
  if (n != n_ || m != m_ || mode != mode_)
    throw CheckpointError("sampler state does not match the configured sampler");
  Rng rng;
  try {
    rng.set_state(r.bytes());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  const std::uint64_t len = r.u64();
  if (len != order_.size()) throw CheckpointError("sampler permutation length mismatch");
  std::vector<std::size_t> order(len);
  for (auto& i : order) {
    i = static_cast<std::size_t>(r.u64());
    if (i >= n_) throw CheckpointError("sampler permutation index out of range");
  }
  const std::size_t cursor = static_cast<std::size_t>(r.u64());
  if (cursor > n_) throw CheckpointError("sampler cursor out of range");
  rng_ = rng;
  order_ = std::move(order);
  cursor_ = cursor;
}

std::string to_string(SamplingMode m) {
  return m == SamplingMode::shuffle_epoch ? "shuffle_epoch" : "with_replacement";
}

SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "shuffle_epoch") return SamplingMode::shuffle_epoch;
  if (s == "with_replacement") return SamplingMode::with_replacement;
  throw std::invalid_argument("unknown sampling mode '" + s + "' (expected shuffle_epoch or with_replacement)");
}

// ---- spec JSON ---------------------------------------------------------------------

void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                        const std::string& where) {
  if (!j.is_object()) throw ValidationError({where + ": expected a JSON object"});
  std::vector<std::string> problems;
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      std::string valid;
      for (const auto& k : known) valid += (valid.empty() ? "" : ", ") + k;
      problems.push_back(where + ": unknown key '" + key + "' (valid keys: " + valid + ")");
    }
  if (!problems.empty()) throw ValidationError(std::move(problems));
}

nlohmann::json to_json(const SyntheticSpec& s) {
  nlohmann::json t;
  t["num_classes"] = s.num_classes;
  t["feature_dim"] = s.feature_dim;
  t["samples_per_domain"] = s.samples_per_domain;
  t["class_separation"] = s.class_separation;
  t["mean_offset"] = s.mean_offset;
  t["class_cov_scale"] = s.class_cov_scale;
  t["noise_std"] = s.noise_std;
  t["seed"] = s.seed;
  nlohmann::json tr = nlohmann::json::array();
  for (const auto& a : s.domain_transforms)
    tr.push_back({{"angle_deg", a.angle_deg}, {"scale", a.scale}, {"translation", a.translation}});
  t["domain_transforms"] = tr;
  if (!s.class_means.empty()) t["class_means"] = s.class_means;
  return t;
}

SyntheticSpec synthetic_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"num_classes", "feature_dim", "samples_per_domain", "class_separation",
                         "mean_offset", "class_cov_scale", "noise_std", "seed", "domain_transforms",
                         "class_means"},
                     "synthetic task");
  SyntheticSpec s;
  try {
    if (j.contains("num_classes")) s.num_classes = j["num_classes"].get<std::size_t>();
    if (j.contains("feature_dim")) s.feature_dim = j["feature_dim"].get<std::size_t>();
    if (j.contains("samples_per_domain")) s.samples_per_domain = j["samples_per_domain"].get<std::size_t>();
    if (j.contains("class_separation")) s.class_separation = j["class_separation"].get<double>();
    if (j.contains("mean_offset")) s.mean_offset = j["mean_offset"].get<double>();
    if (j.contains("class_cov_scale")) s.class_cov_scale = j["class_cov_scale"].get<double>();
    if (j.contains("noise_std")) s.noise_std = j["noise_std"].get<double>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("class_means")) s.class_means = j["class_means"].get<std::vector<std::vector<double>>>();
    if (j.contains("domain_transforms")) {
      s.domain_transforms.clear();
      for (const auto& t : j["domain_transforms"]) {
        require_known_keys(t, {"angle_deg", "scale", "translation"}, "domain transform");
        AffineTransform a;
        a.angle_deg = t.value("angle_deg", 0.0);
        a.scale = t.value("scale", 1.0);
        if (t.contains("translation")) a.translation = t["translation"].get<std::vector<double>>();
        s.domain_transforms.push_back(std::move(a));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({std::string("synthetic task: ") + e.what()});
  }
  return s;
}

}  // namespace mfsan
