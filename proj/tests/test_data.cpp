#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mfsan/data.hpp"

using namespace mfsan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mfsan_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Compile-time check that target labels are unreachable from training data.
template <typename T>
concept ExposesLabels = requires(const T& t) { t.labels; };
template <typename T>
concept TargetExposesLabels = requires(const T& t) { t.target.labels; };
template <typename T>
concept TaskExposesLabels = requires(const T& t) { t.target_labels(); };

}  // namespace

static_assert(ExposesLabels<LabeledDomain>);
static_assert(!ExposesLabels<UnlabeledDomain>);
static_assert(!TargetExposesLabels<TrainingData>);
static_assert(!TaskExposesLabels<MultiSourceTask>);

TEST_CASE("synthetic generation is balanced, shaped and seeded") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.samples_per_domain = 300;
  const MultiSourceTask task = generate_synthetic(spec);
  const TrainingData& d = task.training();
  REQUIRE(d.num_sources() == 2);
  CHECK(d.feature_dim == 8);
  for (const LabeledDomain& s : d.sources) {
    CHECK(s.features.shape() == Shape{300, 8});
    std::vector<std::size_t> counts(3);
    for (std::size_t l : s.labels) ++counts[l];
    CHECK(counts == std::vector<std::size_t>{100, 100, 100});
  }
  CHECK(d.target.features.rows() == 300);
  REQUIRE(task.has_target_labels());
  CHECK(EvaluationAccess::target_labels(task).size() == 300);

  const MultiSourceTask again = generate_synthetic(spec);
  CHECK(again.training().sources[1].features == d.sources[1].features);
  CHECK(again.training().target.features == d.target.features);
  spec.seed = 1;
  CHECK_FALSE(generate_synthetic(spec).training().target.features == d.target.features);
}

TEST_CASE("domains differ only by their transforms") {
  SyntheticSpec spec;
  spec.noise_std = 0.0;
  spec.class_cov_scale = 1e-12;
  spec.domain_transforms = {{0.0, 1.0, {}}, {90.0, 1.0, {}}, {0.0, 2.0, {}}};
  const auto means = resolved_class_means(spec);
  const MultiSourceTask task = generate_synthetic(spec);
  const auto& s0 = task.training().sources[0];
  const auto& s1 = task.training().sources[1];
  const auto& labels = EvaluationAccess::target_labels(task);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& mu = means[s0.labels[i]];
    for (std::size_t u = 0; u < 8; ++u) CHECK(s0.features.at(i, u) == doctest::Approx(mu[u]));
    // 90 degrees maps (a, b) to (-b, a) on each coordinate pair.
    const auto& mu1 = means[s1.labels[i]];
    CHECK(s1.features.at(i, 0) == doctest::Approx(-mu1[1]));
    CHECK(s1.features.at(i, 1) == doctest::Approx(mu1[0]));
    const auto& mut = means[labels[i]];
    CHECK(task.training().target.features.at(i, 3) == doctest::Approx(2.0 * mut[3]));
  }
}

TEST_CASE("synthetic spec validation lists every problem") {
  SyntheticSpec spec;
  spec.num_classes = 1;
  spec.noise_std = -1.0;
  spec.domain_transforms = {{0.0, 1.0, {}}};
  try {
    spec.validate();
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.problems().size() >= 3);
  }
}

TEST_CASE("CSV round trip is exact") {
  const fs::path dir = fresh_dir("csv");
  const Tensor x = Tensor::matrix(3, 2, {0.1, -2.5e-300, 1.0 / 3.0, 12345.678, -0.0, 7.0});
  const std::vector<std::size_t> labels{2, 0, 1};
  write_csv(dir / "a.csv", x, &labels);
  const CsvDomain back = load_csv(dir / "a.csv", {2, true});
  CHECK(back.features == x);
  REQUIRE(back.labels);
  CHECK(*back.labels == labels);

  write_csv(dir / "b.csv", x, nullptr);
  const CsvDomain unl = load_csv(dir / "b.csv");
  CHECK(unl.features == x);
  CHECK_FALSE(unl.labels);
  CHECK_THROWS_AS(load_csv(dir / "b.csv", {2, true}), ParseError);
}

TEST_CASE("CSV errors carry the file line") {
  std::istringstream in("feature_0,feature_1,label\n1.0,inf,0\n");
  try {
    parse_csv(in, "bad.csv");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("bad.csv") != std::string::npos);
  }
  std::istringstream nan_in("feature_0,label\n1.0,0\nnan,1\n");
  CHECK_THROWS_AS(parse_csv(nan_in, "x"), ParseError);
  std::istringstream ragged("feature_0,feature_1\n1,2\n3\n");
  try {
    parse_csv(ragged, "r");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream wide("feature_0,feature_1\n1,2\n");
  CHECK_THROWS_AS(parse_csv(wide, "w", {3, false}), ParseError);
}

TEST_CASE("task manifest round trip") {
  SyntheticSpec spec;
  spec.samples_per_domain = 40;
  const MultiSourceTask task = generate_synthetic(spec);
  const fs::path dir = fresh_dir("manifest");
  const auto files = write_task(task, dir);
  CHECK(files.size() == 4);
  const MultiSourceTask back = load_task(dir / "manifest.json");
  CHECK(back.num_sources() == 2);
  CHECK(back.training().sources[0].features == task.training().sources[0].features);
  CHECK(back.training().sources[1].labels == task.training().sources[1].labels);
  CHECK(back.training().target.features == task.training().target.features);
  CHECK(EvaluationAccess::target_labels(back) == EvaluationAccess::target_labels(task));

  std::ofstream(dir / "broken.json") << R"({"format": "mfsan-task-1", "num_classes": 4})";
  CHECK_THROWS(load_task(dir / "broken.json"));
}

TEST_CASE("evaluation access without labels is an error") {
  TrainingData d;
  d.num_classes = 2;
  d.feature_dim = 1;
  d.sources.push_back({"s", Tensor::matrix(2, 1, {0, 1}), {0, 1}});
  d.target = {"t", Tensor::matrix(2, 1, {0, 1})};
  const MultiSourceTask task(d, std::nullopt);
  CHECK_FALSE(task.has_target_labels());
  CHECK_THROWS(EvaluationAccess::target_labels(task));
}

TEST_CASE("epoch sampler partitions each epoch") {
  BatchSampler s(10, 3, SamplingMode::shuffle_epoch, 5);
  for (int epoch = 0; epoch < 4; ++epoch) {
    std::multiset<std::size_t> seen;
    for (int b = 0; b < 3; ++b) {
      const auto idx = s.next_indices();
      CHECK(idx.size() == 3);
      seen.insert(idx.begin(), idx.end());
    }
    // 3 full batches of a 10-element epoch; the remainder is dropped.
    CHECK(seen.size() == 9);
    for (std::size_t v : seen) CHECK(seen.count(v) == 1);
  }
  CHECK_THROWS_AS(BatchSampler(3, 4, SamplingMode::shuffle_epoch, 0), ConfigurationError);
}

TEST_CASE("samplers are deterministic and serialisable") {
  BatchSampler a(50, 8, SamplingMode::shuffle_epoch, 9), b(50, 8, SamplingMode::shuffle_epoch, 9);
  for (int i = 0; i < 20; ++i) CHECK(a.next_indices() == b.next_indices());

  std::stringstream buf;
  BinaryWriter w(buf);
  a.write(w);
  BatchSampler c(50, 8, SamplingMode::shuffle_epoch, 0);
  BinaryReader r(buf);
  c.read(r);
  CHECK(c == a);
  for (int i = 0; i < 10; ++i) CHECK(c.next_indices() == a.next_indices());
}

TEST_CASE("with-replacement sampler covers the domain") {
  BatchSampler s(20, 5, SamplingMode::with_replacement, 3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 100; ++i)
    for (std::size_t v : s.next_indices()) {
      CHECK(v < 20);
      seen.insert(v);
    }
  CHECK(seen.size() == 20);
  // Batches larger than the domain are allowed here.
  CHECK_NOTHROW(BatchSampler(3, 8, SamplingMode::with_replacement, 0));
}

TEST_CASE("labeled batches keep rows and labels together") {
  LabeledDomain d{"s", Tensor::matrix(6, 1, {0, 1, 2, 3, 4, 5}), {0, 1, 2, 3, 4, 5}};
  BatchSampler s(6, 4, SamplingMode::shuffle_epoch, 1);
  for (int i = 0; i < 5; ++i) {
    const LabeledBatch b = s.next(d);
    for (std::size_t r = 0; r < 4; ++r) CHECK(b.features.at(r, 0) == static_cast<double>(b.labels[r]));
  }
}

TEST_CASE("rng streams are stable") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  const std::string st = a.state();
  const double next = a.uniform();
  b.set_state(st);
  CHECK(b.uniform() == next);
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}
