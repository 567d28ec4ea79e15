#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mfsan/harness.hpp"

using namespace mfsan;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path workdir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "mfsan_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

// Runs the CLI inside the work directory; stdout and stderr are captured together.
Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = "cd '" + workdir().string() + "' && " + env + " '" MFSAN_CLI_PATH "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

nlohmann::json resolved_block(const std::string& out) {
  const auto start = out.find("resolved config:\n");
  REQUIRE(start != std::string::npos);
  const auto body = start + std::string("resolved config:\n").size();
  const auto end = out.find("\n}\n", body);
  REQUIRE(end != std::string::npos);
  return nlohmann::json::parse(out.substr(body, end + 2 - body));
}

}  // namespace

TEST_CASE("generate writes the default task") {
  const Result r = run("generate --out gen_default");
  CHECK(r.code == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(workdir() / "gen_default")) files += e.is_regular_file();
  CHECK(files == 4);
  CHECK(r.out.find("seed 0") != std::string::npos);
}

TEST_CASE("generate is deterministic in the seed, which MFSAN_SEED can supply") {
  REQUIRE(run("generate --out gen_a --seed 7").code == 0);
  REQUIRE(run("generate --out gen_b seed=7").code == 0);
  REQUIRE(run("generate --out gen_env", "MFSAN_SEED=7").code == 0);
  REQUIRE(run("generate --out gen_env_over --seed 8", "MFSAN_SEED=7").code == 0);
  for (const char* f : {"source_0.csv", "source_1.csv", "target.csv", "manifest.json"}) {
    CHECK(slurp(workdir() / "gen_a" / f) == slurp(workdir() / "gen_b" / f));
    CHECK(slurp(workdir() / "gen_a" / f) == slurp(workdir() / "gen_env" / f));
  }
  CHECK(slurp(workdir() / "gen_a" / "target.csv") != slurp(workdir() / "gen_env_over" / "target.csv"));
}

TEST_CASE("validation failures exit with 2 and name the problem") {
  Result r = run("generate --out gen_bad --num-classes 0");
  CHECK(r.code == 2);
  CHECK(r.out.find("num_classes") != std::string::npos);

  r = run("generate --out gen_bad2 --no-such-key 3");
  CHECK(r.code == 2);
  CHECK(r.out.find("unknown key 'no-such-key'") != std::string::npos);
  CHECK(r.out.find("num-classes") != std::string::npos);

  r = run("generate --out gen_bad3 --num-classes three");
  CHECK(r.code == 2);

  r = run("experiment --spec missing.json --out exp_missing");
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(workdir() / "exp_missing"));
}

TEST_CASE("existing output directories need --force") {
  REQUIRE(run("generate --out gen_twice").code == 0);
  CHECK(run("generate --out gen_twice").code == 3);
  CHECK(run("generate --out gen_twice --force").code == 0);
}

TEST_CASE("train with zero iterations writes the initial model") {
  REQUIRE(run("generate --out task_small --samples-per-domain 40").code == 0);
  const Result r = run("train --task task_small/manifest.json --out train0 --iterations 0 --seed 3");
  REQUIRE(r.code == 0);
  const MfsanModel saved = load_model(workdir() / "train0" / "checkpoint.ckpt");
  Architecture arch;
  arch.input_dim = 8;
  arch.num_classes = 4;
  arch.num_sources = 2;
  CHECK(parameters_equal(saved, MfsanModel(arch, derive_seed(3, 1))));
}

TEST_CASE("method overrides show up in the resolved config") {
  const Result r = run("train --task task_small/manifest.json --out train_mmd --iterations 20 "
                       "--eval-every 10 --method mfsan_mmd --gamma 0.7");
  REQUIRE(r.code == 0);
  const auto j = resolved_block(r.out);
  CHECK(j["method"] == "mfsan_mmd");
  CHECK(j["train"]["gamma_base"] == 0.0);
  CHECK(j["train"]["lambda_base"] == 0.5);
  CHECK(j["train"]["ramp_formula"] == "2/(1+exp(-theta*p))-1");
  CHECK(j["train"]["lr_formula"] == "eta0/(1+alpha*p)^beta");
  // The config block comes before any training output.
  CHECK(r.out.find("resolved config") < r.out.find("iter "));
  std::ifstream log(workdir() / "train_mmd" / "log.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  CHECK(lines == 2);
}

TEST_CASE("train resumes from its checkpoint") {
  REQUIRE(run("train --task task_small/manifest.json --out straight --iterations 40 --eval-every 20").code == 0);
  REQUIRE(run("train --task task_small/manifest.json --out paused --iterations 40 --eval-every 20 --stop-at 20")
              .code == 0);
  const MfsanModel straight = load_model(workdir() / "straight" / "checkpoint.ckpt");
  CHECK_FALSE(parameters_equal(load_model(workdir() / "paused" / "checkpoint.ckpt"), straight));
  REQUIRE(run("train --task task_small/manifest.json --out paused --force --iterations 40 --eval-every 20 "
              "--resume paused/checkpoint.ckpt").code == 0);
  CHECK(parameters_equal(load_model(workdir() / "paused" / "checkpoint.ckpt"), straight));
  CHECK(slurp(workdir() / "paused" / "log.jsonl") == slurp(workdir() / "straight" / "log.jsonl"));
}

TEST_CASE("divergence exits with 4") {
  const Result r = run("train --task task_small/manifest.json --out diverge --iterations 200 --eta0 1e6");
  CHECK(r.code == 4);
  CHECK(fs::exists(workdir() / "diverge" / "diverged.ckpt"));
}

TEST_CASE("unreadable inputs exit with 5") {
  std::ofstream(workdir() / "junk.ckpt") << "not a checkpoint";
  const Result r = run("export-embeddings --checkpoint junk.ckpt --task task_small/manifest.json --out emb_bad");
  CHECK(r.code == 5);
}

TEST_CASE("a one-seed no_adapt experiment on an unshifted task is quick") {
  std::ofstream(workdir() / "noshift.json") << R"({
    "method": "no_adapt",
    "seeds": [0],
    "task": {"synthetic": {"domain_transforms": [{"angle_deg": 0}, {"angle_deg": 0}, {"angle_deg": 0}]}}
  })";
  const auto t0 = std::chrono::steady_clock::now();
  const Result r = run("experiment --spec noshift.json --out exp_noshift");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(r.code == 0);
  CHECK(secs < 60.0);
  CHECK(fs::exists(workdir() / "exp_noshift" / "no_adapt" / "summary.json"));
  CHECK(fs::exists(workdir() / "exp_noshift" / "no_adapt" / "0" / "log.jsonl"));
}

TEST_CASE("the printed resolved config reproduces an experiment") {
  std::ofstream(workdir() / "small.json") << R"({
    "methods": ["mfsan", "mfsan_mmd"],
    "seeds": [1],
    "task": {"synthetic": {"samples_per_domain": 60}},
    "train": {"iterations": 40, "eval_every": 20, "batch_size": 8}
  })";
  const Result first = run("experiment --spec small.json --out exp_first");
  REQUIRE(first.code == 0);
  CHECK(fs::exists(workdir() / "exp_first" / "table4.csv"));
  std::ofstream(workdir() / "refed.json") << resolved_block(first.out).dump(2);
  const Result second = run("experiment --spec refed.json --out exp_second");
  REQUIRE(second.code == 0);
  for (const char* m : {"mfsan", "mfsan_mmd"})
    CHECK(slurp(workdir() / "exp_first" / m / "1" / "log.jsonl") ==
          slurp(workdir() / "exp_second" / m / "1" / "log.jsonl"));
  CHECK(slurp(workdir() / "exp_first" / "table4.csv") == slurp(workdir() / "exp_second" / "table4.csv"));
}

TEST_CASE("sweep and embedding export") {
  const Result s = run("sweep --out sweep1 --values 0.1,1 --iterations 20 --eval-every 10 --samples-per-domain 40");
  REQUIRE(s.code == 0);
  std::ifstream csv(workdir() / "sweep1" / "sweep_lambda.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  CHECK(lines == 3);

  const Result e = run("export-embeddings --checkpoint train_mmd/checkpoint.ckpt --task task_small/manifest.json --out emb");
  REQUIRE(e.code == 0);
  CHECK(fs::exists(workdir() / "emb" / "embeddings_branch0.csv"));
  CHECK(fs::exists(workdir() / "emb" / "embeddings_branch1.csv"));
}
