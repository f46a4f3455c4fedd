// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "ctlab/io.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ctlab;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run ctlab_run(const std::string& args) {
  const std::string cmd = std::string(CTLAB_EXE) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (const auto n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "ctlab_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    io::write_text(d / "tiny.conf",
                   "train_problems = 60\neval_problems = 10\nmodel.context = 8\nmodel.embed = 16\n"
                   "model.hidden = 32\nsft.learning_rate = 0.05\nsft.epochs = 40\nsampling.samples = 4\nrollout.samples = 8\n"
                   "identify.instances = 3\nk_list = 1,2,4,8\npref.epochs = 1\npref.batch_size = 8\n");
    return d;
  }();
  return dir;
}

std::string tiny(const std::string& out) {
  return "--config " + (workdir() / "tiny.conf").string() + " --out " + (workdir() / out).string() +
         " --quiet";
}

}  // namespace

TEST_CASE("cost model output", "[cli]") {
  const auto r = ctlab_run("cost-model --preset gsm8k --n 7500");
  CHECK(r.code == 0);
  CHECK(r.out.find("0.002%") != std::string::npos);
  CHECK(r.out.find("gsm8k") != std::string::npos);
  const auto all = ctlab_run("cost-model --preset all --n 7500");
  CHECK(all.code == 0);
  CHECK(all.out.find("math") != std::string::npos);
}

TEST_CASE("usage errors", "[cli]") {
  CHECK(ctlab_run("").code != 0);
  CHECK(ctlab_run("frobnicate").code != 0);
  CHECK(ctlab_run("train-pref --method ppo").code != 0);
  CHECK(ctlab_run("cost-model --preset imagenet").code != 0);
  CHECK(ctlab_run("--help").code == 0);
}

TEST_CASE("config errors exit with 2", "[cli]") {
  io::write_text(workdir() / "bad.conf", "no_such_key = 1\n");
  CHECK(ctlab_run("gen --config " + (workdir() / "bad.conf").string()).code == 2);
  CHECK(ctlab_run("gen --k-list 0,1 --quiet --out " + (workdir() / "x").string()).code == 2);
  CHECK(ctlab_run("gen --config " + (workdir() / "absent.conf").string()).code == 3);
}

TEST_CASE("stage errors map to exit codes", "[cli]") {
  const auto dir = workdir() / "stages";
  fs::remove_all(dir);
  REQUIRE(ctlab_run("gen " + tiny("stages")).code == 0);
  CHECK(ctlab_run("sample " + tiny("stages")).code == 3);  // no base.ckpt yet
  REQUIRE(ctlab_run("sft " + tiny("stages")).code == 0);
  REQUIRE(fs::exists(dir / "base.ckpt"));

  SECTION("stale") {
    io::write_text(dir / "train_problems.jsonl", io::read_text(dir / "train_problems.jsonl") + "\n");
    CHECK(ctlab_run("sample " + tiny("stages")).code == 4);
  }
  auto reseal = [&](const std::string& file) {
    auto m = pipeline::RunManifest::from_json(io::read_text(dir / "manifest.json"));
    const auto text = io::read_text(dir / file);
    m.artifacts[file] = {io::crc_hex(io::crc32_of(text)), text.size()};
    io::write_text(dir / "manifest.json", m.to_json());
  };
  SECTION("vocabulary") {
    nanolm::save_checkpoint(nanolm::ModelParams({minimath::kVocabSize + 2, 8, 16, 32}), dir / "base.ckpt");
    reseal("base.ckpt");
    CHECK(ctlab_run("sample " + tiny("stages")).code == 5);
  }
  SECTION("checkpoint") {
    io::write_text(dir / "base.ckpt", "CTL0 garbage");
    reseal("base.ckpt");
    CHECK(ctlab_run("sample " + tiny("stages")).code == 6);
  }
  SECTION("format") {
    io::write_text(dir / "train_problems.jsonl", "not json\n");
    reseal("train_problems.jsonl");
    CHECK(ctlab_run("sample " + tiny("stages")).code == 7);
  }
}

TEST_CASE("pipeline subcommand", "[cli][slow]") {
  const auto r = ctlab_run("pipeline --method cdpo --seed 3 " + tiny("pipe"));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("critical-token identification") != std::string::npos);
  const auto m = pipeline::RunManifest::from_json(io::read_text(workdir() / "pipe" / "manifest.json"));
  CHECK(m.artifacts.count("policy_cdpo.ckpt") == 1);
  CHECK(m.artifacts.count("policy_dpo.ckpt") == 0);
  CHECK(m.config.find("seed = 3") != std::string::npos);

  const auto eval = ctlab_run("eval --method cdpo --n-samples 2 --k-list 1,2 --seed 3 " + tiny("pipe"));
  CHECK(eval.code == 0);
  CHECK(io::read_text(workdir() / "pipe" / "eval_cdpo.json").find("pass_at_k") != std::string::npos);
}
