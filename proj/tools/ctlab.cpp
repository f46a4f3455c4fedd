// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctlab/contrastive.hpp"
#include "ctlab/io.hpp"
#include "ctlab/pipeline.hpp"

namespace {

using namespace ctlab;

struct Flags {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<double> beta;
  std::optional<double> gamma;
  std::optional<std::size_t> n_samples;
  std::optional<std::string> k_list;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> n;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--method", f.method, "preference method")->check(CLI::IsMember({"dpo", "rpo", "cdpo"}));
  cmd->add_option("--beta", f.beta, "contrastive estimation beta");
  cmd->add_option("--gamma", f.gamma, "KL coefficient gamma");
  cmd->add_option("--n-samples", f.n_samples, "samples per eval problem");
  cmd->add_option("--k-list", f.k_list, "comma-separated pass@k values");
  cmd->add_option("--preset", f.preset, "cost-model preset")->check(CLI::IsMember({"gsm8k", "math", "all"}));
  cmd->add_option("--n", f.n, "examples to annotate (cost model)");
  cmd->add_option("--set", f.overrides, "extra key=value config override (repeatable)");
  cmd->add_flag("--quiet", f.quiet, "no progress output");
}

pipeline::ExperimentConfig build_config(const Flags& f) {
  pipeline::ExperimentConfig c;
  if (f.config) c = pipeline::load_config(*f.config, c);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw pipeline::ConfigError("--set expects key=value, got " + kv);
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out_dir = *f.out;
  if (f.beta) c.beta = *f.beta;
  if (f.gamma) c.pref.gamma = *f.gamma;
  if (f.n_samples) c.eval_samples = *f.n_samples;
  if (f.k_list) c.set("k_list", *f.k_list);
  if (f.preset) c.cost_preset = *f.preset;
  if (f.n) c.cost_n = *f.n;
  if (f.method) c.pref.method = prefopt::parse_method(*f.method);
  c.verbose = !f.quiet;
  c.validate();
  return c;
}

int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "ctlab: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"critical-token lab"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "generate train and eval problems"},
      {"sft", "train the base model on gold trajectories"},
      {"sample", "sample the trajectory pool"},
      {"identify", "rollout-based critical-token identification"},
      {"ce-train", "build the corpus split and train positive/negative models"},
      {"ce-score", "contrastive-estimation scores for every selected negative"},
      {"train-pref", "preference training (--method)"},
      {"eval", "greedy eval accuracy (base, or --method policy)"},
      {"impact", "pass@k with and without critical tokens"},
      {"analyze", "token analysis and summary report"},
      {"cost-model", "forward-pass cost model"},
      {"pipeline", "run every stage in order"},
  };
  for (const auto& [name, desc] : commands) add_flags(app.add_subcommand(name, desc), flags);
  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    auto config = build_config(flags);
    const std::optional<prefopt::Method> method =
        flags.method ? std::optional(prefopt::parse_method(*flags.method)) : std::nullopt;
    if (cmd == "gen") pipeline::run_gen(config);
    else if (cmd == "sft") pipeline::run_sft(config);
    else if (cmd == "sample") pipeline::run_sample(config);
    else if (cmd == "identify") pipeline::run_identify(config);
    else if (cmd == "ce-train") pipeline::run_ce_train(config);
    else if (cmd == "ce-score") pipeline::run_ce_score(config);
    else if (cmd == "train-pref") pipeline::run_train_pref(config, method.value_or(config.pref.method));
    else if (cmd == "eval") pipeline::run_eval(config, method);
    else if (cmd == "impact") pipeline::run_impact(config);
    else if (cmd == "analyze") {
      pipeline::run_analyze(config);
      std::cout << io::read_text(config.out_dir / "analysis.txt");
    } else if (cmd == "cost-model") {
      const auto rows = pipeline::preset_cost_rows(config.cost_preset, config.cost_n);
      std::cout << contrastive::format_cost_table(rows);
      if (flags.out) pipeline::run_cost_model(config);
    } else if (cmd == "pipeline") {
      if (method) config.methods = {*method};
      pipeline::run_pipeline(config);
      std::cout << io::read_text(config.out_dir / "analysis.txt");
    }
  } catch (const pipeline::ConfigError& e) {
    return report("invalid config", e, 2);
  } catch (const io::MissingFileError& e) {
    return report("missing input", e, 3);
  } catch (const pipeline::StaleInputError& e) {
    return report("stale input", e, 4);
  } catch (const pipeline::VocabularyMismatchError& e) {
    return report("vocabulary mismatch", e, 5);
  } catch (const contrastive::VocabularyMismatchError& e) {
    return report("vocabulary mismatch", e, 5);
  } catch (const nanolm::CheckpointError& e) {
    return report("checkpoint error", e, 6);
  } catch (const io::FormatError& e) {
    return report("malformed input", e, 7);
  } catch (const std::exception& e) {
    return report("error", e, 1);
  }
  return 0;
}
