// SPDX-License-Identifier: Apache-2.0
#include "ctlab/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "ctlab/io.hpp"
#include "ctlab/parallel.hpp"
#include "ctlab/rng.hpp"
#include "json.hpp"

namespace ctlab::pipeline {

using nlohmann::json;
using prefopt::Method;

// --- configuration ---------------------------------------------------------

namespace {

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config: cannot parse value '" + std::string(text) + "' for key " +
                      std::string(key));
  }
  return value;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find(',', pos);
    const auto item = trim(text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos));
    if (!item.empty()) out.push_back(item);
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return out;
}

struct Field {
  ConfigKey doc;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field num_field(std::string key, std::string desc, T ExperimentConfig::*member) {
  return {{key, std::move(desc)},
          [key, member](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<T>(key, v); },
          [member](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename S, typename T>
Field nested_field(std::string key, std::string desc, S ExperimentConfig::*outer, T S::*inner) {
  return {{key, std::move(desc)},
          [key, outer, inner](ExperimentConfig& c, std::string_view v) {
            (c.*outer).*inner = parse_number<T>(key, v);
          },
          [outer, inner](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double((c.*outer).*inner);
            else return std::to_string((c.*outer).*inner);
          }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(num_field("seed", "master seed", &C::seed));
    f.push_back(num_field("train_problems", "number of training problems", &C::train_problems));
    f.push_back(num_field("eval_problems", "number of evaluation problems", &C::eval_problems));
    f.push_back(num_field("train_first_id", "first training problem id", &C::train_first_id));
    f.push_back(num_field("eval_first_id", "first evaluation problem id", &C::eval_first_id));
    f.push_back(nested_field("model.context", "context window K", &C::model, &nanolm::ModelConfig::context));
    f.push_back(nested_field("model.embed", "embedding dim d", &C::model, &nanolm::ModelConfig::embed));
    f.push_back(nested_field("model.hidden", "hidden dim h", &C::model, &nanolm::ModelConfig::hidden));
    f.push_back(nested_field("sft.learning_rate", "base SFT learning rate", &C::sft, &nanolm::TrainConfig::learning_rate));
    f.push_back(nested_field("sft.epochs", "base SFT epochs", &C::sft, &nanolm::TrainConfig::epochs));
    f.push_back(nested_field("sft.batch_size", "base SFT batch size", &C::sft, &nanolm::TrainConfig::batch_size));
    f.push_back(nested_field("ce.learning_rate", "positive/negative model learning rate", &C::ce, &nanolm::TrainConfig::learning_rate));
    f.push_back(nested_field("ce.epochs", "positive/negative model epochs", &C::ce, &nanolm::TrainConfig::epochs));
    f.push_back(nested_field("ce.batch_size", "positive/negative model batch size", &C::ce, &nanolm::TrainConfig::batch_size));
    f.push_back(nested_field("sampling.samples", "trajectories sampled per training problem", &C::sampling, &contrastive::SamplingConfig::samples_per_problem));
    f.push_back(nested_field("sampling.max_len", "max completion tokens when sampling", &C::sampling, &contrastive::SamplingConfig::max_len));
    f.push_back(nested_field("sampling.temperature", "sampling temperature", &C::sampling, &contrastive::SamplingConfig::temperature));
    f.push_back(nested_field("rollout.samples", "rollouts per position", &C::rollout, &rollout::RolloutConfig::samples));
    f.push_back(nested_field("rollout.max_len", "max completion tokens per rollout", &C::rollout, &rollout::RolloutConfig::max_len));
    f.push_back(nested_field("rollout.temperature", "rollout temperature", &C::rollout, &rollout::RolloutConfig::temperature));
    f.push_back(nested_field("rollout.threshold_zero", "score threshold of the critical token", &C::rollout, &rollout::RolloutConfig::threshold_zero));
    f.push_back(nested_field("rollout.threshold_tail", "strict upper bound on later scores", &C::rollout, &rollout::RolloutConfig::threshold_tail));
    f.push_back(num_field("identify.instances", "incorrect trajectories scored by rollout", &C::identify_instances));
    f.push_back({{"k_list", "comma-separated k values for pass@k"},
                 [](C& c, std::string_view v) {
                   c.ks.clear();
                   for (const auto& item : split_list(v)) c.ks.push_back(parse_number<std::size_t>("k_list", item));
                 },
                 [](const C& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.ks.size(); ++i) s += (i ? "," : "") + std::to_string(c.ks[i]);
                   return s;
                 }});
    f.push_back(num_field("beta", "contrastive estimation beta", &C::beta));
    f.push_back({{"methods", "comma-separated preference methods run by pipeline"},
                 [](C& c, std::string_view v) {
                   c.methods.clear();
                   try {
                     for (const auto& item : split_list(v)) c.methods.push_back(prefopt::parse_method(item));
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const C& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.methods.size(); ++i) {
                     s += (i ? "," : "") + std::string(prefopt::method_name(c.methods[i]));
                   }
                   return s;
                 }});
    f.push_back(nested_field("pref.gamma", "KL coefficient gamma", &C::pref, &prefopt::PrefOptConfig::gamma));
    f.push_back(nested_field("pref.rpo_alpha", "RPO NLL coefficient", &C::pref, &prefopt::PrefOptConfig::rpo_alpha));
    f.push_back(nested_field("pref.learning_rate", "dpo/rpo learning rate", &C::pref, &prefopt::PrefOptConfig::learning_rate));
    f.push_back(nested_field("pref.cdpo_lr_multiplier", "cdpo learning rate multiplier", &C::pref, &prefopt::PrefOptConfig::cdpo_lr_multiplier));
    f.push_back(nested_field("pref.epochs", "preference epochs", &C::pref, &prefopt::PrefOptConfig::epochs));
    f.push_back(nested_field("pref.batch_size", "preference batch size", &C::pref, &prefopt::PrefOptConfig::batch_size));
    f.push_back(nested_field("pref.probe_size", "curve probe pairs", &C::pref, &prefopt::PrefOptConfig::probe_size));
    f.push_back(num_field("eval.n_samples", "samples per eval problem (pass@k when > 1)", &C::eval_samples));
    f.push_back({{"cost.preset", "cost-model preset: gsm8k, math or all"},
                 [](C& c, std::string_view v) { c.cost_preset = trim(v); },
                 [](const C& c) { return c.cost_preset; }});
    f.push_back(num_field("cost.n", "examples to annotate in the cost model", &C::cost_n));
    return f;
  }();
  return table;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.doc);
    return out;
  }();
  return schema;
}

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.doc.key == key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key " + std::string(key));
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.doc.key + " = " + f.get(*this) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& check, const char* what) {
    try {
      check();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(what) + ": " + e.what());
    }
  };
  if (train_problems == 0) throw ConfigError("train_problems must be >= 1");
  if (eval_problems == 0) throw ConfigError("eval_problems must be >= 1");
  if (train_first_id < 0 || eval_first_id < 0) throw ConfigError("problem ids must be >= 0");
  if (eval_first_id < train_first_id + static_cast<std::int64_t>(train_problems)) {
    throw ConfigError("eval ids must start after the train id range");
  }
  if (model.vocab_size != minimath::kVocabSize) {
    throw ConfigError("model vocab_size must equal the MiniMath vocabulary size");
  }
  wrap([&] { model.validate(); }, "model");
  wrap([&] { sft.validate(); }, "sft");
  wrap([&] { ce.validate(); }, "ce");
  wrap([&] { rollout.validate(); }, "rollout");
  wrap([&] { pref.validate(); }, "pref");
  if (sampling.samples_per_problem == 0) throw ConfigError("sampling.samples must be >= 1");
  if (sampling.max_len == 0) throw ConfigError("sampling.max_len must be >= 1");
  if (!(sampling.temperature > 0.0)) throw ConfigError("sampling.temperature must be > 0");
  if (identify_instances == 0) throw ConfigError("identify.instances must be >= 1");
  if (ks.empty()) throw ConfigError("k_list must not be empty");
  for (const auto k : ks) {
    if (k < 1 || k > rollout.samples) throw ConfigError("k_list values must lie in [1, rollout.samples]");
  }
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (methods.empty()) throw ConfigError("methods must not be empty");
  if (eval_samples == 0) throw ConfigError("eval.n_samples must be >= 1");
  if (cost_preset != "gsm8k" && cost_preset != "math" && cost_preset != "all") {
    throw ConfigError("cost.preset must be gsm8k, math or all");
  }
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    std::string line(text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos));
    pos = end == std::string_view::npos ? text.size() : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    base.set(trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  return parse_config(io::read_text(path), std::move(base));
}

// --- manifest --------------------------------------------------------------

std::string RunManifest::to_json() const {
  json j = json::parse(deterministic_json());
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j.dump(2) + "\n";
}

std::string RunManifest::deterministic_json() const {
  json arts = json::object();
  for (const auto& [name, rec] : artifacts) arts[name] = {{"crc32", rec.crc32}, {"bytes", rec.bytes}};
  json ctrs = json::object();
  for (const auto& [name, rec] : counters) {
    ctrs[name] = {{"forward_passes", rec.forward_passes}, {"analytic", rec.analytic}};
  }
  json j = {{"config", config}, {"artifacts", arts}, {"counters", ctrs}};
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(std::string_view text) {
  RunManifest m;
  try {
    const auto j = json::parse(text);
    m.config = j.at("config").get<std::string>();
    for (const auto& [name, rec] : j.at("artifacts").items()) {
      m.artifacts[name] = {rec.at("crc32").get<std::string>(), rec.at("bytes").get<std::uint64_t>()};
    }
    for (const auto& [name, rec] : j.at("counters").items()) {
      m.counters[name] = {rec.at("forward_passes").get<std::uint64_t>(),
                          rec.at("analytic").get<std::uint64_t>()};
    }
    if (j.contains("wall_clock_seconds")) {
      m.wall_clock_seconds = j.at("wall_clock_seconds").get<std::map<std::string, double>>();
    }
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

// --- evaluation ------------------------------------------------------------

AccuracyReport evaluate_accuracy(const nanolm::Model& model,
                                 std::span<const minimath::Problem> problems,
                                 std::size_t n_samples, std::uint64_t seed,
                                 std::span<const std::size_t> ks, std::size_t max_len) {
  if (problems.empty()) throw std::invalid_argument("evaluate_accuracy: empty problem set");
  if (n_samples == 0) throw std::invalid_argument("evaluate_accuracy: n_samples must be >= 1");

  std::vector<std::uint8_t> greedy(problems.size());
  std::vector<std::size_t> sample_correct(problems.size());
  std::vector<std::uint64_t> tokens(problems.size());
  parallel_for(problems.size(), [&](std::size_t i) {
    const auto& p = problems[i];
    const auto prompt = minimath::render_prompt(p);
    const auto completion = rollout::greedy_completion(model, prompt, max_len);
    tokens[i] = completion.size();
    greedy[i] = minimath::verify(p, completion).correct;
    if (n_samples > 1) {
      for (std::size_t j = 0; j < n_samples; ++j) {
        Rng rng(derive_seed(seed, Stage::eval, static_cast<std::uint64_t>(p.id), j));
        const auto s = rollout::sample_completion(model, prompt, rng, max_len, 1.0);
        tokens[i] += s.size();
        sample_correct[i] += minimath::verify(p, s).correct;
      }
    }
  });

  AccuracyReport r;
  r.total = problems.size();
  r.n_samples = n_samples;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    r.correct += greedy[i];
    r.generated_tokens += tokens[i];
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  if (n_samples > 1) {
    for (const auto k : ks) {
      if (k > n_samples) continue;
      double sum = 0.0;
      for (const auto c : sample_correct) sum += rollout::pass_at_k(n_samples, c, k);
      r.ks.push_back(k);
      r.pass_at_k.push_back(sum / static_cast<double>(problems.size()));
    }
  }
  return r;
}

std::vector<minimath::Problem> generate_eval_problems(std::uint64_t seed, std::int64_t first_id,
                                                      std::size_t count,
                                                      std::span<const minimath::Problem> train) {
  auto key = [](const minimath::Problem& p) {
    std::string k = std::to_string(p.start);
    for (const auto& s : p.steps) k += static_cast<char>(s.op) + std::to_string(s.operand);
    return k;
  };
  std::set<std::string> seen;
  for (const auto& p : train) seen.insert(key(p));
  std::vector<minimath::Problem> out;
  for (std::int64_t id = first_id; out.size() < count; ++id) {
    auto p = minimath::generate_problems(seed, id, 1).front();
    if (seen.insert(key(p)).second) out.push_back(std::move(p));
  }
  return out;
}

// --- stages ----------------------------------------------------------------

std::string policy_file(Method method) { return "policy_" + std::string(prefopt::method_name(method)) + ".ckpt"; }
std::string curve_file(Method method) { return "curve_" + std::string(prefopt::method_name(method)) + ".csv"; }
std::string eval_file(std::optional<Method> method) {
  return "eval_" + (method ? std::string(prefopt::method_name(*method)) : std::string("base")) + ".json";
}

namespace {

constexpr const char* kManifest = "manifest.json";

class StageRun {
 public:
  StageRun(const ExperimentConfig& config, std::string name)
      : config_(config), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {
    config_.validate();
    std::filesystem::create_directories(config_.out_dir);
    const auto path = config_.out_dir / kManifest;
    if (std::filesystem::exists(path)) manifest_ = RunManifest::from_json(io::read_text(path));
    log("start");
  }

  std::string input(const std::string& file) const {
    const auto path = config_.out_dir / file;
    if (!std::filesystem::exists(path)) {
      throw io::MissingFileError("stage " + name_ + ": missing input file " + path.string());
    }
    const auto it = manifest_.artifacts.find(file);
    if (it == manifest_.artifacts.end()) {
      throw StaleInputError("stage " + name_ + ": input " + file + " is not recorded in " + kManifest);
    }
    auto text = io::read_text(path);
    if (io::crc_hex(io::crc32_of(text)) != it->second.crc32) {
      throw StaleInputError("stage " + name_ + ": input " + file +
                            " does not match its recorded checksum (stale or modified)");
    }
    return text;
  }

  bool has(const std::string& file) const {
    return manifest_.artifacts.count(file) && std::filesystem::exists(config_.out_dir / file);
  }

  nanolm::ModelParams checkpoint(const std::string& file) const {
    const auto text = input(file);
    auto params = nanolm::decode_checkpoint(
        std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    if (params.config.vocab_size != config_.model.vocab_size) {
      throw VocabularyMismatchError("checkpoint " + file + " has vocabulary size " +
                                    std::to_string(params.config.vocab_size) + ", expected " +
                                    std::to_string(config_.model.vocab_size));
    }
    if (!(params.config == config_.model)) {
      throw nanolm::DimensionMismatchError("checkpoint " + file +
                                           " dimensions do not match the configured model");
    }
    return params;
  }

  void output(const std::string& file, std::string_view text) {
    io::write_text(config_.out_dir / file, text);
    manifest_.artifacts[file] = {io::crc_hex(io::crc32_of(text)), text.size()};
  }

  void output_checkpoint(const std::string& file, const nanolm::ModelParams& params) {
    const auto bytes = nanolm::encode_checkpoint(params);
    output(file, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }

  void counter(const std::string& key, std::uint64_t measured, std::uint64_t analytic) {
    manifest_.counters[key] = {measured, analytic};
    log(key + " forward passes: " + std::to_string(measured) + " (analytic " + std::to_string(analytic) + ")");
  }

  void log(const std::string& msg) const {
    if (config_.verbose) std::fprintf(stderr, "[ctlab %s] %s\n", name_.c_str(), msg.c_str());
  }

  RunManifest finish() {
    manifest_.config = config_.to_text();
    manifest_.wall_clock_seconds[name_] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    io::write_text(config_.out_dir / kManifest, manifest_.to_json());
    log("done in " + fmt_double(manifest_.wall_clock_seconds[name_]).substr(0, 6) + " s");
    return manifest_;
  }

  const RunManifest& manifest() const { return manifest_; }

 private:
  const ExperimentConfig& config_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  RunManifest manifest_;
};

std::unordered_map<std::int64_t, minimath::Problem> by_id(std::span<const minimath::Problem> ps) {
  std::unordered_map<std::int64_t, minimath::Problem> out;
  for (const auto& p : ps) out.emplace(p.id, p);
  return out;
}

std::uint64_t token_total(std::span<const minimath::Trajectory> ts) {
  std::uint64_t n = 0;
  for (const auto& t : ts) n += t.tokens.size();
  return n;
}

std::vector<contrastive::TokenScoreVector> score_all(
    const nanolm::Model& pos, const nanolm::Model& neg,
    const std::unordered_map<std::int64_t, minimath::Problem>& problems,
    const std::vector<std::pair<std::int64_t, const minimath::TokenSeq*>>& items, double beta) {
  std::vector<contrastive::TokenScoreVector> out(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& problem = problems.at(items[i].first);
    out[i] = contrastive::ce_scores(pos, neg, problem.id, minimath::render_prompt(problem),
                                    *items[i].second, beta);
  });
  return out;
}

std::string method_list(const ExperimentConfig& c) {
  std::string s;
  for (const auto m : c.methods) s += std::string(s.empty() ? "" : ",") + std::string(prefopt::method_name(m));
  return s;
}

}  // namespace

void run_gen(const ExperimentConfig& config) {
  StageRun st(config, "gen");
  const auto train = minimath::generate_problems(config.seed, config.train_first_id, config.train_problems);
  const auto eval = generate_eval_problems(config.seed, config.eval_first_id, config.eval_problems, train);
  st.output("train_problems.jsonl", io::problems_jsonl(train));
  st.output("eval_problems.jsonl", io::problems_jsonl(eval));
  st.log(std::to_string(train.size()) + " train / " + std::to_string(eval.size()) + " eval problems");
  st.finish();
}

void run_sft(const ExperimentConfig& config) {
  StageRun st(config, "sft");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  std::vector<nanolm::SequencePair> corpus;
  for (const auto& p : train) corpus.push_back({minimath::render_prompt(p), minimath::render_gold(p)});
  auto tc = config.sft;
  tc.seed = derive_seed(config.seed, Stage::sft_shuffle);
  const auto init = nanolm::init_params(config.model, derive_seed(config.seed, Stage::init));
  const auto base = nanolm::train_sft(init, corpus, tc);
  st.output_checkpoint("base.ckpt", base);
  st.finish();
}

void run_sample(const ExperimentConfig& config) {
  StageRun st(config, "sample");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const nanolm::Model model(st.checkpoint("base.ckpt"));
  auto sc = config.sampling;
  sc.seed = config.seed;
  const auto pool = contrastive::build_trajectory_pool(model, train, sc);
  std::size_t correct = 0;
  for (const auto& t : pool) correct += t.correct;
  st.log("pool accuracy " + fmt_double(static_cast<double>(correct) / static_cast<double>(pool.size())).substr(0, 6));
  st.output("pool.jsonl", io::trajectories_jsonl(pool));
  st.counter("sample", model.counter().value(), token_total(pool));
  st.finish();
}

void run_identify(const ExperimentConfig& config) {
  StageRun st(config, "identify");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto pool = io::parse_trajectories(st.input("pool.jsonl"));
  const nanolm::Model model(st.checkpoint("base.ckpt"));
  const auto problems = by_id(train);

  // Eligible: problems with both correct and incorrect samples, in problem order.
  std::vector<std::int64_t> order;
  std::unordered_map<std::int64_t, std::vector<const minimath::Trajectory*>> incorrect;
  std::unordered_map<std::int64_t, std::size_t> correct;
  for (const auto& t : pool) {
    if (t.correct) ++correct[t.problem_id];
    else incorrect[t.problem_id].push_back(&t);
  }
  for (const auto& p : train) {
    if (correct[p.id] > 0 && !incorrect[p.id].empty()) order.push_back(p.id);
  }
  Rng pick(derive_seed(config.seed, Stage::instances));
  shuffle(order, pick);
  order.resize(std::min(order.size(), config.identify_instances));
  std::sort(order.begin(), order.end());
  st.log(std::to_string(order.size()) + " instances");

  auto rc = config.rollout;
  rc.seed = config.seed;
  std::vector<rollout::RolloutReport> reports;
  for (const auto id : order) {
    const auto& cands = incorrect.at(id);
    Rng rng(derive_seed(config.seed, Stage::instances, static_cast<std::uint64_t>(id)));
    const auto& traj = *cands[rng.below(cands.size())];
    auto report = rollout::identify_critical(model, problems.at(id), traj, rc);
    if (const auto errs = rollout::validate_report(report, rc); !errs.empty()) {
      throw std::runtime_error("identify: report for problem " + std::to_string(id) +
                               " failed validation: " + errs.front());
    }
    reports.push_back(std::move(report));
  }
  std::uint64_t analytic = 0;
  for (const auto& r : reports) analytic += r.generated_tokens();
  st.output("rollout_reports.jsonl", io::reports_jsonl(reports));
  st.counter("identify", model.counter().value(), analytic);
  st.finish();
}

void run_ce_train(const ExperimentConfig& config) {
  StageRun st(config, "ce-train");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto pool = io::parse_trajectories(st.input("pool.jsonl"));
  const auto base = st.checkpoint("base.ckpt");
  const auto split = contrastive::build_corpus_split(train, pool, config.seed);
  st.log(std::to_string(split.positive_count()) + " positives, " +
         std::to_string(split.negative_count()) + " negatives, " + std::to_string(split.all_correct) +
         " all-correct and " + std::to_string(split.all_incorrect) + " all-incorrect problems");
  if (split.positive_count() == 0 || split.negative_count() == 0) {
    throw std::runtime_error("ce-train: the pool needs both correct and incorrect trajectories (" +
                             std::to_string(split.positive_count()) + " positives, " +
                             std::to_string(split.negative_count()) + " negatives)");
  }
  auto tc = config.ce;
  tc.seed = derive_seed(config.seed, Stage::ce_train, 0);
  const auto positive = nanolm::train_sft(base, contrastive::positive_corpus(train, split), tc);
  tc.seed = derive_seed(config.seed, Stage::ce_train, 1);
  const auto negative = nanolm::train_sft(base, contrastive::negative_corpus(train, split), tc);
  st.output("split.json", io::split_json(split));
  st.output_checkpoint("positive.ckpt", positive);
  st.output_checkpoint("negative.ckpt", negative);
  st.finish();
}

void run_ce_score(const ExperimentConfig& config) {
  StageRun st(config, "ce-score");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto split = io::parse_split(st.input("split.json"));
  const nanolm::Model pos(st.checkpoint("positive.ckpt"));
  const nanolm::Model neg(st.checkpoint("negative.ckpt"));
  const auto problems = by_id(train);
  std::vector<std::pair<std::int64_t, const minimath::TokenSeq*>> items;
  std::uint64_t tokens = 0;
  for (const auto& ps : split.problems) {
    for (const auto& n : ps.negatives) {
      items.emplace_back(ps.problem_id, &n.tokens);
      tokens += n.tokens.size();
    }
  }
  const auto scores = score_all(pos, neg, problems, items, config.beta);
  st.output("ce_scores.jsonl", io::scores_jsonl(scores));
  st.counter("ce_score", pos.counter().value() + neg.counter().value(), 2 * tokens);
  st.finish();
}

void run_train_pref(const ExperimentConfig& config, Method method) {
  StageRun st(config, "train-pref-" + std::string(prefopt::method_name(method)));
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto split = io::parse_split(st.input("split.json"));
  const auto scores = io::parse_scores(st.input("ce_scores.jsonl"));
  const auto base = st.checkpoint("base.ckpt");
  const auto pairs = prefopt::build_pairs(train, split, std::span<const contrastive::TokenScoreVector>(scores));
  auto pc = config.pref;
  pc.method = method;
  pc.seed = config.seed;
  st.log(std::to_string(pairs.size()) + " pairs, lr " + fmt_double(pc.effective_learning_rate()));
  const auto result = prefopt::train_preference(base, base, pairs, pc);
  const auto& first = result.curve.records.front();
  const auto& last = result.curve.records.back();
  st.log("gap " + fmt_double(first.chosen_logp - first.rejected_logp).substr(0, 8) + " -> " +
         fmt_double(last.chosen_logp - last.rejected_logp).substr(0, 8) + ", chosen " +
         fmt_double(last.chosen_logp).substr(0, 8));
  st.output_checkpoint(policy_file(method), result.policy);
  st.output(curve_file(method), io::curve_csv(result.curve));
  st.finish();
}

void run_eval(const ExperimentConfig& config, std::optional<Method> method) {
  StageRun st(config, "eval-" + (method ? std::string(prefopt::method_name(*method)) : std::string("base")));
  const auto eval = io::parse_problems(st.input("eval_problems.jsonl"));
  const auto ckpt = method ? policy_file(*method) : std::string("base.ckpt");
  const nanolm::Model model(st.checkpoint(ckpt));
  const auto r = evaluate_accuracy(model, eval, config.eval_samples, config.seed, config.ks,
                                   config.sampling.max_len);
  json j = {{"checkpoint", ckpt},
            {"method", method ? std::string(prefopt::method_name(*method)) : std::string("base")},
            {"total", r.total},
            {"correct", r.correct},
            {"accuracy", r.accuracy},
            {"n_samples", r.n_samples}};
  if (!r.ks.empty()) {
    json pk = json::array();
    for (std::size_t i = 0; i < r.ks.size(); ++i) pk.push_back({{"k", r.ks[i]}, {"pass_at_k", r.pass_at_k[i]}});
    j["pass_at_k"] = pk;
  }
  st.log("greedy accuracy " + std::to_string(r.correct) + "/" + std::to_string(r.total));
  st.output(eval_file(method), j.dump(2) + "\n");
  st.counter(std::string("eval_") + (method ? std::string(prefopt::method_name(*method)) : "base"),
             model.counter().value(), r.generated_tokens);
  st.finish();
}

void run_impact(const ExperimentConfig& config) {
  StageRun st(config, "impact");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto reports = io::parse_reports(st.input("rollout_reports.jsonl"));
  const nanolm::Model model(st.checkpoint("base.ckpt"));
  auto rc = config.rollout;
  rc.seed = config.seed;
  const auto report = rollout::critical_impact_experiment(model, by_id(train), reports, rc, config.ks);
  st.output("impact.jsonl", io::impact_jsonl(report));
  st.output("passk.csv", io::passk_csv(report));
  if (!report.ks.empty()) {
    st.log("pass@" + std::to_string(report.ks.back()) + " with " +
           fmt_double(report.with_critical.back()).substr(0, 6) + " without " +
           fmt_double(report.without_critical.back()).substr(0, 6) + " over " +
           std::to_string(report.used_instances()) + " instances");
  }
  st.finish();
}

void run_analyze(const ExperimentConfig& config) {
  StageRun st(config, "analyze");
  const auto train = io::parse_problems(st.input("train_problems.jsonl"));
  const auto reports = io::parse_reports(st.input("rollout_reports.jsonl"));
  const nanolm::Model pos(st.checkpoint("positive.ckpt"));
  const nanolm::Model neg(st.checkpoint("negative.ckpt"));
  const auto problems = by_id(train);

  std::vector<std::optional<std::size_t>> errors;
  std::size_t both = 0, first_only = 0, not_found = 0;
  for (const auto& r : reports) {
    const auto& p = problems.at(r.problem_id);
    errors.push_back(minimath::first_error_position(p, minimath::verify(p, r.tokens)));
    switch (r.mode) {
      case rollout::IdentificationMode::both_conditions: ++both; break;
      case rollout::IdentificationMode::first_condition_only: ++first_only; break;
      case rollout::IdentificationMode::not_found: ++not_found; break;
    }
  }
  const auto ta = rollout::token_analysis(reports, errors);

  // Contrastive scores of the rollout-scored trajectories vs their critical tokens.
  std::vector<std::pair<std::int64_t, const minimath::TokenSeq*>> items;
  std::vector<const rollout::RolloutReport*> scored;
  for (const auto& r : reports) {
    if (r.mode == rollout::IdentificationMode::both_conditions && !r.tokens.empty()) {
      items.emplace_back(r.problem_id, &r.tokens);
      scored.push_back(&r);
    }
  }
  const auto ce = score_all(pos, neg, problems, items, config.beta);
  std::size_t agree = 0, exact = 0;
  json per_instance = json::array();
  for (std::size_t i = 0; i < ce.size(); ++i) {
    const auto& s = ce[i].scores;
    const auto argmin = static_cast<std::size_t>(std::min_element(s.begin(), s.end()) - s.begin()) + 1;
    const auto crit = *scored[i]->critical_position;
    agree += argmin <= crit;
    exact += argmin == crit;
    per_instance.push_back({{"problem_id", scored[i]->problem_id},
                            {"critical_position", crit},
                            {"min_score_position", argmin},
                            {"critical_score", s[crit - 1]}});
  }
  const double agreement = ce.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(ce.size());

  json categories = json::object();
  for (std::size_t c = 0; c < minimath::kAllCategories.size(); ++c) {
    categories[std::string(minimath::category_name(minimath::kAllCategories[c]))] = ta.by_category[c];
  }
  json j = {{"instances", reports.size()},
            {"modes", {{"both_conditions", both}, {"first_condition_only", first_only}, {"not_found", not_found}}},
            {"categories", categories},
            {"relative_position",
             {{"before", ta.before}, {"after", ta.after}, {"same", ta.same},
              {"no_error_position", ta.no_error_position}, {"different_ratio", ta.different_ratio()}}},
            {"ce_agreement", {{"instances", ce.size()}, {"at_or_before", agree}, {"exact", exact},
                              {"rate", agreement}, {"per_instance", per_instance}}}};

  std::ostringstream txt;
  txt << "critical-token identification: " << reports.size() << " instances, " << both
      << " both conditions, " << first_only << " first condition only, " << not_found << " not found\n";
  txt << "word type:";
  for (const auto& [name, count] : categories.items()) txt << ' ' << name << '=' << count.get<std::size_t>();
  txt << "\nrelative to first error token: before=" << ta.before << " after=" << ta.after
      << " same=" << ta.same << " no_error_position=" << ta.no_error_position
      << " different_ratio=" << fmt_double(ta.different_ratio()).substr(0, 6) << '\n';
  txt << "contrastive minimum at or before critical token: " << agree << '/' << ce.size()
      << " (exact " << exact << ")\n";

  json methods = json::object();
  for (const auto m : config.methods) {
    const auto name = std::string(prefopt::method_name(m));
    json mj = json::object();
    if (st.has(curve_file(m))) {
      const auto curve = io::parse_curve_csv(st.input(curve_file(m)));
      const auto& a = curve.records.front();
      const auto& b = curve.records.back();
      mj["steps"] = b.step;
      mj["initial_gap"] = a.chosen_logp - a.rejected_logp;
      mj["final_gap"] = b.chosen_logp - b.rejected_logp;
      mj["initial_chosen_logp"] = a.chosen_logp;
      mj["final_chosen_logp"] = b.chosen_logp;
      mj["final_rejected_logp"] = b.rejected_logp;
      txt << name << ": gap " << fmt_double(a.chosen_logp - a.rejected_logp).substr(0, 8) << " -> "
          << fmt_double(b.chosen_logp - b.rejected_logp).substr(0, 8) << ", final chosen logp "
          << fmt_double(b.chosen_logp).substr(0, 8) << '\n';
    }
    if (st.has(eval_file(m))) {
      const auto ej = json::parse(st.input(eval_file(m)));
      mj["accuracy"] = ej.at("accuracy");
      txt << name << ": greedy eval accuracy " << ej.at("correct").get<std::size_t>() << '/'
          << ej.at("total").get<std::size_t>() << '\n';
    }
    methods[name] = mj;
  }
  if (st.has(eval_file(std::nullopt))) {
    const auto ej = json::parse(st.input(eval_file(std::nullopt)));
    j["base_accuracy"] = ej.at("accuracy");
    txt << "base: greedy eval accuracy " << ej.at("correct").get<std::size_t>() << '/'
        << ej.at("total").get<std::size_t>() << '\n';
  }
  j["methods"] = methods;
  st.output("analysis.json", j.dump(2) + "\n");
  st.output("analysis.txt", txt.str());
  st.log("CE agreement " + std::to_string(agree) + "/" + std::to_string(ce.size()));
  st.finish();
}

std::vector<contrastive::CostRow> preset_cost_rows(std::string_view preset, std::uint64_t n) {
  std::vector<contrastive::CostRow> rows;
  for (const std::string name : {"gsm8k", "math"}) {
    if (preset != "all" && preset != name) continue;
    const auto in = contrastive::cost_preset(name, n);
    rows.push_back({name, in, contrastive::cost_model(in)});
  }
  if (rows.empty()) throw ConfigError("unknown cost preset: " + std::string(preset));
  return rows;
}

void run_cost_model(const ExperimentConfig& config) {
  StageRun st(config, "cost-model");
  auto rows = preset_cost_rows("all", config.cost_n);
  if (st.has("rollout_reports.jsonl") && st.has("split.json")) {
    const auto reports = io::parse_reports(st.input("rollout_reports.jsonl"));
    const auto split = io::parse_split(st.input("split.json"));
    std::uint64_t tokens = 0;
    for (const auto& r : reports) tokens += r.generated_tokens();
    if (!reports.empty() && split.negative_count() > 0) {
      contrastive::CostModelInput in;
      in.method = contrastive::CostMethod::contrastive;
      in.n = split.negative_count();
      in.avg_rollout_tokens = static_cast<double>(tokens) / static_cast<double>(reports.size());
      in.sft_corpus_size = split.positive_count() + split.negative_count();
      in.sft_epochs = 3;
      rows.push_back({"minimath", in, contrastive::cost_model(in)});
    }
  }
  st.output("cost_model.txt", contrastive::format_cost_table(rows));
  st.output("cost_model.csv", contrastive::format_cost_csv(rows));
  st.finish();
}

RunManifest run_pipeline(const ExperimentConfig& config) {
  config.validate();
  if (config.verbose) std::fprintf(stderr, "[ctlab] pipeline methods=%s\n", method_list(config).c_str());
  std::filesystem::create_directories(config.out_dir);
  std::filesystem::remove(config.out_dir / kManifest);
  run_gen(config);
  run_sft(config);
  run_sample(config);
  run_identify(config);
  run_ce_train(config);
  run_ce_score(config);
  run_eval(config, std::nullopt);
  for (const auto m : config.methods) {
    run_train_pref(config, m);
    run_eval(config, m);
  }
  run_impact(config);
  run_analyze(config);
  run_cost_model(config);
  return RunManifest::from_json(io::read_text(config.out_dir / kManifest));
}

}  // namespace ctlab::pipeline
