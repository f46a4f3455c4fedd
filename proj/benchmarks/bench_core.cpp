// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "ctlab/contrastive.hpp"
#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/prefopt.hpp"
#include "ctlab/rollout.hpp"

using namespace ctlab;

namespace {

const nanolm::ModelConfig kConfig{minimath::kVocabSize, 24, 32, 128};

std::vector<nanolm::Example> gold_examples(std::size_t problems) {
  std::vector<nanolm::Example> out;
  for (const auto& p : minimath::generate_problems(1, 0, problems)) {
    const auto ex = nanolm::unroll(minimath::render_prompt(p), minimath::render_gold(p), kConfig.context);
    out.insert(out.end(), ex.begin(), ex.end());
  }
  return out;
}

void BM_Forward(benchmark::State& state) {
  const nanolm::Model model(nanolm::init_params(kConfig, 1));
  const auto examples = gold_examples(4);
  std::vector<double> out(kConfig.vocab_size);
  std::size_t i = 0;
  for (auto _ : state) {
    model.log_probs(examples[i++ % examples.size()].context, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_Forward);

void BM_NllLossAndGrad(benchmark::State& state) {
  const auto params = nanolm::init_params(kConfig, 1);
  auto examples = gold_examples(64);
  examples.resize(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    auto lg = nanolm::nll_loss_and_grad(params, std::span<const nanolm::Example>(examples));
    benchmark::DoNotOptimize(lg.loss);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_NllLossAndGrad)->Arg(32)->Arg(256);

void BM_PreferenceLossAndGrad(benchmark::State& state) {
  const auto params = nanolm::init_params(kConfig, 1);
  std::vector<prefopt::PreferencePair> pairs;
  for (const auto& p : minimath::generate_problems(2, 0, 16)) {
    prefopt::PreferencePair pair;
    pair.prompt = minimath::render_prompt(p);
    pair.chosen = minimath::render_gold(p);
    pair.rejected = pair.chosen;
    pair.rejected[pair.rejected.size() - 2] = minimath::kPlus;
    pair.rejected_scores = std::vector<double>(pair.rejected.size(), 0.3);
    pairs.push_back(std::move(pair));
  }
  prefopt::PrefOptConfig cfg;
  for (auto _ : state) {
    auto lg = prefopt::loss_and_grad(prefopt::Method::cdpo, params, params,
                                     std::span<const prefopt::PreferencePair>(pairs), cfg);
    benchmark::DoNotOptimize(lg.loss);
  }
}
BENCHMARK(BM_PreferenceLossAndGrad);

void BM_SampleCompletion(benchmark::State& state) {
  const nanolm::Model model(nanolm::init_params(kConfig, 1));
  const auto prompt = minimath::render_prompt(minimath::generate_problems(3, 0, 1).front());
  Rng rng(1);
  std::size_t tokens = 0;
  for (auto _ : state) {
    const auto c = rollout::sample_completion(model, prompt, rng, 64, 1.0);
    tokens += c.size();
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(tokens));
}
BENCHMARK(BM_SampleCompletion);

void BM_CeScores(benchmark::State& state) {
  const nanolm::Model pos(nanolm::init_params(kConfig, 1));
  const nanolm::Model neg(nanolm::init_params(kConfig, 2));
  const auto p = minimath::generate_problems(4, 0, 1).front();
  const auto prompt = minimath::render_prompt(p);
  const auto completion = minimath::render_gold(p);
  for (auto _ : state) {
    auto s = contrastive::ce_scores(pos, neg, p.id, prompt, completion, 1.0);
    benchmark::DoNotOptimize(s.scores.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(completion.size()));
}
BENCHMARK(BM_CeScores);

}  // namespace

BENCHMARK_MAIN();
