// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "oracles.hpp"

using namespace ctlab;
using namespace ctlab::nanolm;
using Catch::Approx;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "ctlab_test_nanolm";
  std::filesystem::create_directories(dir);
  return dir / name;
}

template <typename T>
bool same_bits(const BasicParams<T>& a, const BasicParams<T>& b) {
  const auto x = a.arrays();
  const auto y = b.arrays();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != y[i].size()) return false;
    if (std::memcmp(x[i].data(), y[i].data(), x[i].size_bytes()) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config invariants", "[nanolm]") {
  CHECK_NOTHROW(ModelConfig{20, 2, 1, 1}.validate());
  CHECK_THROWS_AS((ModelConfig{20, 1, 4, 4}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((ModelConfig{0, 4, 4, 4}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((ModelConfig{20, 4, 0, 4}.validate()), std::invalid_argument);
  CHECK(ModelConfig{20, 8, 32, 64}.parameter_count() == 20 * 32 + 8 * 32 * 64 + 64 + 64 * 20 + 20);
}

TEST_CASE("zero parameters give the uniform distribution", "[nanolm]") {
  const ModelParams zero(ModelConfig{20, 8, 32, 64});
  const TokenSeq ctx(8, minimath::kPad);
  for (const double p : forward(zero, ctx)) CHECK(p == Approx(0.05).margin(1e-15));
  const Model m(zero);
  for (const double p : m.probs(ctx)) CHECK(p == Approx(0.05).margin(1e-15));

  const std::vector<Example> batch = {{ctx, 3}, {ctx, 7}};
  CHECK(nll_loss(zero, std::span<const Example>(batch)) == Approx(std::log(20.0)).epsilon(1e-14));
}

TEST_CASE("hand evaluated two-token model", "[nanolm]") {
  ModelParams p(ModelConfig{2, 2, 1, 1});
  p.embedding = {0.5f, -1.0f};
  p.w1 = {0.25f, 2.0f};
  p.b1 = {0.125f};
  p.w2 = {1.0f, -1.0f};
  p.b2 = {0.0f, 0.5f};
  const TokenSeq ctx = {1, 0};
  // pre = E[1] w1[0] + E[0] w1[1] + b1
  const double h = std::tanh(-1.0 * 0.25 + 0.5 * 2.0 + 0.125);
  const double l0 = h, l1 = -h + 0.5;
  const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
  const auto probs = forward(p, ctx);
  CHECK(probs[0] == Approx(p0).epsilon(1e-14));
  CHECK(probs[1] == Approx(1.0 - p0).epsilon(1e-14));
  const auto fast = Model(p).probs(ctx);
  CHECK(fast[0] == Approx(p0).epsilon(1e-14));
}

TEST_CASE("forward output is a distribution", "[nanolm][property]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto params = init_params(ModelConfig{20, 6, 8, 16}, seed, 2.0);
    const Model model(params);
    Rng rng(seed);
    for (int trial = 0; trial < 10; ++trial) {
      TokenSeq ctx(6);
      for (auto& t : ctx) t = static_cast<TokenId>(rng.below(20));
      for (const auto& probs : {forward(params, ctx), model.probs(ctx)}) {
        double sum = 0.0;
        for (const double x : probs) {
          REQUIRE(x >= 0.0);
          sum += x;
        }
        REQUIRE(std::fabs(sum - 1.0) < 1e-6);
      }
      const auto a = log_probs(params, ctx);
      const auto b = model.log_probs(ctx);
      for (std::size_t v = 0; v < a.size(); ++v) REQUIRE(a[v] == Approx(b[v]).margin(1e-12));
    }
  }
}

TEST_CASE("forward rejects malformed context", "[nanolm]") {
  const auto params = init_params(ModelConfig{20, 4, 4, 4}, 1);
  CHECK_THROWS_AS(forward(params, TokenSeq{1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(forward(params, TokenSeq{1, 2, 3, 20}), std::out_of_range);
  CHECK_THROWS_AS(forward(params, TokenSeq{1, -1, 3, 4}), std::out_of_range);
  CHECK_THROWS_AS(Model(params).log_probs(TokenSeq{1, 2, 3, 99}), std::out_of_range);
}

TEST_CASE("contexts are left padded", "[nanolm]") {
  const TokenSeq seq = {5, 6, 7};
  CHECK(make_context(seq, 2, 4) == TokenSeq{0, 0, 5, 6});
  CHECK(make_context(seq, 3, 2) == TokenSeq{6, 7});
  CHECK(make_context(seq, 0, 3) == TokenSeq{0, 0, 0});
  const auto ex = unroll(TokenSeq{18, 3}, TokenSeq{4, 1}, 3);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].context == TokenSeq{0, 18, 3});
  CHECK(ex[0].target == 4);
  CHECK(ex[1].context == TokenSeq{18, 3, 4});
  CHECK(safe_log(0.0) == Approx(std::log(1e-12)));
}

TEST_CASE("nll gradient matches finite differences", "[nanolm][gradient]") {
  const auto cfg = testing::small_config();
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    const auto p = testing::random_shadow(cfg, seed);
    Rng rng(seed * 31);
    const auto batch = testing::random_examples(rng, cfg, 6);
    const std::span<const Example> b(batch);
    const auto lg = nll_loss_and_grad(p, b);
    CHECK(lg.loss == Approx(testing::direct_nll(p, b)).epsilon(1e-12));
    const auto fd = testing::finite_difference_check(
        [&](const ShadowParams& q) { return testing::direct_nll(q, b); }, p, lg.grad);
    INFO("seed " << seed << " coordinates " << fd.coordinates);
    CHECK(fd.max_rel_error < 1e-4);
  }
}

TEST_CASE("batched accumulator equals per-token backprop", "[nanolm][gradient]") {
  const ModelConfig cfg{20, 5, 6, 7};
  const auto p = init_params(cfg, 9, 0.4);
  Rng rng(4);
  const auto batch = testing::random_examples(rng, cfg, 40);
  Gradient reference(cfg);
  GradientAccumulator<float> acc(p);
  for (const auto& ex : batch) {
    const auto act = activate(p, ex.context);
    accumulate_logprob_grad(p, act, ex.target, 0.3, reference);
    const auto fast = acc.activate(ex.context);
    for (std::size_t v = 0; v < act.log_probs.size(); ++v) {
      REQUIRE(fast.log_probs[v] == Approx(act.log_probs[v]).margin(1e-12));
    }
    acc.add(fast, ex.target, 0.3);
  }
  const auto g = acc.take();
  const auto a = g.arrays();
  const auto r = reference.arrays();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].size(); ++i) REQUIRE(a[k][i] == Approx(r[k][i]).margin(1e-12));
  }
  // take() leaves a zeroed accumulator
  CHECK(l2_norm(acc.take()) == 0.0);
}

TEST_CASE("duplicated batch rows leave the mean unchanged", "[nanolm]") {
  const auto p = testing::random_shadow(testing::small_config(), 3);
  Rng rng(8);
  const auto batch = testing::random_examples(rng, p.config, 5);
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  const auto a = nll_loss_and_grad(p, std::span<const Example>(batch));
  const auto b = nll_loss_and_grad(p, std::span<const Example>(doubled));
  CHECK(b.loss == Approx(a.loss).epsilon(1e-14));
  const auto ga = a.grad.arrays();
  const auto gb = b.grad.arrays();
  for (std::size_t k = 0; k < ga.size(); ++k) {
    for (std::size_t i = 0; i < ga[k].size(); ++i) CHECK(gb[k][i] == Approx(ga[k][i]).margin(1e-15));
  }
  CHECK_THROWS_AS(nll_loss_and_grad(p, std::span<const Example>()), std::invalid_argument);
}

TEST_CASE("optimizer clips and updates", "[nanolm]") {
  const ModelConfig cfg{20, 2, 2, 2};
  ModelParams p(cfg);
  Gradient g(cfg);
  g.b2[0] = 30.0;
  g.b2[1] = 40.0;  // norm 50
  SgdMomentum opt(cfg, 0.1, 0.9, 5.0);
  CHECK(opt.step(p, g) == Approx(50.0));
  CHECK(p.b2[0] == Approx(-0.1 * 3.0).epsilon(1e-6));
  CHECK(p.b2[1] == Approx(-0.1 * 4.0).epsilon(1e-6));
  opt.step(p, g);  // velocity 0.9 v + clipped g
  CHECK(p.b2[0] == Approx(-0.3 - 0.1 * (0.9 * 3.0 + 3.0)).epsilon(1e-6));

  Gradient bad(cfg);
  bad.b1[0] = std::numeric_limits<double>::quiet_NaN();
  SgdMomentum raw(cfg, 0.1, 0.0, 0.0);
  CHECK_THROWS_AS(raw.step(p, bad), std::runtime_error);
}

TEST_CASE("sft memorizes a single sequence", "[nanolm][train]") {
  const auto problem = minimath::make_problem(0, 7, {{minimath::Op::mul, 8}, {minimath::Op::sub, 9}});
  const std::vector<SequencePair> corpus = {
      {minimath::render_prompt(problem), minimath::render_gold(problem)}};
  TrainConfig tc{0.1, 200, 32, 0.9, 5.0, 5};
  const auto init = init_params(ModelConfig{20, 8, 32, 64}, 5);
  const auto trained = train_sft(init, corpus, tc);
  const auto lp = sequence_log_probs(trained, corpus[0].prompt, corpus[0].completion);
  const double nll = -std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size());
  CHECK(nll < 0.1);
  CHECK(trained.all_finite());

  SECTION("deterministic given seed") {
    CHECK(same_bits(train_sft(init, corpus, tc), trained));
  }
  SECTION("invalid requests") {
    TrainConfig zero = tc;
    zero.epochs = 0;
    CHECK_THROWS_AS(train_sft(init, corpus, zero), std::invalid_argument);
    TrainConfig lr = tc;
    lr.learning_rate = 0.0;
    CHECK_THROWS_AS(train_sft(init, corpus, lr), std::invalid_argument);
    const std::vector<SequencePair> bad = {{{18, 25}, {1}}};
    CHECK_THROWS_AS(train_sft(init, bad, tc), std::invalid_argument);
    CHECK_THROWS_AS(train_sft(init, std::span<const SequencePair>(), tc), std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip and error kinds", "[nanolm][checkpoint]") {
  const ModelConfig cfg{20, 3, 4, 5};
  const auto p = init_params(cfg, 77);
  const auto path = temp_path("model.ckpt");
  save_checkpoint(p, path);
  CHECK(same_bits(load_checkpoint(path), p));
  CHECK(same_bits(load_checkpoint(path, cfg), p));
  CHECK_THROWS_AS(load_checkpoint(path, ModelConfig{21, 3, 4, 5}), DimensionMismatchError);

  auto bytes = encode_checkpoint(p);
  CHECK(bytes.size() == 4 + 16 + 4 * cfg.parameter_count() + 4);
  CHECK(std::memcmp(bytes.data(), "CTL1", 4) == 0);
  CHECK(bytes[4] == 20);  // little-endian vocab size

  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK_THROWS_AS(decode_checkpoint(truncated), TruncatedPayloadError);
  CHECK_THROWS_AS(decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), 10)),
                  TruncatedPayloadError);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), CorruptHeaderError);

  auto flipped = bytes;
  flipped[30] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(flipped), ChecksumMismatchError);

  auto vocab = bytes;
  vocab[4] = 21;
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(vocab.data()), static_cast<std::streamsize>(vocab.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(path, cfg), DimensionMismatchError);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), CheckpointError);
}

TEST_CASE("model counts forward passes", "[nanolm]") {
  const Model m(init_params(ModelConfig{20, 4, 4, 4}, 2));
  const auto lp = m.sequence_log_probs(TokenSeq{18, 3, 19}, TokenSeq{3, 1});
  CHECK(lp.size() == 2);
  CHECK(m.counter().value() == 2);
  m.counter().reset();
  CHECK(m.counter().value() == 0);
}
