// SPDX-License-Identifier: Apache-2.0
#include "ctlab/nanolm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace ctlab::nanolm {

void ModelConfig::validate() const {
  if (vocab_size < 1 || embed < 1 || hidden < 1) {
    throw std::invalid_argument("model dimensions must be >= 1");
  }
  if (context < 2) throw std::invalid_argument("context window must be >= 2");
}

std::size_t ModelConfig::parameter_count() const {
  return vocab_size * embed + context * embed * hidden + hidden + hidden * vocab_size +
         vocab_size;
}

template <typename T>
BasicParams<T>::BasicParams(const ModelConfig& cfg)
    : config(cfg),
      embedding(cfg.vocab_size * cfg.embed, T{0}),
      w1(cfg.context * cfg.embed * cfg.hidden, T{0}),
      b1(cfg.hidden, T{0}),
      w2(cfg.hidden * cfg.vocab_size, T{0}),
      b2(cfg.vocab_size, T{0}) {
  cfg.validate();
}

template <typename T>
std::array<std::span<T>, 5> BasicParams<T>::arrays() {
  return {std::span<T>(embedding), std::span<T>(w1), std::span<T>(b1), std::span<T>(w2),
          std::span<T>(b2)};
}

template <typename T>
std::array<std::span<const T>, 5> BasicParams<T>::arrays() const {
  return {std::span<const T>(embedding), std::span<const T>(w1), std::span<const T>(b1),
          std::span<const T>(w2), std::span<const T>(b2)};
}

template <typename T>
std::size_t BasicParams<T>::size() const {
  return embedding.size() + w1.size() + b1.size() + w2.size() + b2.size();
}

template <typename T>
bool BasicParams<T>::all_finite() const {
  for (const auto& a : arrays()) {
    for (const T v : a) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template struct BasicParams<float>;
template struct BasicParams<double>;

ModelParams init_params(const ModelConfig& config, std::uint64_t seed, double scale) {
  ModelParams p(config);
  Rng rng(seed);
  for (auto a : p.arrays()) {
    for (auto& v : a) v = static_cast<float>(rng.uniform(-scale, scale));
  }
  return p;
}

TokenSeq make_context(std::span<const TokenId> seq, std::size_t end, std::size_t context) {
  TokenSeq ctx(context, minimath::kPad);
  const std::size_t take = std::min(end, context);
  std::copy(seq.begin() + static_cast<std::ptrdiff_t>(end - take),
            seq.begin() + static_cast<std::ptrdiff_t>(end),
            ctx.begin() + static_cast<std::ptrdiff_t>(context - take));
  return ctx;
}

double safe_log(double p) { return std::log(std::max(p, 1e-12)); }

namespace {

void check_context(const ModelConfig& cfg, std::span<const TokenId> context) {
  if (context.size() != cfg.context) {
    throw std::invalid_argument("context must hold exactly " + std::to_string(cfg.context) +
                                " tokens, got " + std::to_string(context.size()));
  }
  for (const TokenId t : context) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw std::out_of_range("token id out of range: " + std::to_string(t));
    }
  }
}

void log_softmax_inplace(std::span<double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double l : logits) sum += std::exp(l - m);
  const double lse = m + std::log(sum);
  for (auto& l : logits) l -= lse;
}

}  // namespace

template <typename T>
Activation activate(const BasicParams<T>& params, std::span<const TokenId> context) {
  const auto& cfg = params.config;
  check_context(cfg, context);
  const std::size_t d = cfg.embed, h = cfg.hidden, V = cfg.vocab_size;

  Activation act;
  act.context.assign(context.begin(), context.end());
  std::vector<double> pre(params.b1.begin(), params.b1.end());
  for (std::size_t k = 0; k < cfg.context; ++k) {
    const T* erow = params.embedding.data() + static_cast<std::size_t>(context[k]) * d;
    for (std::size_t e = 0; e < d; ++e) {
      const double x = erow[e];
      const T* wrow = params.w1.data() + (k * d + e) * h;
      for (std::size_t j = 0; j < h; ++j) pre[j] += x * static_cast<double>(wrow[j]);
    }
  }
  act.hidden.resize(h);
  for (std::size_t j = 0; j < h; ++j) act.hidden[j] = std::tanh(pre[j]);

  act.log_probs.assign(params.b2.begin(), params.b2.end());
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = act.hidden[j];
    const T* w2row = params.w2.data() + j * V;
    for (std::size_t v = 0; v < V; ++v) act.log_probs[v] += hj * static_cast<double>(w2row[v]);
  }
  log_softmax_inplace(act.log_probs);
  return act;
}

template <typename T>
std::vector<double> log_probs(const BasicParams<T>& params, std::span<const TokenId> context) {
  return activate(params, context).log_probs;
}

template <typename T>
std::vector<double> forward(const BasicParams<T>& params, std::span<const TokenId> context) {
  auto lp = activate(params, context).log_probs;
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

namespace {

// Four fixed partial sums: vectorizable, same result on every run.
template <typename T>
double dot(const T* a, const double* b, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    for (std::size_t l = 0; l < 4; ++l) acc[l] += static_cast<double>(a[j + l]) * b[j + l];
  }
  for (; j < n; ++j) acc[0] += static_cast<double>(a[j]) * b[j];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

template <typename T>
void accumulate_logprob_grad(const BasicParams<T>& params, const Activation& act,
                             TokenId target, double coeff, Gradient& grad) {
  const auto& cfg = params.config;
  const std::size_t d = cfg.embed, h = cfg.hidden, V = cfg.vocab_size;

  std::vector<double> dlogit(V);
  for (std::size_t v = 0; v < V; ++v) {
    const double indicator = static_cast<TokenId>(v) == target ? 1.0 : 0.0;
    dlogit[v] = coeff * (indicator - std::exp(act.log_probs[v]));
    grad.b2[v] += dlogit[v];
  }

  std::vector<double> dpre(h, 0.0);
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = act.hidden[j];
    const T* w2row = params.w2.data() + j * V;
    double* g2row = grad.w2.data() + j * V;
    double dh = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      g2row[v] += hj * dlogit[v];
      dh += static_cast<double>(w2row[v]) * dlogit[v];
    }
    dpre[j] = dh * (1.0 - hj * hj);
    grad.b1[j] += dpre[j];
  }

  for (std::size_t k = 0; k < cfg.context; ++k) {
    const auto tok = static_cast<std::size_t>(act.context[k]);
    const T* erow = params.embedding.data() + tok * d;
    double* gerow = grad.embedding.data() + tok * d;
    for (std::size_t e = 0; e < d; ++e) {
      const std::size_t i = k * d + e;
      const double x = erow[e];
      const T* wrow = params.w1.data() + i * h;
      double* g1row = grad.w1.data() + i * h;
      for (std::size_t j = 0; j < h; ++j) g1row[j] += x * dpre[j];
      gerow[e] += dot(wrow, dpre.data(), h);
    }
  }
}

namespace {

template <typename T>
std::vector<double> slot_projection(const BasicParams<T>& params) {
  const auto& cfg = params.config;
  const std::size_t K = cfg.context, V = cfg.vocab_size, d = cfg.embed, h = cfg.hidden;
  std::vector<double> proj(K * V * h, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t v = 0; v < V; ++v) {
      double* out = proj.data() + (k * V + v) * h;
      for (std::size_t e = 0; e < d; ++e) {
        const double x = params.embedding[v * d + e];
        const T* wrow = params.w1.data() + (k * d + e) * h;
        for (std::size_t j = 0; j < h; ++j) out[j] += x * static_cast<double>(wrow[j]);
      }
    }
  }
  return proj;
}

}  // namespace

template <typename T>
GradientAccumulator<T>::GradientAccumulator(const BasicParams<T>& params)
    : params_(&params),
      slot_proj_(slot_projection(params)),
      slot_delta_(slot_proj_.size(), 0.0),
      touched_(params.config.context * params.config.vocab_size, 0),
      grad_(params.config) {}

template <typename T>
Activation GradientAccumulator<T>::activate(std::span<const TokenId> context) const {
  const auto& p = *params_;
  const auto& cfg = p.config;
  check_context(cfg, context);
  const std::size_t K = cfg.context, V = cfg.vocab_size, h = cfg.hidden;

  Activation act;
  act.context.assign(context.begin(), context.end());
  act.hidden.assign(p.b1.begin(), p.b1.end());
  for (std::size_t k = 0; k < K; ++k) {
    const double* row = slot_proj_.data() + (k * V + static_cast<std::size_t>(context[k])) * h;
    for (std::size_t j = 0; j < h; ++j) act.hidden[j] += row[j];
  }
  for (auto& x : act.hidden) x = std::tanh(x);
  act.log_probs.assign(p.b2.begin(), p.b2.end());
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = act.hidden[j];
    const T* w2row = p.w2.data() + j * V;
    for (std::size_t v = 0; v < V; ++v) act.log_probs[v] += hj * static_cast<double>(w2row[v]);
  }
  log_softmax_inplace(act.log_probs);
  return act;
}

template <typename T>
void GradientAccumulator<T>::add(const Activation& act, TokenId target, double coeff) {
  const auto& p = *params_;
  const auto& cfg = p.config;
  const std::size_t V = cfg.vocab_size, h = cfg.hidden;
  if (target < 0 || static_cast<std::size_t>(target) >= V) {
    throw std::out_of_range("target token id out of range");
  }

  thread_local std::vector<double> dlogit, dpre;
  dlogit.resize(V);
  dpre.resize(h);
  for (std::size_t v = 0; v < V; ++v) {
    const double indicator = static_cast<TokenId>(v) == target ? 1.0 : 0.0;
    dlogit[v] = coeff * (indicator - std::exp(act.log_probs[v]));
    grad_.b2[v] += dlogit[v];
  }
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = act.hidden[j];
    const T* w2row = p.w2.data() + j * V;
    double* g2row = grad_.w2.data() + j * V;
    double dh = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      g2row[v] += hj * dlogit[v];
      dh += static_cast<double>(w2row[v]) * dlogit[v];
    }
    dpre[j] = dh * (1.0 - hj * hj);
    grad_.b1[j] += dpre[j];
  }
  for (std::size_t k = 0; k < cfg.context; ++k) {
    const std::size_t slot = k * V + static_cast<std::size_t>(act.context[k]);
    touched_[slot] = 1;
    double* row = slot_delta_.data() + slot * h;
    for (std::size_t j = 0; j < h; ++j) row[j] += dpre[j];
  }
}

template <typename T>
Gradient GradientAccumulator<T>::take() {
  const auto& p = *params_;
  const auto& cfg = p.config;
  const std::size_t K = cfg.context, V = cfg.vocab_size, d = cfg.embed, h = cfg.hidden;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t slot = k * V + v;
      if (!touched_[slot]) continue;
      const double* delta = slot_delta_.data() + slot * h;
      const T* erow = p.embedding.data() + v * d;
      double* gerow = grad_.embedding.data() + v * d;
      for (std::size_t e = 0; e < d; ++e) {
        const std::size_t i = k * d + e;
        const double x = erow[e];
        double* g1row = grad_.w1.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) g1row[j] += x * delta[j];
        gerow[e] += dot(p.w1.data() + i * h, delta, h);
      }
    }
  }
  std::fill(slot_delta_.begin(), slot_delta_.end(), 0.0);
  std::fill(touched_.begin(), touched_.end(), 0);
  Gradient out = std::move(grad_);
  grad_ = Gradient(cfg);
  return out;
}

template class GradientAccumulator<float>;
template class GradientAccumulator<double>;

std::vector<Example> unroll(std::span<const TokenId> prompt,
                            std::span<const TokenId> completion, std::size_t context) {
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  std::vector<Example> out;
  out.reserve(completion.size());
  for (std::size_t t = 0; t < completion.size(); ++t) {
    out.push_back({make_context(seq, prompt.size() + t, context), completion[t]});
  }
  return out;
}

template <typename T>
std::vector<double> sequence_log_probs(const BasicParams<T>& params,
                                       std::span<const TokenId> prompt,
                                       std::span<const TokenId> completion) {
  std::vector<double> out;
  out.reserve(completion.size());
  for (const auto& ex : unroll(prompt, completion, params.config.context)) {
    const auto act = activate(params, ex.context);
    if (ex.target < 0 || static_cast<std::size_t>(ex.target) >= params.config.vocab_size) {
      throw std::out_of_range("target token id out of range");
    }
    out.push_back(act.log_probs[static_cast<std::size_t>(ex.target)]);
  }
  return out;
}

template <typename T>
double nll_loss(const BasicParams<T>& params, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    const auto act = activate(params, ex.context);
    total -= act.log_probs.at(static_cast<std::size_t>(ex.target));
  }
  return total / static_cast<double>(batch.size());
}

template <typename T>
LossAndGrad nll_loss_and_grad(const BasicParams<T>& params, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("nll_loss_and_grad: empty batch");
  GradientAccumulator<T> acc(params);
  LossAndGrad out;
  const double coeff = -1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const auto act = acc.activate(ex.context);
    out.loss -= act.log_probs.at(static_cast<std::size_t>(ex.target));
    acc.add(act, ex.target, coeff);
  }
  out.loss /= static_cast<double>(batch.size());
  out.grad = acc.take();
  return out;
}

#define CTLAB_INSTANTIATE(T)                                                                \
  template Activation activate(const BasicParams<T>&, std::span<const TokenId>);            \
  template std::vector<double> log_probs(const BasicParams<T>&, std::span<const TokenId>);  \
  template std::vector<double> forward(const BasicParams<T>&, std::span<const TokenId>);    \
  template void accumulate_logprob_grad(const BasicParams<T>&, const Activation&, TokenId,  \
                                        double, Gradient&);                                 \
  template std::vector<double> sequence_log_probs(const BasicParams<T>&,                    \
                                                  std::span<const TokenId>,                 \
                                                  std::span<const TokenId>);                \
  template double nll_loss(const BasicParams<T>&, std::span<const Example>);                \
  template LossAndGrad nll_loss_and_grad(const BasicParams<T>&, std::span<const Example>);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

double l2_norm(const Gradient& grad) {
  double sq = 0.0;
  for (const auto& a : grad.arrays()) {
    for (const double v : a) sq += v * v;
  }
  return std::sqrt(sq);
}

SgdMomentum::SgdMomentum(const ModelConfig& config, double learning_rate, double momentum,
                         double clip_norm)
    : learning_rate_(learning_rate),
      momentum_(momentum),
      clip_norm_(clip_norm),
      velocity_(config) {}

double SgdMomentum::step(ModelParams& params, const Gradient& grad) {
  const double norm = l2_norm(grad);
  const double scale = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
  auto p = params.arrays();
  auto v = velocity_.arrays();
  const auto g = grad.arrays();
  for (std::size_t a = 0; a < p.size(); ++a) {
    for (std::size_t i = 0; i < p[a].size(); ++i) {
      v[a][i] = momentum_ * v[a][i] + scale * g[a][i];
      p[a][i] = static_cast<float>(static_cast<double>(p[a][i]) - learning_rate_ * v[a][i]);
    }
  }
  if (!params.all_finite()) throw std::runtime_error("optimizer step produced non-finite parameters");
  return norm;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
}

ModelParams train_sft(const ModelParams& init, std::span<const SequencePair> corpus,
                      const TrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("train_sft: empty corpus");
  const auto& cfg = init.config;
  std::vector<Example> examples;
  for (const auto& pair : corpus) {
    for (const auto* seq : {&pair.prompt, &pair.completion}) {
      for (const TokenId t : *seq) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
          throw std::invalid_argument("train_sft: token out of vocabulary: " + std::to_string(t));
        }
      }
    }
    auto ex = unroll(pair.prompt, pair.completion, cfg.context);
    examples.insert(examples.end(), std::make_move_iterator(ex.begin()),
                    std::make_move_iterator(ex.end()));
  }
  if (examples.empty()) throw std::invalid_argument("train_sft: corpus has no completion tokens");

  ModelParams params = init;
  SgdMomentum opt(cfg, config.learning_rate, config.momentum, config.clip_norm);
  std::vector<std::size_t> order(examples.size());
  std::vector<Example> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, Stage::sft_shuffle, epoch));
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(examples[order[i]]);
      const auto lg = nll_loss_and_grad(params, std::span<const Example>(batch));
      opt.step(params, lg.grad);
    }
  }
  return params;
}

Model::Model(const ModelParams& params)
    : config_(params.config),
      slot_proj_(slot_projection(params)),
      b1_(params.b1.begin(), params.b1.end()),
      w2_(params.w2.begin(), params.w2.end()),
      b2_(params.b2.begin(), params.b2.end()),
      counter_(std::make_unique<ForwardCounter>()) {}

void Model::log_probs(std::span<const TokenId> context, std::span<double> out) const {
  check_context(config_, context);
  const std::size_t K = config_.context, V = config_.vocab_size, h = config_.hidden;
  if (out.size() != V) throw std::invalid_argument("output span must have vocab_size entries");
  counter_->add();

  thread_local std::vector<double> hid;
  hid.assign(b1_.begin(), b1_.end());
  for (std::size_t k = 0; k < K; ++k) {
    const double* row = slot_proj_.data() + (k * V + static_cast<std::size_t>(context[k])) * h;
    for (std::size_t j = 0; j < h; ++j) hid[j] += row[j];
  }
  for (std::size_t j = 0; j < h; ++j) hid[j] = std::tanh(hid[j]);
  std::copy(b2_.begin(), b2_.end(), out.begin());
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = hid[j];
    const double* w2row = w2_.data() + j * V;
    for (std::size_t v = 0; v < V; ++v) out[v] += hj * w2row[v];
  }
  log_softmax_inplace(out);
}

std::vector<double> Model::log_probs(std::span<const TokenId> context) const {
  std::vector<double> out(config_.vocab_size);
  log_probs(context, out);
  return out;
}

std::vector<double> Model::probs(std::span<const TokenId> context) const {
  auto out = log_probs(context);
  for (auto& v : out) v = std::exp(v);
  return out;
}

std::vector<double> Model::sequence_log_probs(std::span<const TokenId> prompt,
                                              std::span<const TokenId> completion) const {
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  std::vector<double> out;
  out.reserve(completion.size());
  std::vector<double> lp(config_.vocab_size);
  for (std::size_t t = 0; t < completion.size(); ++t) {
    const auto ctx = make_context(seq, prompt.size() + t, config_.context);
    log_probs(ctx, lp);
    out.push_back(lp.at(static_cast<std::size_t>(completion[t])));
  }
  return out;
}

}  // namespace ctlab::nanolm
