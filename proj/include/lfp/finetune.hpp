#pragma once

// Toy RLHF: lexicon reward, sampled-KL penalty, the clipped PPO surrogate and
// a critic-free PPO loop, plus next-token pretraining of the reference model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lfp/numerics.hpp"
#include "lfp/tensorio.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::finetune {

using toymodel::TinyTransformer;

struct RewardConfig {
  tensorio::RewardLexicon lexicon;
  double scale_divisor = 5.0;
  double clip_low = -10.0;
  double clip_high = 10.0;

  void validate() const {
    if (!(clip_low < clip_high)) throw std::invalid_argument("RewardConfig: clip_low must be < clip_high");
    if (!(scale_divisor > 0.0)) throw std::invalid_argument("RewardConfig: scale_divisor must be > 0");
  }
};

/// clip(sum V(token) / scale_divisor, clip_low, clip_high); unknown tokens score 0.
inline double reward(std::span<const std::string> tokens, const RewardConfig& cfg) {
  double total = 0.0;
  for (const auto& t : tokens) total += cfg.lexicon.value(t);
  return std::clamp(total / cfg.scale_divisor, cfg.clip_low, cfg.clip_high);
}

using SequenceReward = std::function<double(std::span<const int>)>;

/// Reward over token ids, with lexicon values looked up once per vocabulary entry.
inline SequenceReward make_sequence_reward(const toymodel::Vocabulary& vocab, const RewardConfig& cfg) {
  cfg.validate();
  std::vector<double> values(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) values[i] = cfg.lexicon.value(vocab.word(static_cast<int>(i)));
  return [values = std::move(values), cfg](std::span<const int> ids) {
    double total = 0.0;
    for (int id : ids) total += values.at(static_cast<std::size_t>(id));
    return std::clamp(total / cfg.scale_divisor, cfg.clip_low, cfg.clip_high);
  };
}

/// Mean over sampled tokens of (policy log-prob - reference log-prob).
inline double kl_penalty(std::span<const double> policy_logprobs, std::span<const double> reference_logprobs) {
  if (policy_logprobs.size() != reference_logprobs.size()) {
    throw std::invalid_argument("kl_penalty: length mismatch");
  }
  if (policy_logprobs.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < policy_logprobs.size(); ++i) sum += policy_logprobs[i] - reference_logprobs[i];
  return sum / static_cast<double>(policy_logprobs.size());
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
inline double ppo_surrogate(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

/// d surrogate / d ratio. Zero exactly when the clipped branch is selected and
/// the ratio lies outside the trust region.
inline double ppo_surrogate_grad(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  if (ratio * advantage <= clipped * advantage) return advantage;
  return clipped == ratio ? advantage : 0.0;
}

// ---------------------------------------------------------------------------
// Optimizer plumbing shared by pretraining and PPO

class ModelAdam {
 public:
  ModelAdam(const TinyTransformer& model, numerics::AdamConfig cfg) {
    model.for_each_param([&](const std::string&, const Matrix& m) {
      states_.push_back(numerics::AdamState::zeros_like(m, cfg));
    });
  }

  void step(TinyTransformer& model, const TinyTransformer& grad) {
    std::vector<const Matrix*> grads;
    grad.for_each_param([&](const std::string&, const Matrix& g) { grads.push_back(&g); });
    std::size_t i = 0;
    model.for_each_param([&](const std::string&, Matrix& p) {
      numerics::adam_update(states_[i], p, *grads[i]);
      ++i;
    });
  }

 private:
  std::vector<numerics::AdamState> states_;
};

inline double global_norm(const TinyTransformer& grad) {
  double sq = 0.0;
  grad.for_each_param([&](const std::string&, const Matrix& g) { sq += g.squaredNorm(); });
  return std::sqrt(sq);
}

/// Rescales in place so the global norm is at most max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(TinyTransformer& grad, double max_norm) {
  const double norm = global_norm(grad);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    grad.for_each_param([&](const std::string&, Matrix& g) { g *= s; });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Pretraining (next-token prediction)

struct PretrainConfig {
  int steps = 1500;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
};

/// Mean next-token cross-entropy of one sequence and its logits gradient.
inline double lm_loss_and_dlogits(const Matrix& logits, std::span<const int> tokens, Matrix& dlogits,
                                  double weight) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  dlogits = Matrix::Zero(T, logits.cols());
  double loss = 0.0;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const RowVector lp = numerics::log_softmax_row(logits.row(t));
    const int target = tokens[static_cast<std::size_t>(t + 1)];
    loss -= lp(target);
    dlogits.row(t) = lp.array().exp().matrix() * weight;
    dlogits(t, target) -= weight;
  }
  return loss;
}

/// Trains `model` in place on fixed-length token sequences; returns per-step mean loss.
inline std::vector<double> pretrain_lm(TinyTransformer& model, const std::vector<std::vector<int>>& corpus,
                                       const PretrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_lm: empty corpus");
  numerics::Rng rng(cfg.seed);
  ModelAdam opt(model, {.learning_rate = cfg.learning_rate});
  std::vector<double> trace;
  toymodel::ForwardOptions fo;
  fo.keep_cache = true;
  for (int step = 0; step < cfg.steps; ++step) {
    TinyTransformer grad = model.zeros_like();
    std::size_t n_pred = 0;
    std::vector<std::size_t> picks;
    for (int b = 0; b < cfg.batch_size; ++b) {
      picks.push_back(rng.below(corpus.size()));
      n_pred += corpus[picks.back()].size() - 1;
    }
    const double w = 1.0 / static_cast<double>(std::max<std::size_t>(n_pred, 1));
    double loss = 0.0;
    for (std::size_t idx : picks) {
      const auto& seq = corpus[idx];
      const auto fwd = toymodel::forward(model, seq, fo);
      Matrix dlogits;
      loss += lm_loss_and_dlogits(fwd.logits, seq, dlogits, w);
      toymodel::backward(model, seq, fwd, dlogits, grad);
    }
    loss *= w;
    if (!std::isfinite(loss)) throw std::runtime_error("pretrain_lm: non-finite loss at step " + std::to_string(step));
    clip_grad_norm(grad, cfg.max_grad_norm);
    opt.step(model, grad);
    trace.push_back(loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  double clip_epsilon = 0.2;
  double kl_coefficient = 0.5;
  int batch_size = 64;
  int mini_batch_size = 16;
  double max_grad_norm = 1.0;
  double learning_rate = 1e-6;
  int steps = 0;
  std::uint64_t seed = 0;
  int completion_length = 16;
  double temperature = 1.0;
  double baseline_decay = 0.9;

  void validate() const {
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw std::invalid_argument("PpoConfig: clip_epsilon must be in (0,1)");
    if (kl_coefficient < 0.0) throw std::invalid_argument("PpoConfig: kl_coefficient must be >= 0");
    if (batch_size < 1 || mini_batch_size < 1 || mini_batch_size > batch_size) {
      throw std::invalid_argument("PpoConfig: need 1 <= mini_batch_size <= batch_size");
    }
    if (!(max_grad_norm > 0.0) || !(learning_rate > 0.0)) throw std::invalid_argument("PpoConfig: rates must be > 0");
    if (steps < 0 || completion_length < 1) throw std::invalid_argument("PpoConfig: bad steps/completion_length");
    if (!(temperature > 0.0)) throw std::invalid_argument("PpoConfig: temperature must be > 0");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw std::invalid_argument("PpoConfig: baseline_decay in [0,1)");
  }
};

struct PpoStepStats {
  int step = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
};

struct PpoResult {
  TinyTransformer policy;
  std::vector<PpoStepStats> trace;
};

struct Rollout {
  std::vector<int> tokens;
  std::size_t prefix_length = 0;
  std::vector<double> old_logprobs;
  double advantage = 0.0;
};

/// Log-probs of the completion tokens (positions >= prefix_length).
inline std::vector<double> completion_logprobs(const TinyTransformer& model, std::span<const int> tokens,
                                               std::size_t prefix_length) {
  const auto fwd = toymodel::forward(model, tokens);
  return toymodel::token_logprobs(fwd.logits, tokens, prefix_length);
}

/// Critic-free PPO. The advantage is total reward minus an exponential moving
/// average of batch-mean total reward, shared by every completion token.
inline PpoResult ppo_train(const TinyTransformer& policy_init, const TinyTransformer& reference,
                           const std::vector<std::vector<int>>& prefixes, const SequenceReward& reward_fn,
                           const PpoConfig& cfg) {
  cfg.validate();
  if (prefixes.empty()) throw std::invalid_argument("ppo_train: empty prefix set");
  if (!(policy_init.config == reference.config)) throw std::invalid_argument("ppo_train: architecture mismatch");

  PpoResult result{policy_init, {}};
  TinyTransformer& policy = result.policy;
  ModelAdam opt(policy, {.learning_rate = cfg.learning_rate});
  numerics::Rng rng(cfg.seed);
  std::optional<double> baseline;
  toymodel::ForwardOptions fo;
  fo.keep_cache = true;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Rollout> batch(static_cast<std::size_t>(cfg.batch_size));
    std::vector<double> totals(batch.size());
    double reward_sum = 0.0, kl_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& prefix = prefixes[rng.below(prefixes.size())];
      Rollout& r = batch[i];
      r.prefix_length = prefix.size();
      r.tokens = toymodel::generate(policy, prefix, cfg.completion_length, cfg.temperature, rng.next_u64());
      r.old_logprobs = completion_logprobs(policy, r.tokens, r.prefix_length);
      const auto ref_lp = completion_logprobs(reference, r.tokens, r.prefix_length);
      const double kl = kl_penalty(r.old_logprobs, ref_lp);
      const double rew = reward_fn(r.tokens);
      totals[i] = rew - cfg.kl_coefficient * kl;
      reward_sum += rew;
      kl_sum += kl;
    }
    const double n = static_cast<double>(batch.size());
    const double batch_mean = std::accumulate(totals.begin(), totals.end(), 0.0) / n;
    if (!baseline) baseline = batch_mean;
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].advantage = totals[i] - *baseline;
    baseline = cfg.baseline_decay * *baseline + (1.0 - cfg.baseline_decay) * batch_mean;
    result.trace.push_back({step, reward_sum / n, kl_sum / n});

    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t mb = 0; mb < order.size(); mb += static_cast<std::size_t>(cfg.mini_batch_size)) {
      const std::size_t end = std::min(order.size(), mb + static_cast<std::size_t>(cfg.mini_batch_size));
      std::size_t n_tokens = 0;
      for (std::size_t j = mb; j < end; ++j) n_tokens += batch[order[j]].old_logprobs.size();
      TinyTransformer grad = policy.zeros_like();
      double objective = 0.0;
      for (std::size_t j = mb; j < end; ++j) {
        const Rollout& r = batch[order[j]];
        const auto fwd = toymodel::forward(policy, r.tokens, fo);
        Matrix dlogits = Matrix::Zero(fwd.logits.rows(), fwd.logits.cols());
        for (std::size_t t = r.prefix_length, k = 0; t < r.tokens.size(); ++t, ++k) {
          const auto row = static_cast<Eigen::Index>(t - 1);
          const RowVector lp = numerics::log_softmax_row(fwd.logits.row(row));
          const int a = r.tokens[t];
          const double ratio = std::exp(lp(a) - r.old_logprobs[k]);
          objective += ppo_surrogate(ratio, r.advantage, cfg.clip_epsilon);
          // Loss is the negated mean surrogate; d loss / d logp = -g * ratio / N.
          const double coef =
              -ppo_surrogate_grad(ratio, r.advantage, cfg.clip_epsilon) * ratio / static_cast<double>(n_tokens);
          dlogits.row(row) = -coef * lp.array().exp().matrix();
          dlogits(row, a) += coef;
        }
        toymodel::backward(policy, r.tokens, fwd, dlogits, grad);
      }
      if (!std::isfinite(objective)) {
        throw std::runtime_error("ppo_train: non-finite surrogate at step " + std::to_string(step) +
                                 " (mean reward " + std::to_string(reward_sum / n) + ")");
      }
      clip_grad_norm(grad, cfg.max_grad_norm);
      opt.step(policy, grad);
    }
    if (!policy.all_finite()) throw std::runtime_error("ppo_train: parameters diverged at step " + std::to_string(step));
  }
  return result;
}

inline std::string reward_trace_csv(const std::vector<PpoStepStats>& trace) {
  std::ostringstream out;
  out << "step,mean_reward,mean_kl\n" << std::setprecision(10);
  for (const auto& s : trace) out << s.step << ',' << s.mean_reward << ',' << s.mean_kl << '\n';
  return out.str();
}

/// Means over the first and last `fraction` of the trace.
inline std::pair<double, double> head_tail_reward(const std::vector<PpoStepStats>& trace, double fraction = 0.1) {
  if (trace.empty()) throw std::invalid_argument("head_tail_reward: empty trace");
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(trace.size()))));
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    head += trace[i].mean_reward;
    tail += trace[trace.size() - 1 - i].mean_reward;
  }
  return {head / static_cast<double>(k), tail / static_cast<double>(k)};
}

}  // namespace lfp::finetune
