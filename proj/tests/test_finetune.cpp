#include <gtest/gtest.h>

#include "lfp/finetune.hpp"

using namespace lfp;
using namespace lfp::finetune;

namespace {

RewardConfig table_config() {
  RewardConfig cfg;
  cfg.lexicon.entries = {{"great", 3.1}, {"bad", -2.5}, {"two", 2.0}};
  return cfg;
}

// Six-token toy world: reward is the count of token 0 in the completion.
struct PpoWorld {
  toymodel::TinyTransformer reference = toymodel::TinyTransformer::init({6, 8, 1, 12}, 3);
  std::vector<std::vector<int>> prefixes = {{1, 2}, {3, 4}, {5, 1}};
  SequenceReward reward = [](std::span<const int> ids) {
    return static_cast<double>(std::count(ids.begin() + 2, ids.end(), 0));
  };

  PpoConfig config(double kl, int steps) const {
    PpoConfig c;
    c.kl_coefficient = kl;
    c.steps = steps;
    c.batch_size = 16;
    c.mini_batch_size = 8;
    c.learning_rate = 1e-2;
    c.completion_length = 6;
    c.seed = 21;
    return c;
  }
};

double tail_kl(const std::vector<PpoStepStats>& trace, std::size_t k) {
  double s = 0;
  for (std::size_t i = trace.size() - k; i < trace.size(); ++i) s += trace[i].mean_kl;
  return s / static_cast<double>(k);
}

}  // namespace

TEST(Reward, Examples) {
  const auto cfg = table_config();
  EXPECT_EQ(reward(std::vector<std::string>{}, cfg), 0.0);
  EXPECT_NEAR(reward(std::vector<std::string>{"great"}, cfg), 0.62, 1e-12);
  EXPECT_EQ(reward(std::vector<std::string>(30, "two"), cfg), 10.0);
  EXPECT_EQ(reward(std::vector<std::string>(30, "bad"), cfg), -10.0);
  EXPECT_NEAR(reward(std::vector<std::string>{"great", "unknown", "bad"}, cfg), 0.12, 1e-12);
}

TEST(Reward, AlwaysWithinClipProperty) {
  const auto cfg = table_config();
  numerics::Rng rng(4);
  const std::vector<std::string> words = {"great", "bad", "two", "other"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> seq(rng.below(80));
    for (auto& w : seq) w = words[rng.below(words.size())];
    const double r = reward(seq, cfg);
    EXPECT_GE(r, -10.0);
    EXPECT_LE(r, 10.0);
  }
}

TEST(Reward, SequenceRewardMatchesStringReward) {
  const auto cfg = table_config();
  toymodel::Vocabulary vocab({"great", "bad", "two", "other"});
  const auto fn = make_sequence_reward(vocab, cfg);
  const std::vector<int> ids = {0, 3, 1, 2, 2};
  EXPECT_DOUBLE_EQ(fn(ids), reward(vocab.decode(ids), cfg));
  RewardConfig bad = cfg;
  bad.scale_divisor = 0;
  EXPECT_THROW(make_sequence_reward(vocab, bad), std::invalid_argument);
}

TEST(KlPenalty, Examples) {
  const std::vector<double> a = {-1.0, -2.0, -0.5};
  EXPECT_EQ(kl_penalty(a, a), 0.0);
  std::vector<double> ref(10), pol(10);
  for (int i = 0; i < 10; ++i) {
    ref[i] = -0.3 * i;
    pol[i] = ref[i] + 0.1;
  }
  EXPECT_NEAR(kl_penalty(pol, ref), 0.1, 1e-12);
  EXPECT_NEAR(kl_penalty(std::vector<double>{-1.5}, std::vector<double>{-1.0}), -0.5, 1e-15);
  EXPECT_THROW(kl_penalty(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Surrogate, Examples) {
  EXPECT_EQ(ppo_surrogate(1.0, 0.7, 0.2), 0.7);
  EXPECT_NEAR(ppo_surrogate(2.0, 1.0, 0.2), 1.2, 1e-15);
  EXPECT_NEAR(ppo_surrogate(0.5, -1.0, 0.2), -0.8, 1e-15);
}

TEST(Surrogate, IdentityAtRatioOneAndMinBound) {
  numerics::Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double a = 3 * rng.normal();
    const double ratio = std::exp(rng.normal());
    const double eps = rng.uniform(0.01, 0.99);
    EXPECT_EQ(ppo_surrogate(1.0, a, eps), a);
    EXPECT_LE(ppo_surrogate(ratio, a, eps), ratio * a + 1e-15);
  }
}

TEST(Surrogate, GradientMatchesFiniteDifferences) {
  numerics::Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const double a = rng.normal();
    const double ratio = rng.uniform(0.3, 2.0);
    const double eps = 0.2;
    // Skip the kinks at the clip boundaries.
    if (std::abs(ratio - 1.2) < 1e-3 || std::abs(ratio - 0.8) < 1e-3) continue;
    const double h = 1e-7;
    const double fd = (ppo_surrogate(ratio + h, a, eps) - ppo_surrogate(ratio - h, a, eps)) / (2 * h);
    EXPECT_NEAR(ppo_surrogate_grad(ratio, a, eps), fd, 1e-6) << "ratio " << ratio << " adv " << a;
  }
}

TEST(Ppo, ZeroStepsLeavesPolicyIdentical) {
  PpoWorld w;
  const auto r = ppo_train(w.reference, w.reference, w.prefixes, w.reward, w.config(0.5, 0));
  EXPECT_EQ(r.policy, w.reference);
  EXPECT_TRUE(r.trace.empty());
}

TEST(Ppo, TraceLengthAndDeterminism) {
  PpoWorld w;
  const auto cfg = w.config(0.5, 5);
  const auto a = ppo_train(w.reference, w.reference, w.prefixes, w.reward, cfg);
  const auto b = ppo_train(w.reference, w.reference, w.prefixes, w.reward, cfg);
  ASSERT_EQ(a.trace.size(), 5u);
  EXPECT_EQ(a.policy, b.policy);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].step, static_cast<int>(i));
    EXPECT_EQ(a.trace[i].mean_reward, b.trace[i].mean_reward);
  }
  // The first batch is sampled from the unchanged policy, so its KL is exactly zero.
  EXPECT_EQ(a.trace[0].mean_kl, 0.0);
  EXPECT_NE(a.policy, w.reference);
}

TEST(Ppo, LearnsRewardedToken) {
  PpoWorld w;
  const auto r = ppo_train(w.reference, w.reference, w.prefixes, w.reward, w.config(0.0, 40));
  const auto [head, tail] = head_tail_reward(r.trace);
  EXPECT_GT(tail, head + 0.5);
}

TEST(Ppo, KlCoefficientRegularizesMonotonically) {
  PpoWorld w;
  const auto free = ppo_train(w.reference, w.reference, w.prefixes, w.reward, w.config(0.0, 40));
  const auto tight = ppo_train(w.reference, w.reference, w.prefixes, w.reward, w.config(5.0, 40));
  EXPECT_LT(tail_kl(tight.trace, 10), tail_kl(free.trace, 10));
}

TEST(Ppo, InputErrors) {
  PpoWorld w;
  EXPECT_THROW(ppo_train(w.reference, w.reference, {}, w.reward, w.config(0.5, 1)), std::invalid_argument);
  auto cfg = w.config(0.5, 1);
  cfg.clip_epsilon = 1.0;
  EXPECT_THROW(ppo_train(w.reference, w.reference, w.prefixes, w.reward, cfg), std::invalid_argument);
  const auto other = toymodel::TinyTransformer::init({6, 8, 2, 12}, 3);
  EXPECT_THROW(ppo_train(other, w.reference, w.prefixes, w.reward, w.config(0.5, 1)), std::invalid_argument);
}

TEST(Ppo, TraceCsvAndHeadTail) {
  std::vector<PpoStepStats> trace;
  for (int i = 0; i < 20; ++i) trace.push_back({i, static_cast<double>(i), 0.0});
  const auto [head, tail] = head_tail_reward(trace);
  EXPECT_DOUBLE_EQ(head, 0.5);
  EXPECT_DOUBLE_EQ(tail, 18.5);
  const auto csv = reward_trace_csv(trace);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,mean_reward,mean_kl");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 21);
}

TEST(Pretrain, LossDecreases) {
  auto model = toymodel::TinyTransformer::init({6, 8, 1, 12}, 5);
  std::vector<std::vector<int>> corpus;
  for (int d = 0; d < 20; ++d) corpus.push_back({0, 1, 2, 3, 4, 5, 0, 1, 2, 3});
  PretrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.seed = 1;
  const auto trace = pretrain_lm(model, corpus, cfg);
  ASSERT_EQ(trace.size(), 60u);
  EXPECT_LT(trace.back(), 0.5 * trace.front());
}
