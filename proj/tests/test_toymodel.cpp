#include <filesystem>

#include <gtest/gtest.h>

#include "lfp/toymodel.hpp"

using namespace lfp;
using namespace lfp::toymodel;

namespace {

ModelConfig small_config() { return {11, 8, 3, 12}; }

TinyTransformer small_model(std::uint64_t seed = 1) {
  auto m = TinyTransformer::init(small_config(), seed);
  // Non-zero biases so their gradients are exercised too.
  numerics::Rng rng(seed + 100);
  for (auto& l : m.layers) {
    for (Eigen::Index i = 0; i < l.b_in.size(); ++i) l.b_in.data()[i] = 0.1 * rng.normal();
    for (Eigen::Index i = 0; i < l.b_out.size(); ++i) l.b_out.data()[i] = 0.1 * rng.normal();
  }
  return m;
}

std::vector<int> random_tokens(int n, int vocab, std::uint64_t seed) {
  numerics::Rng rng(seed);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace

TEST(Vocabulary, EncodeDecode) {
  Vocabulary v({"the", "movie", "was"});
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.add("great"), 3);
  EXPECT_EQ(v.add("the"), 0);
  const std::vector<std::string> words = {"the", "great", "movie"};
  const auto ids = v.encode(words);
  EXPECT_EQ(ids, (std::vector<int>{0, 3, 1}));
  EXPECT_EQ(v.decode(ids), words);
  EXPECT_FALSE(v.find("absent"));
  EXPECT_THROW(v.id("absent"), std::out_of_range);
}

TEST(Forward, SingleTokenAttentionIsOne) {
  const auto m = small_model();
  const std::vector<int> tok = {4};
  const auto r = forward(m, tok);
  EXPECT_EQ(r.logits.rows(), 1);
  EXPECT_EQ(r.logits.cols(), 11);
  for (const auto& a : r.attention) {
    ASSERT_EQ(a.rows(), 1);
    EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  }
}

TEST(Forward, AttentionRowsSumToOneAndAreCausal) {
  const auto m = small_model();
  const auto tok = random_tokens(8, 11, 3);
  const auto r = forward(m, tok);
  for (const auto& a : r.attention) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-9);
      for (Eigen::Index j = i + 1; j < a.cols(); ++j) EXPECT_EQ(a(i, j), 0.0);
    }
  }
}

TEST(Forward, CausalityProperty) {
  const auto m = small_model(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto tok = random_tokens(10, 11, 50 + trial);
    const auto before = forward(m, tok).logits;
    const std::size_t t = static_cast<std::size_t>(trial % 10);
    tok[t] = (tok[t] + 1) % 11;
    const auto after = forward(m, tok).logits;
    EXPECT_EQ(before.topRows(static_cast<Eigen::Index>(t)), after.topRows(static_cast<Eigen::Index>(t)));
    if (t + 1 < tok.size()) {
      EXPECT_NE(before.row(static_cast<Eigen::Index>(t)), after.row(static_cast<Eigen::Index>(t)));
    }
  }
}

TEST(Forward, ZeroValueAndMlpOutputGivesEmbeddingPath) {
  auto m = TinyTransformer::init(small_config(), 9);
  for (auto& l : m.layers) {
    l.wv.setZero();
    l.w_out.setZero();
    l.b_out.setZero();
  }
  const auto tok = random_tokens(7, 11, 4);
  const auto r = forward(m, tok);
  Matrix expected(7, 11);
  for (Eigen::Index t = 0; t < 7; ++t) {
    expected.row(t) = (m.tok_emb.row(tok[static_cast<std::size_t>(t)]) + m.pos_emb.row(t)) * m.unembed;
  }
  EXPECT_LE((r.logits - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, DeterministicAndCaptures) {
  const auto m = small_model();
  const auto tok = random_tokens(6, 11, 8);
  ForwardOptions opts;
  opts.capture_layers = {2, 0};
  const auto a = forward(m, tok, opts);
  const auto b = forward(m, tok, opts);
  EXPECT_EQ(a.logits, b.logits);
  ASSERT_EQ(a.activations.layers, (std::vector<int>{2, 0}));
  EXPECT_EQ(a.activations.at(0).rows(), 6);
  EXPECT_EQ(a.activations.at(0).cols(), 32);
  EXPECT_THROW(a.activations.at(1), std::out_of_range);
  opts.last_position_only = true;
  const Matrix last = forward(m, tok, opts).logits;
  ASSERT_EQ(last.rows(), 1);
  EXPECT_LE((last - a.logits.bottomRows(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, HookEditsDownstream) {
  const auto m = small_model();
  const auto tok = random_tokens(5, 11, 6);
  MlpHook zero_layer1 = [](int layer, Matrix& h) {
    if (layer == 1) h.setZero();
  };
  ForwardOptions opts;
  opts.hook = &zero_layer1;
  opts.capture_layers = {1};
  const auto r = forward(m, tok, opts);
  EXPECT_EQ(r.activations.at(1), Matrix::Zero(5, 32));
  EXPECT_NE(r.logits, forward(m, tok).logits);
}

TEST(Forward, InputErrors) {
  const auto m = small_model();
  EXPECT_THROW(forward(m, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(forward(m, std::vector<int>{11}), std::out_of_range);
  EXPECT_THROW(forward(m, std::vector<int>(13, 0)), std::invalid_argument);
  ForwardOptions opts;
  opts.capture_layers = {3};
  EXPECT_THROW(forward(m, std::vector<int>{1}, opts), std::out_of_range);
}

TEST(Backward, MatchesFiniteDifferences) {
  const auto model = small_model(5);
  const auto tok = random_tokens(6, 11, 12);
  numerics::Rng rng(77);
  Matrix weights(6, 11);
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();
  auto objective = [&](const TinyTransformer& m) { return forward(m, tok).logits.cwiseProduct(weights).sum(); };

  ForwardOptions opts;
  opts.keep_cache = true;
  const auto fwd = forward(model, tok, opts);
  auto grad = model.zeros_like();
  backward(model, tok, fwd, weights, grad);

  std::vector<std::pair<std::string, Matrix>> analytic;
  grad.for_each_param([&](const std::string& name, const Matrix& g) { analytic.emplace_back(name, g); });
  std::size_t index = 0;
  auto perturbed = model;
  perturbed.for_each_param([&](const std::string& name, Matrix& p) {
    const Matrix& g = analytic[index++].second;
    // Spot-check a few coordinates per parameter to keep the test fast.
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(p.size(), 6); ++k) {
      const Eigen::Index i = (k * 7919) % p.size();
      const double orig = p.data()[i];
      const double h = 1e-5;
      p.data()[i] = orig + h;
      const double fp = objective(perturbed);
      p.data()[i] = orig - h;
      const double fm = objective(perturbed);
      p.data()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      EXPECT_NEAR(g.data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << name << "[" << i << "]";
    }
  });
}

TEST(Backward, RequiresCache) {
  const auto m = small_model();
  const std::vector<int> tok = {1, 2};
  auto grad = m.zeros_like();
  EXPECT_THROW(backward(m, tok, forward(m, tok), Matrix::Zero(2, 11), grad), std::invalid_argument);
}

TEST(Generate, ZeroTokensReturnsPrefix) {
  const auto m = small_model();
  const std::vector<int> prefix = {1, 2, 3};
  EXPECT_EQ(generate(m, prefix, 0, 1.0, 5), prefix);
}

TEST(Generate, TinyTemperatureMatchesGreedy) {
  const auto m = small_model(3);
  const std::vector<int> prefix = {1, 7};
  std::vector<int> greedy = prefix;
  for (int i = 0; i < 8; ++i) {
    const auto logits = forward(m, greedy).logits;
    Eigen::Index arg = 0;
    logits.row(logits.rows() - 1).maxCoeff(&arg);
    greedy.push_back(static_cast<int>(arg));
  }
  EXPECT_EQ(generate(m, prefix, 8, 1e-6, 42), greedy);
}

TEST(Generate, SeedDeterminismAndErrors) {
  const auto m = small_model();
  const std::vector<int> prefix = {4};
  EXPECT_EQ(generate(m, prefix, 10, 1.0, 9), generate(m, prefix, 10, 1.0, 9));
  EXPECT_THROW(generate(m, prefix, 3, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(generate(m, prefix, 3, -1.0, 1), std::invalid_argument);
  EXPECT_THROW(generate(m, prefix, 12, 1.0, 1), std::invalid_argument);
}

TEST(Divergence, EqualModelsAreZero) {
  const auto m = small_model();
  const auto r = parameter_divergence(m, m, {2});
  EXPECT_EQ(r.per_layer, std::vector<double>(3, 0.0));
  EXPECT_EQ(r.selected_layers, (std::vector<int>{0, 1}));
}

TEST(Divergence, SingleWeightInLayerTwo) {
  const auto base = small_model();
  auto tuned = base;
  tuned.layers[2].w_in(1, 3) += 3.0;
  const auto r = parameter_divergence(base, tuned, {1});
  EXPECT_EQ(r.per_layer[0], 0.0);
  EXPECT_EQ(r.per_layer[1], 0.0);
  EXPECT_NEAR(r.per_layer[2], 3.0, 1e-12);
  EXPECT_EQ(r.selected_layers, std::vector<int>{2});
  tuned = base;
  tuned.layers[2].wq(0, 0) += 3.0;
  EXPECT_EQ(parameter_divergence(base, tuned, {1, LayerSelection::highest_divergence, true}).per_layer[2], 0.0);
}

TEST(Divergence, TopKAllAndLowestLayers) {
  const auto base = small_model(1);
  const auto tuned = small_model(2);
  EXPECT_EQ(parameter_divergence(base, tuned, {3}).selected_layers, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(parameter_divergence(base, tuned, {2, LayerSelection::lowest_layers}).selected_layers,
            (std::vector<int>{0, 1}));
  EXPECT_THROW(parameter_divergence(base, tuned, {4}), std::invalid_argument);
  auto other = TinyTransformer::init({11, 8, 2, 12}, 1);
  EXPECT_THROW(parameter_divergence(base, other, {1}), std::invalid_argument);
}

TEST(Divergence, SymmetricNonNegativeAndTopKOrdered) {
  for (std::uint64_t s = 1; s < 6; ++s) {
    const auto a = small_model(s);
    const auto b = small_model(s + 10);
    const auto ab = parameter_divergence(a, b, {2});
    const auto ba = parameter_divergence(b, a, {2});
    EXPECT_EQ(ab.per_layer, ba.per_layer);
    for (double v : ab.per_layer) EXPECT_GT(v, 0.0);
    double min_selected = 1e300, max_other = -1;
    for (int l = 0; l < 3; ++l) {
      const bool sel = std::count(ab.selected_layers.begin(), ab.selected_layers.end(), l) > 0;
      if (sel) min_selected = std::min(min_selected, ab.per_layer[l]);
      else max_other = std::max(max_other, ab.per_layer[l]);
    }
    EXPECT_GE(min_selected, max_other);
  }
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "lfp_toymodel_ckpt";
  std::filesystem::remove_all(dir);
  const auto m = small_model(4);
  Vocabulary v({"a", "b"});
  save_model(m, dir / "m.lfpm", &v);
  const auto loaded = load_model(dir / "m.lfpm");
  EXPECT_EQ(loaded.model, m);
  EXPECT_EQ(loaded.vocabulary.words(), v.words());
  EXPECT_THROW(tensorio::read_container(dir / "m.lfpm", "LFPS"), tensorio::FormatError);
}
