#include <gtest/gtest.h>

#include "lfp/ablate.hpp"

using namespace lfp;
using namespace lfp::ablate;

namespace {

const toymodel::ModelConfig kConfig{9, 4, 2, 16};  // MLP width 16

toymodel::TinyTransformer model() { return toymodel::TinyTransformer::init(kConfig, 7); }

sae::SparseAutoencoder identity_sae(int layer) {
  sae::SparseAutoencoder ae;
  ae.encoder = Matrix::Identity(16, 16);
  ae.bias = Vector::Zero(16);
  ae.layer_index = layer;
  return ae;
}

/// One-feature dictionary whose bias makes it fire on roughly half of the
/// positions of `tokens` at `layer`.
sae::SparseAutoencoder half_active_sae(const toymodel::TinyTransformer& m, const std::vector<int>& tokens, int layer) {
  auto ae = sae::SparseAutoencoder::init(16, 4, true, 1e-3, 3);
  ae.layer_index = layer;
  toymodel::ForwardOptions opts;
  opts.capture_layers = {layer};
  const Vector proj = toymodel::forward(m, tokens, opts).activations.at(layer) * ae.encoder.row(0).transpose();
  std::vector<double> v(proj.data(), proj.data() + proj.size());
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  ae.bias(0) = -v[v.size() / 2];
  return ae;
}

const std::vector<int> kTokens = {1, 4, 2, 8, 3, 3, 0, 5, 7, 6};

}  // namespace

TEST(AblatedForward, EmptySpecIsIdentity) {
  const auto m = model();
  AblationSpec spec;
  spec.layers.push_back({1, identity_sae(1), {}});
  EXPECT_EQ(ablated_forward(m, kTokens, spec).logits, toymodel::forward(m, kTokens).logits);
  EXPECT_EQ(ablated_forward(m, kTokens, AblationSpec{}).logits, toymodel::forward(m, kTokens).logits);
}

TEST(AblatedForward, InactiveFeatureIsIdentity) {
  const auto m = model();
  auto ae = identity_sae(0);
  ae.bias(5) = -1e6;
  AblationSpec spec{{{0, ae, {5}}}};
  EXPECT_EQ(ablated_forward(m, kTokens, spec).logits, toymodel::forward(m, kTokens).logits);
}

TEST(AblatedForward, IdentitySaeZeroesCoordinate) {
  const auto m = model();
  AblationSpec spec{{{1, identity_sae(1), {3}}}};
  const auto r = ablated_forward(m, kTokens, spec);
  toymodel::ForwardOptions opts;
  opts.capture_layers = {1};
  const Matrix clean = toymodel::forward(m, kTokens, opts).activations.at(1);
  const Matrix& ablated = r.activations.at(1);
  for (Eigen::Index t = 0; t < clean.rows(); ++t) {
    // GELU output can be negative; ReLU coding only removes the positive part.
    EXPECT_NEAR(ablated(t, 3), std::min(clean(t, 3), 0.0), 1e-15);
    for (Eigen::Index k = 0; k < 16; ++k) {
      if (k != 3) {
        EXPECT_EQ(ablated(t, k), clean(t, k));
      }
    }
  }
}

TEST(AblatedForward, ReplacementModeUsesReconstruction) {
  const auto m = model();
  AblationSpec spec{{{0, identity_sae(0), {2}}}};
  const auto r = ablated_forward(m, kTokens, spec, AblationMode::full_replacement);
  EXPECT_GE(r.activations.at(0).minCoeff(), 0.0);
  EXPECT_EQ(r.activations.at(0).col(2), Vector::Zero(static_cast<Eigen::Index>(kTokens.size())));
}

TEST(Ablation, SubtractThenRestoreRoundTrip) {
  numerics::Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ae = sae::SparseAutoencoder::init(16, 32, trial % 2 == 0, 1e-3, rng.next_u64());
    Matrix a(6, 16);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    const Matrix original = a;
    const std::vector<int> features = {0, 5, 31};
    const Matrix coeffs = ae.encode_batch(a);
    subtract_features(ae, features, a);
    EXPECT_GT((a - original).norm(), 0.0);
    restore_features(ae, features, coeffs, a);
    EXPECT_LE((a - original).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Ablation, LocalityBeforeFirstActivePosition) {
  const auto m = model();
  for (int layer = 0; layer < 2; ++layer) {
    const auto ae = half_active_sae(m, kTokens, layer);
    toymodel::ForwardOptions opts;
    opts.capture_layers = {layer};
    const Matrix codes = ae.encode_batch(toymodel::forward(m, kTokens, opts).activations.at(layer));
    Eigen::Index first = 0;
    while (first < codes.rows() && codes(first, 0) == 0.0) ++first;
    ASSERT_LT(first, codes.rows());
    AblationSpec spec{{{layer, ae, {0}}}};
    const Matrix clean = toymodel::forward(m, kTokens).logits;
    const Matrix ablated = ablated_forward(m, kTokens, spec).logits;
    EXPECT_EQ(ablated.topRows(first), clean.topRows(first)) << "layer " << layer;
    EXPECT_NE(ablated.row(first), clean.row(first));
  }
}

TEST(Ablation, SpecValidation) {
  const auto m = model();
  EXPECT_THROW(ablated_forward(m, kTokens, AblationSpec{{{0, identity_sae(0), {16}}}}), std::out_of_range);
  EXPECT_THROW(ablated_forward(m, kTokens, AblationSpec{{{2, identity_sae(2), {0}}}}), std::out_of_range);
  auto narrow = sae::SparseAutoencoder::init(8, 8, true, 1e-3, 1);
  EXPECT_THROW(ablated_forward(m, kTokens, AblationSpec{{{0, narrow, {0}}}}), std::invalid_argument);
  const AblationSpec spec{{{1, identity_sae(1), {2, 4}}}};
  EXPECT_EQ(spec.to_json().dump(), R"([{"features":[2,4],"layer":1}])");
}

TEST(RewardEval, EmptySpecGivesEqualMeans) {
  const auto m = model();
  const std::vector<std::vector<int>> prefixes = {{1, 2}, {3}};
  const finetune::SequenceReward reward = [](std::span<const int> ids) {
    return static_cast<double>(std::count(ids.begin(), ids.end(), 4));
  };
  EvalConfig cfg;
  cfg.n_completions = 20;
  cfg.completion_length = 8;
  cfg.seed = 5;
  const auto r = ablation_reward_eval(m, AblationSpec{}, prefixes, reward, cfg);
  EXPECT_EQ(r.before, r.after);
  EXPECT_GT(r.before, 0.0);
  cfg.n_completions = 1;
  cfg.temperature = 1e-6;
  const AblationSpec spec{{{0, identity_sae(0), {1, 2, 3}}}};
  const auto a = ablation_reward_eval(m, spec, prefixes, reward, cfg);
  const auto b = ablation_reward_eval(m, spec, prefixes, reward, cfg);
  EXPECT_EQ(a.before, b.before);
  EXPECT_EQ(a.after, b.after);
  cfg.n_completions = 0;
  EXPECT_THROW(ablation_reward_eval(m, spec, prefixes, reward, cfg), std::invalid_argument);
}
