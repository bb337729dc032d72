#pragma once

// Zero-ablation of dictionary features inside the MLP of selected layers.

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfp/finetune.hpp"
#include "lfp/numerics.hpp"
#include "lfp/sae.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::ablate {

struct LayerAblation {
  int layer = 0;
  sae::SparseAutoencoder autoencoder;
  std::vector<int> features;
};

struct AblationSpec {
  std::vector<LayerAblation> layers;

  bool empty() const {
    return std::all_of(layers.begin(), layers.end(), [](const auto& l) { return l.features.empty(); });
  }

  void validate(const toymodel::TinyTransformer& model) const {
    for (const auto& l : layers) {
      if (l.layer < 0 || l.layer >= model.config.n_layers) {
        throw std::out_of_range("ablation: layer " + std::to_string(l.layer) + " out of range");
      }
      if (l.autoencoder.input_dim() != model.config.mlp_width()) {
        throw std::invalid_argument("ablation: autoencoder input width does not match the MLP width");
      }
      for (int f : l.features) {
        if (f < 0 || f >= l.autoencoder.hidden_size()) {
          throw std::out_of_range("ablation: feature " + std::to_string(f) + " out of range for layer " +
                                  std::to_string(l.layer) + " (dictionary size " +
                                  std::to_string(l.autoencoder.hidden_size()) + ")");
        }
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& l : layers) j.push_back({{"layer", l.layer}, {"features", l.features}});
    return j;
  }
};

enum class AblationMode {
  subtract_contribution,  // a - sum_i c_i d_i, SAE residual kept
  full_replacement,       // decode(encode(a) with ablated coefficients zeroed)
};

/// Removes the contribution c_i * d_i of each listed feature from every row of `a`.
inline void subtract_features(const sae::SparseAutoencoder& ae, const std::vector<int>& features, Matrix& a) {
  if (features.empty()) return;
  const Matrix c = ae.encode_batch(a);
  const Matrix d = ae.decoder_matrix();
  for (int f : features) a -= c.col(f) * d.col(f).transpose();
}

/// Adds back what subtract_features removed, given the coefficients it saw.
inline void restore_features(const sae::SparseAutoencoder& ae, const std::vector<int>& features, const Matrix& coeffs,
                             Matrix& a) {
  const Matrix d = ae.decoder_matrix();
  for (int f : features) a += coeffs.col(f) * d.col(f).transpose();
}

inline toymodel::MlpHook make_hook(const AblationSpec& spec, AblationMode mode = AblationMode::subtract_contribution) {
  return [&spec, mode](int layer, Matrix& hidden) {
    for (const auto& l : spec.layers) {
      if (l.layer != layer || l.features.empty()) continue;
      if (mode == AblationMode::subtract_contribution) {
        subtract_features(l.autoencoder, l.features, hidden);
      } else {
        Matrix c = l.autoencoder.encode_batch(hidden);
        for (int f : l.features) c.col(f).setZero();
        hidden = l.autoencoder.decode_batch(c);
      }
    }
  };
}

/// Forward pass with the spec applied; captures the (ablated) activations of every layer in the spec.
inline toymodel::ForwardResult ablated_forward(const toymodel::TinyTransformer& model, std::span<const int> tokens,
                                               const AblationSpec& spec,
                                               AblationMode mode = AblationMode::subtract_contribution) {
  spec.validate(model);
  toymodel::ForwardOptions opts;
  for (const auto& l : spec.layers) {
    if (std::find(opts.capture_layers.begin(), opts.capture_layers.end(), l.layer) == opts.capture_layers.end()) {
      opts.capture_layers.push_back(l.layer);
    }
  }
  const toymodel::MlpHook hook = make_hook(spec, mode);
  if (!spec.empty()) opts.hook = &hook;
  return toymodel::forward(model, tokens, opts);
}

struct EvalConfig {
  int n_completions = 100;
  int completion_length = 16;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  AblationMode mode = AblationMode::subtract_contribution;
};

struct RewardComparison {
  double before = 0.0;
  double after = 0.0;
};

/// Mean reward of sampled completions without and with the ablation. Completion
/// j uses prefix j mod |prefixes| and the same sampler seed in both runs.
inline RewardComparison ablation_reward_eval(const toymodel::TinyTransformer& model, const AblationSpec& spec,
                                             const std::vector<std::vector<int>>& prefixes,
                                             const finetune::SequenceReward& reward_fn, const EvalConfig& cfg) {
  if (cfg.n_completions < 1) throw std::invalid_argument("ablation_reward_eval: n_completions must be >= 1");
  if (prefixes.empty()) throw std::invalid_argument("ablation_reward_eval: empty prefix set");
  spec.validate(model);
  const toymodel::MlpHook hook = make_hook(spec, cfg.mode);
  const toymodel::MlpHook* active = spec.empty() ? nullptr : &hook;
  const numerics::Rng root(cfg.seed);
  RewardComparison r;
  for (int j = 0; j < cfg.n_completions; ++j) {
    const auto& prefix = prefixes[static_cast<std::size_t>(j) % prefixes.size()];
    const std::uint64_t s = root.fork(static_cast<std::uint64_t>(j)).next_u64();
    r.before += reward_fn(toymodel::generate(model, prefix, cfg.completion_length, cfg.temperature, s));
    r.after += reward_fn(toymodel::generate(model, prefix, cfg.completion_length, cfg.temperature, s, active));
  }
  r.before /= cfg.n_completions;
  r.after /= cfg.n_completions;
  return r;
}

}  // namespace lfp::ablate
