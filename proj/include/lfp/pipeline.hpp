#pragma once

// End-to-end orchestration behind the CLI subcommands. Every command reads its
// inputs from and writes its outputs under paths.out_dir, so commands can be
// rerun independently; all randomness derives from run.seed through
// numerics::stage_seed(seed, "<stage>").

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfp/ablate.hpp"
#include "lfp/analysis.hpp"
#include "lfp/builtin.hpp"
#include "lfp/config.hpp"
#include "lfp/explain.hpp"
#include "lfp/finetune.hpp"
#include "lfp/probes.hpp"
#include "lfp/sae.hpp"
#include "lfp/tensorio.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

struct Artifacts {
  fs::path root;

  fs::path base_model() const { return root / "models" / "base.lfpm"; }
  fs::path tuned_model() const { return root / "models" / "tuned.lfpm"; }
  fs::path pretrain_loss() const { return root / "pretrain_loss.csv"; }
  fs::path reward_trace() const { return root / "reward_trace.csv"; }
  fs::path layers() const { return root / "layers.json"; }
  fs::path activations(int layer) const { return root / "activations" / ("layer_" + std::to_string(layer) + ".lfpa"); }
  fs::path autoencoder(int layer, int h) const {
    return root / "sae" / ("layer_" + std::to_string(layer) + "_h" + std::to_string(h) + ".lfps");
  }
  fs::path sae_loss(int layer, int h) const {
    return root / "sae" / ("layer_" + std::to_string(layer) + "_h" + std::to_string(h) + "_loss.csv");
  }
  fs::path sweep_loss(int layer, double alpha) const {
    std::ostringstream a;
    a << alpha;
    return root / "sae" / "sweep" / ("layer_" + std::to_string(layer) + "_l1_" + a.str() + "_loss.csv");
  }
  fs::path mmcs() const { return root / "mmcs.csv"; }
  fs::path linear_probe() const { return root / "probe" / "linear.lfpp"; }
  fs::path logistic_probe() const { return root / "probe" / "logistic.lfpp"; }
  fs::path deltas(const std::string& split) const { return root / "probe" / ("deltas_" + split + ".jsonl"); }
  fs::path delta_features(const std::string& split) const { return root / "probe" / ("deltas_" + split + ".lfpa"); }
  fs::path predictions() const { return root / "predictions.csv"; }
  fs::path report() const { return root / "report.json"; }
  fs::path report_csv(const std::string& name) const { return root / "report" / (name + ".csv"); }
  fs::path ablation() const { return root / "ablation.json"; }
  fs::path explanations() const { return root / "explanations.jsonl"; }
  fs::path exports() const { return root / "exports"; }
};

class Context {
 public:
  explicit Context(config::PipelineConfig cfg, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), paths_{cfg_.paths.out_dir}, vocab_(builtin::vocabulary()), log_(log) {}

  const config::PipelineConfig& cfg() const { return cfg_; }
  const Artifacts& paths() const { return paths_; }
  const toymodel::Vocabulary& vocab() const { return vocab_; }
  std::uint64_t seed(std::string_view stage) const { return numerics::stage_seed(cfg_.run.seed, stage); }

  template <class... Args>
  void log(const Args&... args) const {
    if (!log_) return;
    ((*log_) << ... << args) << '\n';
  }

  finetune::RewardConfig reward() const {
    finetune::RewardConfig r = cfg_.reward;
    r.lexicon = cfg_.paths.lexicon.empty() ? builtin::lexicon() : tensorio::load_lexicon(cfg_.paths.lexicon);
    return r;
  }

  /// Token ids of the synthetic corpus; identical on every call.
  const std::vector<std::vector<int>>& corpus() const {
    if (corpus_.empty()) {
      const builtin::CorpusConfig cc{cfg_.pretrain.n_documents, cfg_.pretrain.document_length,
                                     cfg_.pretrain.same_polarity, cfg_.pretrain.neutral};
      for (const auto& doc : builtin::corpus(cc, seed("corpus"))) corpus_.push_back(vocab_.encode(doc));
    }
    return corpus_;
  }

  toymodel::ModelConfig model_config() const {
    return {static_cast<int>(vocab_.size()), cfg_.model.d_model, cfg_.model.n_layers, cfg_.model.max_context};
  }

 private:
  config::PipelineConfig cfg_;
  Artifacts paths_;
  toymodel::Vocabulary vocab_;
  std::ostream* log_;
  mutable std::vector<std::vector<int>> corpus_;
};

namespace detail {

inline std::vector<std::vector<int>> prefixes(const std::vector<std::vector<int>>& docs, std::size_t first,
                                              std::size_t count, int length) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = first; i < docs.size() && out.size() < count; ++i) {
    out.emplace_back(docs[i].begin(), docs[i].begin() + length);
  }
  if (out.empty()) throw std::invalid_argument("no corpus documents left for prefixes");
  return out;
}

inline void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw std::runtime_error("missing " + p.string() + " (run '" + producer + "' first)");
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

inline void write_json(const fs::path& p, const json& j) { tensorio::write_text(p, j.dump(2) + "\n"); }

inline std::string csv_number(double v) {
  std::ostringstream o;
  o.precision(10);
  o << v;
  return o.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// finetune

inline json cmd_finetune(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  const auto& docs = ctx.corpus();
  toymodel::TinyTransformer base = toymodel::TinyTransformer::init(ctx.model_config(), ctx.seed("init"));
  finetune::PretrainConfig pc = cfg.pretrain.train;
  pc.seed = ctx.seed("pretrain");
  ctx.log("finetune: pretraining ", pc.steps, " steps on ", docs.size(), " documents");
  const auto losses = finetune::pretrain_lm(base, docs, pc);

  const auto reward = ctx.reward();
  finetune::PpoConfig ppo = cfg.ppo.ppo;
  ppo.seed = ctx.seed("ppo");
  const auto pre = detail::prefixes(docs, 0, static_cast<std::size_t>(cfg.ppo.n_prefixes), cfg.ppo.prefix_length);
  ctx.log("finetune: ppo ", ppo.steps, " steps");
  const auto result = finetune::ppo_train(base, base, pre, finetune::make_sequence_reward(ctx.vocab(), reward), ppo);

  const auto& p = ctx.paths();
  toymodel::save_model(base, p.base_model(), &ctx.vocab());
  toymodel::save_model(result.policy, p.tuned_model(), &ctx.vocab());
  std::string loss_csv = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) loss_csv += std::to_string(i) + "," + detail::csv_number(losses[i]) + "\n";
  tensorio::write_text(p.pretrain_loss(), loss_csv);
  tensorio::write_text(p.reward_trace(), finetune::reward_trace_csv(result.trace));

  json out = {{"pretrain_final_loss", losses.empty() ? json(nullptr) : json(losses.back())},
              {"ppo_steps", result.trace.size()}};
  if (!result.trace.empty()) {
    const auto [head, tail] = finetune::head_tail_reward(result.trace);
    out["head_mean_reward"] = head;
    out["tail_mean_reward"] = tail;
  }
  return out;
}

inline std::vector<finetune::PpoStepStats> read_reward_trace(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (tensorio::trim(line) != "step,mean_reward,mean_kl") throw std::runtime_error(path.string() + ": unexpected header");
  std::vector<finetune::PpoStepStats> trace;
  while (std::getline(in, line)) {
    if (tensorio::trim(line).empty()) continue;
    std::istringstream row(line);
    std::string a, b, c;
    std::getline(row, a, ',');
    std::getline(row, b, ',');
    std::getline(row, c, ',');
    const auto step = tensorio::parse_double(a), r = tensorio::parse_double(b), k = tensorio::parse_double(c);
    if (!step || !r || !k) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    trace.push_back({static_cast<int>(*step), *r, *k});
  }
  return trace;
}

// ---------------------------------------------------------------------------
// sample-activations

inline toymodel::TinyTransformer load_checked(const Context& ctx, const fs::path& path) {
  detail::require(path, "finetune");
  auto loaded = toymodel::load_model(path);
  if (!(loaded.model.config == ctx.model_config())) {
    throw std::runtime_error(path.string() + " does not match the configured model dimensions");
  }
  return std::move(loaded.model);
}

inline json cmd_sample_activations(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  const auto base = load_checked(ctx, ctx.paths().base_model());
  const auto tuned = load_checked(ctx, ctx.paths().tuned_model());
  const auto div = toymodel::parameter_divergence(base, tuned, {cfg.layers.top_k, cfg.layers.mode, cfg.layers.mlp_only});

  const auto& docs = ctx.corpus();
  const auto n_docs = static_cast<std::size_t>(cfg.sample.n_documents);
  toymodel::ForwardOptions fo;
  fo.capture_layers = div.selected_layers;
  std::vector<tensorio::ActivationDataset> sets(div.selected_layers.size());
  std::size_t rows = 0;
  for (std::size_t i = 0; i < n_docs; ++i) rows += docs[i].size();
  for (std::size_t l = 0; l < sets.size(); ++l) {
    sets[l].model_id = "toy-tuned";
    sets[l].layer_index = static_cast<std::uint32_t>(div.selected_layers[l]);
    sets[l].data.resize(static_cast<Eigen::Index>(rows), ctx.model_config().mlp_width());
    sets[l].token_ids.emplace();
    sets[l].sequence_ids.emplace();
  }
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < n_docs; ++i) {
    const auto fwd = toymodel::forward(tuned, docs[i], fo);
    const auto t = static_cast<Eigen::Index>(docs[i].size());
    for (std::size_t l = 0; l < sets.size(); ++l) {
      sets[l].data.middleRows(row, t) = fwd.activations.per_layer[l].cast<float>();
      for (int tok : docs[i]) {
        sets[l].token_ids->push_back(tok);
        sets[l].sequence_ids->push_back(static_cast<std::int64_t>(i));
      }
    }
    row += t;
  }
  for (const auto& s : sets) tensorio::write_activations(s, ctx.paths().activations(static_cast<int>(s.layer_index)));

  const json report = {{"mode", cfg.layers.mode == toymodel::LayerSelection::highest_divergence ? "highest-divergence"
                                                                                                : "lowest-layers"},
                       {"top_k", cfg.layers.top_k},
                       {"mlp_only", cfg.layers.mlp_only},
                       {"per_layer_divergence", div.per_layer},
                       {"selected_layers", div.selected_layers},
                       {"rows", rows}};
  detail::write_json(ctx.paths().layers(), report);
  ctx.log("sample-activations: layers ", json(div.selected_layers).dump(), ", ", rows, " rows each");
  return report;
}

inline std::vector<int> selected_layers(const Context& ctx) {
  detail::require(ctx.paths().layers(), "sample-activations");
  const auto j = detail::read_json(ctx.paths().layers());
  auto layers = j.at("selected_layers").get<std::vector<int>>();
  if (static_cast<int>(layers.size()) != ctx.cfg().layers.top_k) {
    throw std::runtime_error("layers.json lists " + std::to_string(layers.size()) + " layers but layers.top_k is " +
                             std::to_string(ctx.cfg().layers.top_k) + " (rerun sample-activations)");
  }
  return layers;
}

// ---------------------------------------------------------------------------
// train-sae

inline sae::TrainConfig sae_config(const Context& ctx, int hidden, double alpha, std::uint64_t seed) {
  const auto& s = ctx.cfg().sae;
  sae::TrainConfig tc;
  tc.hidden_size = hidden;
  tc.tied = s.tied;
  tc.l1_coefficient = alpha;
  tc.learning_rate = s.learning_rate;
  tc.batch_size = s.batch_size;
  tc.n_examples = s.n_examples;
  tc.seed = seed;
  tc.mean_center = s.mean_center;
  tc.log_every = s.log_every;
  tc.warn = [&ctx](const std::string& m) { ctx.log("train-sae: warning: ", m); };
  return tc;
}

inline json cmd_train_sae(const Context& ctx) {
  const auto layers = selected_layers(ctx);
  const auto& p = ctx.paths();
  std::string mmcs_csv = "layer,mmcs,excluded_small,excluded_large\n";
  json rows = json::array();
  for (int layer : layers) {
    detail::require(p.activations(layer), "sample-activations");
    const Matrix data = tensorio::read_activations(p.activations(layer)).as_matrix();
    const int n = static_cast<int>(data.cols());
    const std::string tag = "sae/layer" + std::to_string(layer);
    std::vector<sae::SparseAutoencoder> pair;
    for (int h : {n, 2 * n}) {
      ctx.log("train-sae: layer ", layer, " h=", h);
      auto r = sae::train(data, sae_config(ctx, h, ctx.cfg().sae.l1_coefficient, ctx.seed(tag + "/h" + std::to_string(h))),
                          layer);
      sae::save_autoencoder(r.autoencoder, p.autoencoder(layer, h));
      tensorio::write_text(p.sae_loss(layer, h), sae::loss_trace_csv(r.trace));
      pair.push_back(std::move(r.autoencoder));
    }
    const auto d1 = sae::FeatureDictionary::from_autoencoder(pair[0]);
    const auto d2 = sae::FeatureDictionary::from_autoencoder(pair[1]);
    const double m = sae::mmcs(d1, d2).mean;
    mmcs_csv += std::to_string(layer) + "," + detail::csv_number(m) + "," + std::to_string(d1.excluded.size()) + "," +
                std::to_string(d2.excluded.size()) + "\n";
    rows.push_back({{"layer", layer}, {"mmcs", m}});
    for (double alpha : ctx.cfg().sae.l1_sweep) {
      std::ostringstream a;
      a << alpha;
      ctx.log("train-sae: sweep layer ", layer, " alpha=", a.str());
      const auto r = sae::train(data, sae_config(ctx, n, alpha, ctx.seed(tag + "/sweep/" + a.str())), layer);
      tensorio::write_text(p.sweep_loss(layer, alpha), sae::loss_trace_csv(r.trace));
    }
  }
  tensorio::write_text(p.mmcs(), mmcs_csv);
  return {{"mmcs", rows}};
}

// ---------------------------------------------------------------------------
// probe

/// Loads the small (h = n) autoencoder of every selected layer, checking it
/// against the activation file of the same layer.
inline std::vector<sae::SparseAutoencoder> load_autoencoders(const Context& ctx, const std::vector<int>& layers) {
  const auto& p = ctx.paths();
  const int width = ctx.model_config().mlp_width();
  std::vector<sae::SparseAutoencoder> out;
  for (int layer : layers) {
    detail::require(p.activations(layer), "sample-activations");
    detail::require(p.autoencoder(layer, width), "train-sae");
    const auto acts = tensorio::read_activations(p.activations(layer));
    if (static_cast<int>(acts.layer_index) != layer || static_cast<int>(acts.hidden_dim()) != width) {
      throw std::runtime_error(p.activations(layer).string() + " does not hold layer " + std::to_string(layer) +
                               " activations of width " + std::to_string(width));
    }
    auto ae = sae::load_autoencoder(p.autoencoder(layer, width));
    if (ae.layer_index != layer || ae.input_dim() != width) {
      throw std::runtime_error(p.autoencoder(layer, width).string() + " was not trained on layer " + std::to_string(layer));
    }
    out.push_back(std::move(ae));
  }
  for (const auto& e : fs::directory_iterator(p.root / "activations")) {
    const auto name = e.path().filename().string();
    bool listed = false;
    for (int layer : layers) listed = listed || name == p.activations(layer).filename().string();
    if (!listed) {
      throw std::runtime_error("activation file " + name + " is not in the selected layer list " + json(layers).dump() +
                               " (rerun sample-activations and train-sae)");
    }
  }
  return out;
}

struct ContrastiveSplit {
  std::vector<tensorio::ContrastiveTriple> train, heldout;
};

inline ContrastiveSplit contrastive_split(const Context& ctx) {
  const int k = ctx.cfg().probe.heldout_every;
  ContrastiveSplit s;
  if (ctx.cfg().paths.contrastive.empty()) {
    const auto set = builtin::contrastive_triples();
    for (std::size_t i = 0; i < set.triples.size(); ++i) {
      (set.context_index[i] % k == k - 1 ? s.heldout : s.train).push_back(set.triples[i]);
    }
  } else {
    const auto triples = tensorio::load_contrastive(ctx.cfg().paths.contrastive);
    for (std::size_t i = 0; i < triples.size(); ++i) {
      (static_cast<int>(i) % k == k - 1 ? s.heldout : s.train).push_back(triples[i]);
    }
  }
  if (s.train.empty() || s.heldout.empty()) throw std::runtime_error("contrastive set too small to split");
  return s;
}

struct TokenPrediction {
  std::string token;
  double predicted = 0.0;
  double truth = 0.0;
  int count = 0;
};

/// Mean probe prediction per target token, in token order.
inline std::vector<TokenPrediction> per_token_predictions(const probes::Probe& probe,
                                                          const std::vector<probes::DeltaSample>& samples,
                                                          const tensorio::RewardLexicon& lexicon) {
  std::map<std::string, TokenPrediction> acc;
  for (const auto& s : samples) {
    if (!s.token) continue;
    auto& e = acc[*s.token];
    e.token = *s.token;
    e.predicted += probes::predict(probe, s.features);
    ++e.count;
  }
  std::vector<TokenPrediction> out;
  for (auto& [tok, e] : acc) {
    e.predicted /= e.count;
    e.truth = lexicon.value(tok);
    out.push_back(e);
  }
  return out;
}

inline std::string predictions_csv(const std::vector<TokenPrediction>& rows) {
  std::string out = "token,predicted,true\n";
  for (const auto& r : rows) out += r.token + "," + detail::csv_number(r.predicted) + "," + detail::csv_number(r.truth) + "\n";
  return out;
}

inline json cmd_probe(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  const auto layers = selected_layers(ctx);
  const auto aes = load_autoencoders(ctx, layers);
  const auto tuned = load_checked(ctx, ctx.paths().tuned_model());
  const auto split = contrastive_split(ctx);
  const auto condenser = probes::model_condenser(tuned, ctx.vocab(), aes);
  probes::DeltaSampleOptions dopts;
  dopts.delta.concatenated_l2 = cfg.probe.concatenated_l2;

  probes::DeltaScales scales;
  const auto train =
      probes::normalize_deltas(probes::build_delta_samples(split.train, condenser, dopts), cfg.probe.target_max, &scales);
  const auto heldout =
      probes::normalize_deltas(probes::build_delta_samples(split.heldout, condenser, dopts), cfg.probe.target_max);

  auto linear = probes::fit_linear(train, cfg.probe.ridge_lambda);
  linear.normalization = scales;
  linear.training["layers"] = layers;
  probes::LogisticConfig lc = cfg.probe.logistic;
  lc.seed = ctx.seed("logistic");
  auto logistic = probes::fit_logistic(train, lc);
  logistic.normalization = scales;
  logistic.training["layers"] = layers;

  const auto& p = ctx.paths();
  probes::save_probe(linear, p.linear_probe());
  probes::save_probe(logistic, p.logistic_probe());
  probes::write_delta_samples(train, p.deltas("train"), p.delta_features("train"));
  probes::write_delta_samples(heldout, p.deltas("heldout"), p.delta_features("heldout"));
  const auto preds = per_token_predictions(linear, heldout, ctx.reward().lexicon);
  tensorio::write_text(p.predictions(), predictions_csv(preds));
  ctx.log("probe: ", train.size(), " training and ", heldout.size(), " held-out samples");
  return {{"n_train", train.size()},
          {"n_heldout", heldout.size()},
          {"logistic_train_accuracy", probes::classification_accuracy(logistic, train)},
          {"logistic_heldout_accuracy", probes::classification_accuracy(logistic, heldout)}};
}

// ---------------------------------------------------------------------------
// ablate

struct ProbeArtifacts {
  std::vector<int> layers;
  std::vector<sae::SparseAutoencoder> autoencoders;
  probes::Probe linear;
  std::vector<probes::DeltaSample> train, heldout;

  std::vector<int> widths() const {
    std::vector<int> w;
    for (const auto& a : autoencoders) w.push_back(a.hidden_size());
    return w;
  }
};

inline ProbeArtifacts load_probe_artifacts(const Context& ctx) {
  ProbeArtifacts a;
  a.layers = selected_layers(ctx);
  a.autoencoders = load_autoencoders(ctx, a.layers);
  const auto& p = ctx.paths();
  for (const auto& f : {p.linear_probe(), p.deltas("train"), p.deltas("heldout")}) detail::require(f, "probe");
  a.linear = probes::load_probe(p.linear_probe());
  a.train = probes::read_delta_samples(p.deltas("train"));
  a.heldout = probes::read_delta_samples(p.deltas("heldout"));
  const auto w = a.widths();
  if (a.linear.weights.size() != std::accumulate(w.begin(), w.end(), 0)) {
    throw std::runtime_error("probe width does not match the selected layers' dictionaries (rerun probe)");
  }
  return a;
}

inline ablate::AblationSpec reward_feature_spec(const ProbeArtifacts& a, int k) {
  const auto refs = analysis::reward_correlated_features(a.linear, a.train, a.layers, a.widths(), k);
  ablate::AblationSpec spec;
  for (std::size_t i = 0; i < a.layers.size(); ++i) spec.layers.push_back({a.layers[i], a.autoencoders[i], {}});
  for (const auto& r : refs) {
    for (auto& l : spec.layers) {
      if (l.layer == r.layer) l.features.push_back(r.feature);
    }
  }
  return spec;
}

inline json run_ablation(const Context& ctx, const ProbeArtifacts& a, const toymodel::TinyTransformer& tuned) {
  const auto& c = ctx.cfg().ablate;
  const auto spec = reward_feature_spec(a, c.top_features);
  const auto& docs = ctx.corpus();
  const auto pre = detail::prefixes(docs, static_cast<std::size_t>(ctx.cfg().sample.n_documents),
                                    static_cast<std::size_t>(c.n_completions), c.prefix_length);
  ablate::EvalConfig ec;
  ec.n_completions = c.n_completions;
  ec.completion_length = c.completion_length;
  ec.temperature = c.temperature;
  ec.seed = ctx.seed("ablate");
  ec.mode = c.mode == config::ReplacementMode::subtract ? ablate::AblationMode::subtract_contribution
                                                        : ablate::AblationMode::full_replacement;
  const auto cmp = ablate::ablation_reward_eval(tuned, spec, pre, finetune::make_sequence_reward(ctx.vocab(), ctx.reward()), ec);
  return {{"before", cmp.before},
          {"after", cmp.after},
          {"spec", spec.to_json()},
          {"mode", c.mode == config::ReplacementMode::subtract ? "subtract" : "replace"},
          {"n_completions", c.n_completions},
          {"prefix_length", c.prefix_length},
          {"completion_length", c.completion_length}};
}

inline json cmd_ablate(const Context& ctx) {
  const auto a = load_probe_artifacts(ctx);
  const auto tuned = load_checked(ctx, ctx.paths().tuned_model());
  const json j = run_ablation(ctx, a, tuned);
  detail::write_json(ctx.paths().ablation(), j);
  ctx.log("ablate: mean reward ", j["before"].get<double>(), " -> ", j["after"].get<double>());
  return j;
}

// ---------------------------------------------------------------------------
// report

inline json tau_json(const analysis::TauResult& t) { return analysis::to_json(t); }

inline json cmd_report(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  const auto& p = ctx.paths();
  const auto a = load_probe_artifacts(ctx);
  const auto tuned = load_checked(ctx, p.tuned_model());
  const auto lexicon = ctx.reward().lexicon;
  json r;

  detail::require(p.reward_trace(), "finetune");
  const auto trace = read_reward_trace(p.reward_trace());
  if (!trace.empty()) {
    const auto [head, tail] = finetune::head_tail_reward(trace);
    r["finetune"] = {{"steps", trace.size()}, {"head_mean_reward", head}, {"tail_mean_reward", tail},
                     {"final_mean_kl", trace.back().mean_kl}};
  } else {
    r["finetune"] = {{"steps", 0}};
  }
  r["layers"] = a.layers;

  // Ranking against the lexicon on held-out contexts.
  const auto preds = per_token_predictions(a.linear, a.heldout, lexicon);
  std::vector<double> pv, tv;
  std::vector<std::string> tokens;
  for (const auto& x : preds) {
    pv.push_back(x.predicted);
    tv.push_back(x.truth);
    tokens.push_back(x.token);
  }
  if (pv.size() < 2) throw std::runtime_error("report: fewer than 2 held-out tokens");
  const auto tau = analysis::kendall_tau(pv, tv);
  r["tau"] = tau.tau;
  r["p_value"] = tau.p_value;
  r["tau_detail"] = tau_json(tau);
  try {
    r["p_value_exact"] = analysis::kendall_tau_exact_p(pv, tv);
  } catch (const std::exception&) {
    r["p_value_exact"] = nullptr;
  }
  r["sign_accuracy"] = analysis::to_json(analysis::sign_accuracy(pv, tv));
  json restricted;
  for (auto pol : {probes::Polarity::positive, probes::Polarity::negative}) {
    try {
      restricted[probes::to_string(pol)] = tau_json(analysis::polarity_restricted_tau(pv, tv, pol));
    } catch (const std::exception& e) {
      restricted[probes::to_string(pol)] = {{"error", e.what()}};
    }
  }
  r["polarity_restricted_tau"] = restricted;

  const auto baseline = analysis::xavier_baseline_probe(a.linear.weights.size(), ctx.seed("baseline"));
  const auto bpreds = per_token_predictions(baseline, a.heldout, lexicon);
  std::vector<double> bv;
  for (const auto& x : bpreds) bv.push_back(x.predicted);
  const auto btau = analysis::kendall_tau(bv, tv);
  r["baseline"] = {{"probe", "xavier"}, {"tau", btau.tau}, {"p_value", btau.p_value},
                   {"sign_accuracy", analysis::to_json(analysis::sign_accuracy(bv, tv))}};

  // Generation frequency against prediction error.
  {
    const auto pre = detail::prefixes(ctx.corpus(), 0, static_cast<std::size_t>(cfg.ppo.n_prefixes), cfg.ppo.prefix_length);
    numerics::Rng rng(ctx.seed("frequency"));
    std::vector<std::vector<std::string>> gens;
    for (int g = 0; g < cfg.analysis.frequency_generations; ++g) {
      const auto& prefix = pre[static_cast<std::size_t>(g) % pre.size()];
      const auto seq = toymodel::generate(tuned, prefix, cfg.ppo.ppo.completion_length, cfg.ppo.ppo.temperature, rng.next_u64());
      const std::span<const int> completion(seq.data() + prefix.size(), seq.size() - prefix.size());
      gens.push_back(ctx.vocab().decode(completion));
    }
    std::vector<double> errs;
    for (std::size_t i = 0; i < pv.size(); ++i) errs.push_back(std::abs(pv[i] - tv[i]));
    const auto fe = analysis::frequency_vs_error(tokens, errs, gens);
    tensorio::write_text(p.report_csv("frequency_error"), fe.csv());
    r["frequency_vs_error"] = {{"tau", fe.tau.tau}, {"p_value", fe.tau.p_value}, {"generations", gens.size()}};
  }

  // Reward-related feature frequency on strongly positive inputs.
  {
    auto all = a.train;
    all.insert(all.end(), a.heldout.begin(), a.heldout.end());
    const auto refs = analysis::reward_correlated_features(a.linear, a.train, a.layers, a.widths(), cfg.analysis.top_features);
    std::vector<int> idx;
    json feats = json::array();
    for (const auto& f : refs) {
      idx.push_back(f.concat_index);
      feats.push_back({{"layer", f.layer}, {"feature", f.feature}, {"score", f.score}});
    }
    json ff = {{"threshold", cfg.analysis.strong_positive_threshold}, {"features", feats}};
    try {
      const auto res = analysis::strong_positive_feature_frequency(all, a.linear, idx, cfg.analysis.strong_positive_threshold);
      ff["qualifying_samples"] = res.qualifying;
      ff["per_feature"] = res.per_feature;
      ff["mean_selected"] = res.mean_selected;
      ff["average_all"] = res.average_all;
      ff["ratio"] = res.average_all > 0 ? json(res.mean_selected / res.average_all) : json(nullptr);
      std::string csv = "layer,feature,frequency\n";
      for (std::size_t i = 0; i < refs.size(); ++i) {
        csv += std::to_string(refs[i].layer) + "," + std::to_string(refs[i].feature) + "," +
               detail::csv_number(res.per_feature[i]) + "\n";
      }
      csv += "all,all," + detail::csv_number(res.average_all) + "\n";
      tensorio::write_text(p.report_csv("feature_frequency"), csv);
    } catch (const std::domain_error& e) {
      ff["error"] = e.what();
    }
    r["strong_positive_frequency"] = ff;
  }

  // Separability of logistic-probe inputs: synthetic separable set and the real deltas.
  {
    probes::SeparableConfig sc = cfg.probe.separable;
    sc.seed = ctx.seed("separable");
    const auto synth = probes::make_separable_samples(sc);
    std::vector<probes::DeltaSample> strain, stest;
    for (std::size_t i = 0; i < synth.size(); ++i) {
      (static_cast<int>(i) % cfg.probe.heldout_every == cfg.probe.heldout_every - 1 ? stest : strain).push_back(synth[i]);
    }
    probes::LogisticConfig lc = cfg.probe.logistic;
    lc.seed = ctx.seed("separable-logistic");
    const auto lp = probes::fit_logistic(strain, lc);
    const auto pca_synth = analysis::pca_separability(synth);
    tensorio::write_text(p.report_csv("pca_separable"), pca_synth.csv());
    auto deltas = a.train;
    deltas.insert(deltas.end(), a.heldout.begin(), a.heldout.end());
    const auto pca_deltas = analysis::pca_separability(deltas);
    tensorio::write_text(p.report_csv("pca_deltas"), pca_deltas.csv());
    r["separable"] = {{"n_train", strain.size()},
                      {"n_heldout", stest.size()},
                      {"logistic_heldout_accuracy", probes::classification_accuracy(lp, stest)},
                      {"pca_explained_variance_ratio", pca_synth.explained_variance_ratio}};
    r["pca_deltas_explained_variance_ratio"] = pca_deltas.explained_variance_ratio;
  }

  r["ablation"] = run_ablation(ctx, a, tuned);
  r["seed"] = cfg.run.seed;
  detail::write_json(p.report(), r);
  tensorio::write_text(p.predictions(), predictions_csv(preds));
  ctx.log("report: tau ", tau.tau, " (baseline ", btau.tau, "), written to ", p.report().string());
  return r;
}

// ---------------------------------------------------------------------------
// explain

inline json cmd_explain(const Context& ctx, std::shared_ptr<explain::Transport> transport = nullptr) {
  const auto& cfg = ctx.cfg();
  const auto layers = selected_layers(ctx);
  const auto aes = load_autoencoders(ctx, layers);
  const auto& p = ctx.paths();
  const int n = ctx.model_config().mlp_width();
  std::vector<explain::ExplainRequest> requests;
  json similarity = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    detail::require(p.autoencoder(layers[l], 2 * n), "train-sae");
    const auto large = sae::load_autoencoder(p.autoencoder(layers[l], 2 * n));
    const auto d1 = sae::FeatureDictionary::from_autoencoder(aes[l]);
    const auto d2 = sae::FeatureDictionary::from_autoencoder(large);
    const int k = std::min<int>(cfg.explain.top_features, static_cast<int>(d1.size()));
    const auto top = sae::top_similarity_features(d1, d2, k);

    const auto acts = tensorio::read_activations(p.activations(layers[l]));
    if (!acts.token_ids) throw std::runtime_error(p.activations(layers[l]).string() + " has no token ids");
    const Matrix codes = aes[l].encode_batch(acts.as_matrix());
    for (const auto& [feature, sim] : top) {
      std::vector<Eigen::Index> rows(static_cast<std::size_t>(codes.rows()));
      std::iota(rows.begin(), rows.end(), Eigen::Index{0});
      const auto m = std::min<std::size_t>(rows.size(), static_cast<std::size_t>(cfg.explain.examples_per_feature));
      std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(m), rows.end(),
                        [&](Eigen::Index x, Eigen::Index y) {
                          const double a = codes(x, feature), b = codes(y, feature);
                          return a > b || (a == b && x < y);
                        });
      std::vector<std::string> toks;
      std::vector<double> vals;
      for (std::size_t i = 0; i < m; ++i) {
        toks.push_back(ctx.vocab().word(static_cast<int>((*acts.token_ids)[static_cast<std::size_t>(rows[i])])));
        vals.push_back(codes(rows[i], feature));
      }
      requests.push_back({layers[l], feature, explain::build_description_prompt(feature, toks, vals)});
      similarity.push_back({{"layer", layers[l]}, {"feature", feature}, {"max_cosine", sim}});
    }
  }
  auto client = transport ? explain::LlmClient(cfg.explain.client, std::move(transport))
                          : explain::LlmClient::from_config(cfg.explain.client);
  ctx.log("explain: ", requests.size(), " features via ", cfg.explain.client.mock ? "mock" : cfg.explain.client.endpoint);
  const auto xs = explain::explain_features(client, requests, cfg.explain.task);
  explain::write_explanations(xs, p.explanations());
  int related = 0;
  for (const auto& x : xs) related += x.related_to_task ? 1 : 0;
  return {{"explained", xs.size()}, {"related", related}, {"features", similarity}};
}

// ---------------------------------------------------------------------------
// export-formats

/// Writes the interchange files an external exporter must produce or consume:
/// the lexicon, the contrastive JSONL set, and a small LFPA example.
inline json cmd_export_formats(const Context& ctx) {
  const auto dir = ctx.paths().exports();
  const auto reward = ctx.reward();
  tensorio::write_lexicon(reward.lexicon, dir / "lexicon.txt");
  std::vector<tensorio::ContrastiveTriple> triples;
  if (ctx.cfg().paths.contrastive.empty()) {
    triples = builtin::contrastive_triples().triples;
  } else {
    triples = tensorio::load_contrastive(ctx.cfg().paths.contrastive);
  }
  tensorio::write_contrastive(triples, dir / "contrastive.jsonl");

  const auto model = fs::exists(ctx.paths().tuned_model())
                         ? load_checked(ctx, ctx.paths().tuned_model())
                         : toymodel::TinyTransformer::init(ctx.model_config(), ctx.seed("init"));
  tensorio::ActivationDataset ds;
  ds.model_id = fs::exists(ctx.paths().tuned_model()) ? "toy-tuned" : "toy-untrained";
  ds.layer_index = 0;
  const auto& docs = ctx.corpus();
  const std::size_t n_docs = std::min<std::size_t>(4, docs.size());
  toymodel::ForwardOptions fo;
  fo.capture_layers = {0};
  std::vector<Matrix> blocks;
  Eigen::Index rows = 0;
  ds.token_ids.emplace();
  ds.sequence_ids.emplace();
  for (std::size_t i = 0; i < n_docs; ++i) {
    blocks.push_back(toymodel::forward(model, docs[i], fo).activations.per_layer[0]);
    rows += blocks.back().rows();
    for (int t : docs[i]) {
      ds.token_ids->push_back(t);
      ds.sequence_ids->push_back(static_cast<std::int64_t>(i));
    }
  }
  ds.data.resize(rows, ctx.model_config().mlp_width());
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    ds.data.middleRows(r, b.rows()) = b.cast<float>();
    r += b.rows();
  }
  tensorio::write_activations(ds, dir / "example_layer_0.lfpa");
  const json manifest = {{"lexicon", "lexicon.txt"},
                         {"contrastive", "contrastive.jsonl"},
                         {"triples", triples.size()},
                         {"activations", {{"file", "example_layer_0.lfpa"},
                                          {"rows", ds.rows()},
                                          {"hidden_dim", ds.hidden_dim()},
                                          {"checksum", tensorio::stored_checksum(dir / "example_layer_0.lfpa")}}},
                         {"format_version", tensorio::kFormatVersion}};
  detail::write_json(dir / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// plans

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> c = {"finetune", "sample-activations", "train-sae", "probe",
                                             "report",   "explain",            "ablate",    "export-formats"};
  return c;
}

/// Human-readable execution plan; computed from the config alone.
inline std::vector<std::string> plan(const std::string& command, const config::PipelineConfig& cfg) {
  const Artifacts p{cfg.paths.out_dir};
  const auto& s = cfg;
  std::vector<std::string> out;
  auto step = [&](std::string line) { out.push_back(std::move(line)); };
  if (command == "finetune") {
    step("build synthetic corpus: " + std::to_string(s.pretrain.n_documents) + " documents x " +
         std::to_string(s.pretrain.document_length) + " tokens");
    step("pretrain toy LM (d=" + std::to_string(s.model.d_model) + ", layers=" + std::to_string(s.model.n_layers) +
         ") for " + std::to_string(s.pretrain.train.steps) + " steps");
    step("PPO fine-tune for " + std::to_string(s.ppo.ppo.steps) + " steps (lr " + detail::csv_number(s.ppo.ppo.learning_rate) +
         ", kl " + detail::csv_number(s.ppo.ppo.kl_coefficient) + ")");
    step("write " + p.base_model().string());
    step("write " + p.tuned_model().string());
    step("write " + p.pretrain_loss().string());
    step("write " + p.reward_trace().string());
  } else if (command == "sample-activations") {
    step("read " + p.base_model().string() + ", " + p.tuned_model().string());
    step("select " + std::to_string(s.layers.top_k) + " layers (" +
         (s.layers.mode == toymodel::LayerSelection::highest_divergence ? "highest-divergence" : "lowest-layers") + ")");
    step("capture MLP activations over " + std::to_string(s.sample.n_documents) + " documents");
    step("write " + (p.root / "activations").string() + "/layer_<L>.lfpa per selected layer");
    step("write " + p.layers().string());
  } else if (command == "train-sae") {
    step("read " + p.layers().string() + " and activation files");
    step("train autoencoders h=n and h=2n per layer (alpha " + detail::csv_number(s.sae.l1_coefficient) + ", " +
         std::to_string(s.sae.n_examples) + " examples)");
    if (!s.sae.l1_sweep.empty()) step("l1 sweep over " + json(s.sae.l1_sweep).dump());
    step("write " + (p.root / "sae").string() + "/layer_<L>_h<H>.lfps and loss traces");
    step("write " + p.mmcs().string());
  } else if (command == "probe") {
    step("read tuned model, layer list, activation files and h=n autoencoders (checked for agreement)");
    step(std::string("build contrastive deltas from ") +
         (s.paths.contrastive.empty() ? "built-in templates" : s.paths.contrastive.string()));
    step("fit linear (lambda " + detail::csv_number(s.probe.ridge_lambda) + ") and logistic probes");
    step("write " + p.linear_probe().string() + ", " + p.logistic_probe().string());
    step("write " + p.deltas("train").string() + ", " + p.deltas("heldout").string());
    step("write " + p.predictions().string());
  } else if (command == "report") {
    step("read probe artifacts, tuned model and reward trace");
    step("compute Kendall tau, sign accuracy, Xavier baseline, frequency-vs-error, feature frequency, PCA, ablation");
    step("write " + p.report().string() + " and " + (p.root / "report").string() + "/*.csv");
  } else if (command == "explain") {
    step("select top " + std::to_string(s.explain.top_features) + " features per layer by max cosine similarity");
    step(std::string("describe and classify via ") + (s.explain.client.mock ? "mock client" : s.explain.client.endpoint) +
         " (token from $" + s.explain.client.token_env + ")");
    step("write " + p.explanations().string());
  } else if (command == "ablate") {
    step("read probe artifacts and tuned model");
    step("ablate top " + std::to_string(s.ablate.top_features) + " reward-correlated features over " +
         std::to_string(s.ablate.n_completions) + " completions");
    step("write " + p.ablation().string());
  } else if (command == "export-formats") {
    step("write " + (p.exports() / "lexicon.txt").string());
    step("write " + (p.exports() / "contrastive.jsonl").string());
    step("write " + (p.exports() / "example_layer_0.lfpa").string());
    step("write " + (p.exports() / "manifest.json").string());
  } else {
    throw std::invalid_argument("unknown command '" + command + "'");
  }
  return out;
}

inline json run(const std::string& command, const Context& ctx) {
  if (command == "finetune") return cmd_finetune(ctx);
  if (command == "sample-activations") return cmd_sample_activations(ctx);
  if (command == "train-sae") return cmd_train_sae(ctx);
  if (command == "probe") return cmd_probe(ctx);
  if (command == "report") return cmd_report(ctx);
  if (command == "explain") return cmd_explain(ctx);
  if (command == "ablate") return cmd_ablate(ctx);
  if (command == "export-formats") return cmd_export_formats(ctx);
  throw std::invalid_argument("unknown command '" + command + "'");
}

/// finetune through report, in dependency order; returns the report.
inline json run_all(const Context& ctx) {
  for (const char* c : {"finetune", "sample-activations", "train-sae", "probe", "explain", "ablate"}) run(c, ctx);
  return cmd_report(ctx);
}

}  // namespace lfp::pipeline
