#pragma once

// Contrastive activation deltas and the two probe families fitted on
// concatenated condensed (SAE-encoded) activations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfp/numerics.hpp"
#include "lfp/sae.hpp"
#include "lfp/tensorio.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::probes {

using tensorio::ContrastiveTriple;
using tensorio::TripleMode;

enum class Polarity { positive, negative };

inline const char* to_string(Polarity p) { return p == Polarity::positive ? "positive" : "negative"; }

inline Polarity polarity_from_string(std::string_view s) {
  if (s == "positive") return Polarity::positive;
  if (s == "negative") return Polarity::negative;
  throw std::invalid_argument("unknown polarity '" + std::string(s) + "'");
}

struct DeltaSample {
  Vector features;
  double raw_delta = 0.0;
  double normalized_delta = 0.0;
  Polarity polarity = Polarity::positive;
  std::optional<std::string> token;
};

// ---------------------------------------------------------------------------
// Condensing

/// Per layer, the SAE coefficients for every token position (T x h).
inline std::vector<Matrix> condense(const toymodel::CapturedActivations& acts,
                                    const std::vector<sae::SparseAutoencoder>& autoencoders) {
  if (acts.layers.size() != autoencoders.size()) {
    throw std::invalid_argument("condense: " + std::to_string(acts.layers.size()) + " captured layers but " +
                                std::to_string(autoencoders.size()) + " autoencoders");
  }
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < autoencoders.size(); ++i) {
    if (autoencoders[i].layer_index != acts.layers[i]) {
      throw std::invalid_argument("condense: autoencoder for layer " + std::to_string(autoencoders[i].layer_index) +
                                  " paired with activations of layer " + std::to_string(acts.layers[i]));
    }
    out.push_back(autoencoders[i].encode_batch(acts.per_layer[i]));
  }
  return out;
}

/// Maps a token sequence to its per-layer condensed activations.
using Condenser = std::function<std::vector<Matrix>(const std::vector<std::string>&)>;

inline Condenser model_condenser(const toymodel::TinyTransformer& model, const toymodel::Vocabulary& vocab,
                                 const std::vector<sae::SparseAutoencoder>& autoencoders) {
  toymodel::ForwardOptions opts;
  for (const auto& ae : autoencoders) opts.capture_layers.push_back(ae.layer_index);
  return [&model, &vocab, autoencoders, opts](const std::vector<std::string>& tokens) {
    const auto ids = vocab.encode(tokens);
    return condense(toymodel::forward(model, ids, opts).activations, autoencoders);
  };
}

// ---------------------------------------------------------------------------
// Deltas

struct DeltaOptions {
  bool concatenated_l2 = false;  // l2 of the concatenation instead of the per-layer sum
};

namespace detail {

inline double position_distance(const std::vector<Matrix>& a, const std::vector<Matrix>& b, Eigen::Index t,
                                 const DeltaOptions& opts) {
  double sum = 0.0, sq = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    const double d2 = (a[l].row(t) - b[l].row(t)).squaredNorm();
    sum += std::sqrt(d2);
    sq += d2;
  }
  return opts.concatenated_l2 ? std::sqrt(sq) : sum;
}

inline std::pair<Eigen::Index, Eigen::Index> positions(const ContrastiveTriple& triple) {
  triple.validate();
  if (triple.mode == TripleMode::per_token) {
    return {static_cast<Eigen::Index>(triple.target_span->start), static_cast<Eigen::Index>(triple.target_span->end)};
  }
  const std::size_t shortest = std::min({triple.positive.size(), triple.neutral.size(), triple.negative.size()});
  return {0, static_cast<Eigen::Index>(shortest)};
}

inline double mean_distance(const std::vector<Matrix>& a, const std::vector<Matrix>& b, Eigen::Index begin,
                            Eigen::Index end, const DeltaOptions& opts) {
  double total = 0.0;
  for (Eigen::Index t = begin; t < end; ++t) total += position_distance(a, b, t, opts);
  return total / static_cast<double>(end - begin);
}

/// Concatenation over layers of the condensed rows averaged over [begin, end).
inline Vector concat_features(const std::vector<Matrix>& layers, Eigen::Index begin, Eigen::Index end) {
  Eigen::Index width = 0;
  for (const auto& m : layers) width += m.cols();
  Vector out(width);
  Eigen::Index off = 0;
  for (const auto& m : layers) {
    out.segment(off, m.cols()) = m.middleRows(begin, end - begin).colwise().mean().transpose();
    off += m.cols();
  }
  return out;
}

}  // namespace detail

struct Deltas {
  double positive = 0.0;
  double negative = 0.0;
};

/// Distances of the positive and negative elements from the neutral element,
/// averaged over the target span (per-token) or all shared positions (whole-sequence).
inline Deltas activation_delta(const ContrastiveTriple& triple, const Condenser& condenser,
                               const DeltaOptions& opts = {}) {
  const auto [begin, end] = detail::positions(triple);
  const auto pos = condenser(triple.positive);
  const auto neu = condenser(triple.neutral);
  const auto neg = condenser(triple.negative);
  return {detail::mean_distance(pos, neu, begin, end, opts), detail::mean_distance(neg, neu, begin, end, opts)};
}

struct DeltaSampleOptions {
  DeltaOptions delta;
  bool swap_polarity = false;  // treat the negative element as the rewarded one
};

/// Two samples per triple: features of the positive element with +Delta+, and
/// of the negative element with -Delta-.
inline std::vector<DeltaSample> build_delta_samples(const std::vector<ContrastiveTriple>& triples,
                                                    const Condenser& condenser,
                                                    const DeltaSampleOptions& opts = {}) {
  std::vector<DeltaSample> out;
  out.reserve(2 * triples.size());
  for (const auto& original : triples) {
    ContrastiveTriple triple = original;
    if (opts.swap_polarity) std::swap(triple.positive, triple.negative);
    const auto [begin, end] = detail::positions(triple);
    const auto pos = condenser(triple.positive);
    const auto neu = condenser(triple.neutral);
    const auto neg = condenser(triple.negative);
    auto span_text = [&](const std::vector<std::string>& seq) -> std::optional<std::string> {
      if (triple.mode != TripleMode::per_token) return std::nullopt;
      return tensorio::join(std::vector<std::string>(seq.begin() + begin, seq.begin() + end));
    };
    DeltaSample p;
    p.features = detail::concat_features(pos, begin, end);
    p.raw_delta = detail::mean_distance(pos, neu, begin, end, opts.delta);
    p.polarity = Polarity::positive;
    p.token = span_text(triple.positive);
    DeltaSample n;
    n.features = detail::concat_features(neg, begin, end);
    n.raw_delta = -detail::mean_distance(neg, neu, begin, end, opts.delta);
    n.polarity = Polarity::negative;
    n.token = span_text(triple.negative);
    out.push_back(std::move(p));
    out.push_back(std::move(n));
  }
  return out;
}

struct DeltaScales {
  double positive = 1.0;
  double negative = 1.0;
};

/// Scales each polarity separately so its largest magnitude lands on +-target_max.
inline std::vector<DeltaSample> normalize_deltas(std::vector<DeltaSample> samples, double target_max,
                                                 DeltaScales* scales = nullptr) {
  if (!(target_max > 0.0)) throw std::invalid_argument("normalize_deltas: target_max must be > 0");
  double max_pos = 0.0, max_neg = 0.0;
  bool has_pos = false, has_neg = false;
  for (const auto& s : samples) {
    if (s.polarity == Polarity::positive) {
      has_pos = true;
      max_pos = std::max(max_pos, std::abs(s.raw_delta));
    } else {
      has_neg = true;
      max_neg = std::max(max_neg, std::abs(s.raw_delta));
    }
  }
  if (!has_pos || !has_neg) throw std::invalid_argument("normalize_deltas: need samples of both polarities");
  if (!(max_pos > 0.0)) throw std::domain_error("normalize_deltas: all positive deltas are zero");
  if (!(max_neg > 0.0)) throw std::domain_error("normalize_deltas: all negative deltas are zero");
  const DeltaScales k{target_max / max_pos, target_max / max_neg};
  for (auto& s : samples) s.normalized_delta = s.raw_delta * (s.polarity == Polarity::positive ? k.positive : k.negative);
  if (scales) *scales = k;
  return samples;
}

// ---------------------------------------------------------------------------
// Probes

enum class ProbeKind { linear, logistic };

struct Probe {
  ProbeKind kind = ProbeKind::linear;
  Vector weights;
  double bias = 0.0;
  DeltaScales normalization;
  double ridge_lambda = 0.0;
  nlohmann::json training = nlohmann::json::object();

  double logit(const Vector& x) const {
    if (x.size() != weights.size()) {
      throw std::invalid_argument("probe: feature width " + std::to_string(x.size()) + " != " +
                                  std::to_string(weights.size()));
    }
    return weights.dot(x) + bias;
  }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Linear: predicted feedback value. Logistic: probability of the positive class.
inline double predict(const Probe& probe, const Vector& features) {
  const double z = probe.logit(features);
  return probe.kind == ProbeKind::linear ? z : sigmoid(z);
}

inline Matrix feature_matrix(const std::vector<DeltaSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("feature_matrix: no samples");
  const Eigen::Index d = samples.front().features.size();
  Matrix x(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != d) throw std::invalid_argument("feature_matrix: inconsistent feature width");
    x.row(static_cast<Eigen::Index>(i)) = samples[i].features.transpose();
  }
  return x;
}

/// Closed-form ridge regression onto normalized_delta; the bias is not penalized.
inline Probe fit_linear(const std::vector<DeltaSample>& samples, double lambda = 1e-4) {
  if (samples.size() < 2) throw std::invalid_argument("fit_linear: need at least 2 samples");
  if (lambda < 0.0) throw std::invalid_argument("fit_linear: lambda must be >= 0");
  const Matrix x = feature_matrix(samples);
  Vector y(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y(i) = samples[static_cast<std::size_t>(i)].normalized_delta;
  const RowVector xm = x.colwise().mean();
  const double ym = y.mean();
  const Matrix xc = x.rowwise() - xm;
  const Vector yc = y.array() - ym;
  const Eigen::Index d = x.cols();
  Matrix a(xc.rows() + d, d);
  a << xc, std::sqrt(lambda) * Matrix::Identity(d, d);
  Vector b(xc.rows() + d);
  b << yc, Vector::Zero(d);
  Probe p;
  p.kind = ProbeKind::linear;
  p.weights = a.completeOrthogonalDecomposition().solve(b);
  p.bias = ym - xm.dot(p.weights.transpose());
  p.ridge_lambda = lambda;
  p.training = {{"samples", samples.size()}, {"lambda", lambda}};
  return p;
}

struct LogisticConfig {
  double learning_rate = 0.5;
  int epochs = 500;
  int mini_batch = 0;  // 0 = full batch
  std::uint64_t seed = 0;
};

/// Mean binary cross-entropy and gradient with respect to (w, b).
inline double logistic_loss_and_grad(const Vector& w, double b, const Matrix& x, const Vector& labels, Vector& gw,
                                     double& gb) {
  const Vector z = (x * w).array() + b;
  const double m = static_cast<double>(x.rows());
  double loss = 0.0;
  Vector r(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    // log(1 + e^z) - y z, stable in both tails.
    const double zi = z(i);
    loss += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - labels(i) * zi;
    r(i) = sigmoid(zi) - labels(i);
  }
  gw = x.transpose() * r / m;
  gb = r.sum() / m;
  return loss / m;
}

inline Probe fit_logistic(const std::vector<DeltaSample>& samples, const LogisticConfig& cfg = {}) {
  const Matrix x = feature_matrix(samples);
  Vector labels(x.rows());
  bool has_pos = false, has_neg = false;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const bool pos = samples[static_cast<std::size_t>(i)].polarity == Polarity::positive;
    labels(i) = pos ? 1.0 : 0.0;
    has_pos = has_pos || pos;
    has_neg = has_neg || !pos;
  }
  if (!has_pos || !has_neg) throw std::invalid_argument("fit_logistic: both classes must be present");
  if (cfg.epochs < 0 || !(cfg.learning_rate > 0.0)) throw std::invalid_argument("fit_logistic: bad config");

  Vector w = Vector::Zero(x.cols());
  double b = 0.0;
  Vector gw;
  double gb = 0.0;
  double last_loss = 0.0;
  numerics::Rng rng(cfg.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.mini_batch <= 0 || cfg.mini_batch >= x.rows()) {
      last_loss = logistic_loss_and_grad(w, b, x, labels, gw, gb);
      w -= cfg.learning_rate * gw;
      b -= cfg.learning_rate * gb;
      continue;
    }
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.mini_batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.mini_batch));
      Matrix xb(static_cast<Eigen::Index>(end - start), x.cols());
      Vector yb(xb.rows());
      for (std::size_t k = start; k < end; ++k) {
        xb.row(static_cast<Eigen::Index>(k - start)) = x.row(order[k]);
        yb(static_cast<Eigen::Index>(k - start)) = labels(order[k]);
      }
      last_loss = logistic_loss_and_grad(w, b, xb, yb, gw, gb);
      w -= cfg.learning_rate * gw;
      b -= cfg.learning_rate * gb;
    }
  }
  if (!w.allFinite() || !std::isfinite(b)) throw std::runtime_error("fit_logistic: diverged");
  Probe p;
  p.kind = ProbeKind::logistic;
  p.weights = w;
  p.bias = b;
  p.training = {{"samples", samples.size()},     {"learning_rate", cfg.learning_rate}, {"epochs", cfg.epochs},
                {"mini_batch", cfg.mini_batch}, {"seed", cfg.seed},                   {"final_loss", last_loss}};
  return p;
}

/// Fraction of samples whose logit sign matches their polarity.
inline double classification_accuracy(const Probe& probe, const std::vector<DeltaSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("classification_accuracy: no samples");
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const bool pos = probe.logit(s.features) > 0.0;
    hits += (pos == (s.polarity == Polarity::positive)) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kProbeMagic = "LFPP";

inline void save_probe(const Probe& p, const std::filesystem::path& path) {
  tensorio::Container c;
  c.magic = std::string(kProbeMagic);
  c.metadata = {{"kind", p.kind == ProbeKind::linear ? "linear" : "logistic"},
                {"bias", p.bias},
                {"positive_scale", p.normalization.positive},
                {"negative_scale", p.normalization.negative},
                {"ridge_lambda", p.ridge_lambda},
                {"training", p.training}};
  c.add("weights", p.weights);
  tensorio::write_container(c, path);
}

inline Probe load_probe(const std::filesystem::path& path) {
  const auto c = tensorio::read_container(path, kProbeMagic);
  Probe p;
  try {
    const auto kind = c.metadata.at("kind").get<std::string>();
    if (kind != "linear" && kind != "logistic") {
      throw tensorio::FormatError(tensorio::FormatErrc::schema_error, "unknown probe kind '" + kind + "'");
    }
    p.kind = kind == "linear" ? ProbeKind::linear : ProbeKind::logistic;
    p.bias = c.metadata.at("bias").get<double>();
    p.normalization = {c.metadata.at("positive_scale").get<double>(), c.metadata.at("negative_scale").get<double>()};
    p.ridge_lambda = c.metadata.at("ridge_lambda").get<double>();
    p.training = c.metadata.value("training", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw tensorio::FormatError(tensorio::FormatErrc::schema_error, std::string("probe metadata: ") + e.what());
  }
  const Matrix& w = c.section("weights");
  p.weights = Eigen::Map<const Vector>(w.data(), w.size());
  return p;
}

/// Writes features to an LFPA file and one JSON record per sample referencing its row.
inline void write_delta_samples(const std::vector<DeltaSample>& samples, const std::filesystem::path& jsonl_path,
                                const std::filesystem::path& features_path, const std::string& model_id = "probe-features") {
  tensorio::ActivationDataset ds;
  ds.model_id = model_id;
  ds.data = feature_matrix(samples).cast<float>();
  tensorio::write_activations(ds, features_path);
  std::string text;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    nlohmann::json j = {{"features_ref", {{"file", features_path.filename().string()}, {"row", i}}},
                        {"raw_delta", s.raw_delta},
                        {"normalized_delta", s.normalized_delta},
                        {"polarity", to_string(s.polarity)},
                        {"token", s.token ? nlohmann::json(*s.token) : nlohmann::json(nullptr)}};
    text += j.dump() + "\n";
  }
  tensorio::write_text(jsonl_path, text);
}

inline std::vector<DeltaSample> read_delta_samples(const std::filesystem::path& jsonl_path) {
  using tensorio::FormatErrc;
  using tensorio::FormatError;
  std::ifstream in(jsonl_path);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + jsonl_path.string());
  std::vector<DeltaSample> out;
  std::map<std::string, tensorio::ActivationDataset> cache;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (tensorio::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto file = j.at("features_ref").at("file").get<std::string>();
      const auto row = j.at("features_ref").at("row").get<Eigen::Index>();
      auto it = cache.find(file);
      if (it == cache.end()) it = cache.emplace(file, tensorio::read_activations(jsonl_path.parent_path() / file)).first;
      if (row < 0 || row >= it->second.data.rows()) throw FormatError(FormatErrc::schema_error, "features_ref row out of range", lineno);
      DeltaSample s;
      s.features = it->second.data.row(row).cast<double>().transpose();
      s.raw_delta = j.at("raw_delta").get<double>();
      s.normalized_delta = j.at("normalized_delta").get<double>();
      s.polarity = polarity_from_string(j.at("polarity").get<std::string>());
      if (j.contains("token") && !j["token"].is_null()) s.token = j["token"].get<std::string>();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatErrc::parse_error, e.what(), lineno);
    } catch (const std::invalid_argument& e) {
      throw FormatError(FormatErrc::schema_error, e.what(), lineno);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic separable data

struct SeparableConfig {
  int n_samples = 2000;
  int dim = 32;
  double separation = 1.0;  // class means at +-separation * u for a random unit u
  double noise = 0.05;
  std::uint64_t seed = 0;
};

/// Alternating positive/negative samples around two mirrored class means.
inline std::vector<DeltaSample> make_separable_samples(const SeparableConfig& cfg) {
  if (cfg.n_samples < 2 || cfg.dim < 1) throw std::invalid_argument("make_separable_samples: bad size");
  numerics::Rng rng(cfg.seed);
  Vector u(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i) u(i) = rng.normal();
  u.normalize();
  std::vector<DeltaSample> out;
  for (int i = 0; i < cfg.n_samples; ++i) {
    const bool pos = i % 2 == 0;
    DeltaSample s;
    s.features = (pos ? cfg.separation : -cfg.separation) * u;
    for (int k = 0; k < cfg.dim; ++k) s.features(k) += cfg.noise * rng.normal();
    s.polarity = pos ? Polarity::positive : Polarity::negative;
    s.raw_delta = (pos ? 1.0 : -1.0) * (1.0 + rng.uniform());
    s.normalized_delta = s.raw_delta;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lfp::probes
