#pragma once

// Sparse autoencoders over MLP activations: c = ReLU(W_E x + b_E), x_hat = W_D c,
// loss = mean ||x - x_hat||^2 + alpha * mean ||c||_1. Tied autoencoders have no
// decoder storage; W_D is always W_E^T.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lfp/numerics.hpp"
#include "lfp/tensorio.hpp"

namespace lfp::sae {

struct SparseAutoencoder {
  Matrix encoder;  // h x n
  Vector bias;     // h
  bool tied = true;
  Matrix decoder;  // n x h, empty when tied
  double l1_coefficient = 1e-3;
  int layer_index = 0;
  Vector center;  // subtracted before encoding and added after decoding; empty = none

  static SparseAutoencoder init(Eigen::Index n, Eigen::Index h, bool tied, double alpha, std::uint64_t seed) {
    SparseAutoencoder ae;
    numerics::Rng rng(seed);
    ae.encoder = numerics::xavier_init(h, n, rng.fork("encoder").next_u64());
    ae.bias = Vector::Zero(h);
    ae.tied = tied;
    if (!tied) ae.decoder = numerics::xavier_init(n, h, rng.fork("decoder").next_u64());
    ae.l1_coefficient = alpha;
    return ae;
  }

  Eigen::Index input_dim() const { return encoder.cols(); }
  Eigen::Index hidden_size() const { return encoder.rows(); }

  Matrix decoder_matrix() const { return tied ? Matrix(encoder.transpose()) : decoder; }

  /// Rows of `x` are samples; returns m x h coefficients.
  Matrix encode_batch(const Matrix& x) const {
    if (x.cols() != input_dim()) {
      throw std::invalid_argument("encode: input has " + std::to_string(x.cols()) + " columns, expected " +
                                  std::to_string(input_dim()));
    }
    Matrix z = centered(x) * encoder.transpose();
    z.rowwise() += bias.transpose();
    return z.cwiseMax(0.0);
  }

  Vector encode(const Vector& x) const { return encode_batch(x.transpose()).row(0).transpose(); }

  Matrix decode_batch(const Matrix& c) const {
    if (c.cols() != hidden_size()) throw std::invalid_argument("decode: coefficient width mismatch");
    Matrix out = tied ? Matrix(c * encoder) : Matrix(c * decoder.transpose());
    if (center.size() > 0) out.rowwise() += center.transpose();
    return out;
  }

  Vector decode(const Vector& c) const { return decode_batch(c.transpose()).row(0).transpose(); }

  bool all_finite() const {
    return encoder.allFinite() && bias.allFinite() && decoder.allFinite() && center.allFinite();
  }

  Matrix centered(const Matrix& x) const {
    if (center.size() == 0) return x;
    return x.rowwise() - center.transpose();
  }
};

struct LossParts {
  double total = 0.0;
  double reconstruction = 0.0;
  double sparsity = 0.0;
};

inline LossParts loss(const SparseAutoencoder& ae, const Matrix& batch) {
  if (batch.rows() == 0) return {};
  const Matrix c = ae.encode_batch(batch);
  const Matrix xhat = ae.decode_batch(c);
  const double m = static_cast<double>(batch.rows());
  LossParts p;
  p.reconstruction = (batch - xhat).rowwise().squaredNorm().sum() / m;
  p.sparsity = ae.l1_coefficient * c.cwiseAbs().sum() / m;
  p.total = p.reconstruction + p.sparsity;
  return p;
}

struct Gradients {
  Matrix encoder;
  Vector bias;
  Matrix decoder;  // empty when tied
};

/// Loss and its exact gradient. For tied weights the encoder gradient carries
/// both the encoding and the transposed-decoding paths.
inline std::pair<LossParts, Gradients> loss_and_grad(const SparseAutoencoder& ae, const Matrix& batch) {
  if (batch.rows() == 0) throw std::invalid_argument("loss_and_grad: empty batch");
  const double m = static_cast<double>(batch.rows());
  const Matrix x = ae.centered(batch);
  Matrix z = x * ae.encoder.transpose();
  z.rowwise() += ae.bias.transpose();
  const Matrix c = z.cwiseMax(0.0);
  const Matrix d = ae.decoder_matrix();  // n x h
  const Matrix r = c * d.transpose() - x;

  LossParts p;
  p.reconstruction = r.rowwise().squaredNorm().sum() / m;
  p.sparsity = ae.l1_coefficient * c.sum() / m;
  p.total = p.reconstruction + p.sparsity;

  const Matrix dxhat = (2.0 / m) * r;
  const Matrix dd = dxhat.transpose() * c;  // n x h
  Matrix dc = dxhat * d;
  dc.array() += ae.l1_coefficient / m;
  const Matrix dz = dc.cwiseProduct((z.array() > 0.0).cast<double>().matrix());

  Gradients g;
  g.encoder = dz.transpose() * x;
  g.bias = dz.colwise().sum().transpose();
  if (ae.tied) {
    g.encoder += dd.transpose();
  } else {
    g.decoder = dd;
  }
  return {p, g};
}

/// Mean number of strictly positive coefficients per sample.
inline double true_sparsity(const SparseAutoencoder& ae, const Matrix& batch) {
  if (batch.rows() == 0) return 0.0;
  const Matrix c = ae.encode_batch(batch);
  return static_cast<double>((c.array() > 0.0).count()) / static_cast<double>(batch.rows());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Eigen::Index hidden_size = 0;
  bool tied = true;
  double l1_coefficient = 1e-3;
  double learning_rate = 1e-3;
  int batch_size = 32;
  long n_examples = 75000;
  std::uint64_t seed = 0;
  bool mean_center = false;
  int log_every = 100;  // optimizer steps between trace entries
  std::function<void(const std::string&)> warn = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
};

struct TracePoint {
  long examples_seen = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double true_sparsity = 0.0;
};

struct TrainResult {
  SparseAutoencoder autoencoder;
  std::vector<TracePoint> trace;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& msg, std::vector<TracePoint> trace)
      : std::runtime_error(msg), trace_(std::move(trace)) {}
  const std::vector<TracePoint>& trace() const { return trace_; }

 private:
  std::vector<TracePoint> trace_;
};

/// Adam on minibatches drawn by reshuffled passes over the rows of `data`
/// until n_examples samples have been consumed.
inline TrainResult train(const Matrix& data, const TrainConfig& cfg, int layer_index = 0) {
  const Eigen::Index n = data.cols();
  if (cfg.hidden_size < 1) throw std::invalid_argument("sae::train: hidden_size must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("sae::train: batch_size must be >= 1");
  if (data.rows() < cfg.batch_size) {
    throw std::invalid_argument("sae::train: dataset has fewer rows (" + std::to_string(data.rows()) +
                                ") than batch_size");
  }
  if (!data.allFinite()) throw std::invalid_argument("sae::train: non-finite activation data");
  if (cfg.hidden_size != n && cfg.hidden_size != 2 * n && cfg.warn) {
    cfg.warn("hidden size " + std::to_string(cfg.hidden_size) + " is neither n=" + std::to_string(n) +
             " nor 2n=" + std::to_string(2 * n));
  }

  numerics::Rng rng(cfg.seed);
  TrainResult out;
  SparseAutoencoder& ae = out.autoencoder;
  ae = SparseAutoencoder::init(n, cfg.hidden_size, cfg.tied, cfg.l1_coefficient, rng.fork("init").next_u64());
  ae.layer_index = layer_index;
  if (cfg.mean_center) ae.center = data.colwise().mean().transpose();

  const numerics::AdamConfig adam{.learning_rate = cfg.learning_rate};
  auto s_enc = numerics::AdamState::zeros_like(ae.encoder, adam);
  auto s_bias = numerics::AdamState::zeros_like(ae.bias, adam);
  numerics::AdamState s_dec;
  if (!ae.tied) s_dec = numerics::AdamState::zeros_like(ae.decoder, adam);

  numerics::Rng order_rng = rng.fork("order");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  Matrix batch(cfg.batch_size, n);
  long seen = 0;
  long step = 0;
  while (seen < cfg.n_examples) {
    const long take = std::min<long>(cfg.batch_size, cfg.n_examples - seen);
    batch.resize(take, n);
    for (long i = 0; i < take; ++i) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.row(i) = data.row(order[cursor++]);
    }
    auto [parts, g] = loss_and_grad(ae, batch);
    seen += take;
    if (!std::isfinite(parts.total)) {
      throw TrainingDiverged("sae::train: non-finite loss after " + std::to_string(seen) + " examples",
                             std::move(out.trace));
    }
    if (cfg.log_every > 0 && step % cfg.log_every == 0) {
      out.trace.push_back({seen, parts.total, parts.reconstruction, true_sparsity(ae, batch)});
    }
    Matrix bias_m = ae.bias;
    numerics::adam_update(s_enc, ae.encoder, g.encoder);
    numerics::adam_update(s_bias, bias_m, g.bias);
    ae.bias = bias_m;
    if (!ae.tied) numerics::adam_update(s_dec, ae.decoder, g.decoder);
    ++step;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature dictionaries and overlap

struct FeatureDictionary {
  Matrix features;                 // rows are unit-norm directions (zero-norm rows dropped)
  std::vector<int> feature_index;  // original feature index of each retained row
  std::vector<int> excluded;       // zero-norm features
  int layer_index = 0;
  std::string source;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }

  /// Each row of `directions` is one feature.
  static FeatureDictionary from_rows(const Matrix& directions, int layer = 0, std::string source = {}) {
    FeatureDictionary d;
    d.layer_index = layer;
    d.source = std::move(source);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < directions.rows(); ++i) {
      if (directions.row(i).norm() > 1e-12) {
        keep.push_back(i);
      } else {
        d.excluded.push_back(static_cast<int>(i));
      }
    }
    d.features.resize(static_cast<Eigen::Index>(keep.size()), directions.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) {
      d.features.row(static_cast<Eigen::Index>(k)) = directions.row(keep[k]).normalized();
      d.feature_index.push_back(static_cast<int>(keep[k]));
    }
    return d;
  }

  /// Decoder columns of `ae` as the dictionary.
  static FeatureDictionary from_autoencoder(const SparseAutoencoder& ae, std::string source = {}) {
    return from_rows(ae.decoder_matrix().transpose(), ae.layer_index, std::move(source));
  }
};

struct MmcsResult {
  double mean = 0.0;
  std::vector<double> per_feature;  // aligned with d1.feature_index
};

/// For every feature of d1, the best cosine similarity against d2; and their mean.
inline MmcsResult mmcs(const FeatureDictionary& d1, const FeatureDictionary& d2) {
  if (d1.size() == 0 || d2.size() == 0) throw std::invalid_argument("mmcs: empty dictionary");
  if (d1.dim() != d2.dim()) throw std::invalid_argument("mmcs: dictionaries have different dimension");
  const Matrix sims = d1.features * d2.features.transpose();
  MmcsResult r;
  for (Eigen::Index i = 0; i < sims.rows(); ++i) r.per_feature.push_back(sims.row(i).maxCoeff());
  r.mean = std::accumulate(r.per_feature.begin(), r.per_feature.end(), 0.0) /
           static_cast<double>(r.per_feature.size());
  return r;
}

/// Top-k features of d1 by max cosine against d2, descending; ties go to the lower index.
inline std::vector<std::pair<int, double>> top_similarity_features(const FeatureDictionary& d1,
                                                                   const FeatureDictionary& d2, int k) {
  if (k < 0 || k > d1.size()) throw std::invalid_argument("top_similarity_features: k out of range");
  if (k == 0) return {};
  const auto r = mmcs(d1, d2);
  std::vector<std::pair<int, double>> ranked;
  for (std::size_t i = 0; i < r.per_feature.size(); ++i) ranked.emplace_back(d1.feature_index[i], r.per_feature[i]);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second > b.second || (a.second == b.second && a.first < b.first);
  });
  ranked.resize(static_cast<std::size_t>(k));
  return ranked;
}

// ---------------------------------------------------------------------------
// Checkpoints (container magic "LFPS")

inline constexpr std::string_view kSaeMagic = "LFPS";

inline void save_autoencoder(const SparseAutoencoder& ae, const std::filesystem::path& path) {
  tensorio::Container c;
  c.magic = std::string(kSaeMagic);
  c.metadata = {{"kind", "autoencoder"},
                {"tied", ae.tied},
                {"l1_coefficient", ae.l1_coefficient},
                {"layer_index", ae.layer_index},
                {"input_dim", ae.input_dim()},
                {"hidden_size", ae.hidden_size()}};
  c.add("encoder", ae.encoder);
  c.add("bias", ae.bias);
  if (!ae.tied) c.add("decoder", ae.decoder);
  if (ae.center.size() > 0) c.add("center", ae.center);
  tensorio::write_container(c, path);
}

inline SparseAutoencoder load_autoencoder(const std::filesystem::path& path) {
  using tensorio::FormatErrc;
  using tensorio::FormatError;
  const auto c = tensorio::read_container(path, kSaeMagic);
  if (c.metadata.value("kind", "") != "autoencoder") {
    throw FormatError(FormatErrc::schema_error, "LFPS file is not an autoencoder checkpoint");
  }
  SparseAutoencoder ae;
  try {
    ae.tied = c.metadata.at("tied").get<bool>();
    ae.l1_coefficient = c.metadata.at("l1_coefficient").get<double>();
    ae.layer_index = c.metadata.at("layer_index").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrc::schema_error, std::string("autoencoder metadata: ") + e.what());
  }
  ae.encoder = c.section("encoder");
  const Matrix& b = c.section("bias");
  ae.bias = Eigen::Map<const Vector>(b.data(), b.size());
  if (ae.bias.size() != ae.encoder.rows()) throw FormatError(FormatErrc::schema_error, "bias length mismatch");
  if (!ae.tied) {
    ae.decoder = c.section("decoder");
    if (ae.decoder.rows() != ae.encoder.cols() || ae.decoder.cols() != ae.encoder.rows()) {
      throw FormatError(FormatErrc::schema_error, "decoder shape mismatch");
    }
  }
  if (c.has("center")) {
    const Matrix& m = c.section("center");
    ae.center = Eigen::Map<const Vector>(m.data(), m.size());
  }
  if (!ae.all_finite()) throw FormatError(FormatErrc::invalid_data, "non-finite autoencoder parameter");
  return ae;
}

inline void save_dictionary(const FeatureDictionary& d, const std::filesystem::path& path) {
  tensorio::Container c;
  c.magic = std::string(kSaeMagic);
  c.metadata = {{"kind", "dictionary"},
                {"layer_index", d.layer_index},
                {"source", d.source},
                {"feature_index", d.feature_index},
                {"excluded", d.excluded}};
  c.add("features", d.features);
  tensorio::write_container(c, path);
}

inline FeatureDictionary load_dictionary(const std::filesystem::path& path) {
  const auto c = tensorio::read_container(path, kSaeMagic);
  if (c.metadata.value("kind", "") != "dictionary") {
    throw tensorio::FormatError(tensorio::FormatErrc::schema_error, "LFPS file is not a dictionary export");
  }
  FeatureDictionary d;
  d.features = c.section("features");
  d.layer_index = c.metadata.value("layer_index", 0);
  d.source = c.metadata.value("source", "");
  d.feature_index = c.metadata.value("feature_index", std::vector<int>{});
  d.excluded = c.metadata.value("excluded", std::vector<int>{});
  if (d.feature_index.size() != static_cast<std::size_t>(d.features.rows())) {
    throw tensorio::FormatError(tensorio::FormatErrc::schema_error, "feature_index length mismatch");
  }
  return d;
}

inline std::string loss_trace_csv(const std::vector<TracePoint>& trace) {
  std::string out = "examples,total,reconstruction,true_sparsity\n";
  char buf[160];
  for (const auto& t : trace) {
    std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g\n", t.examples_seen, t.total, t.reconstruction,
                  t.true_sparsity);
    out += buf;
  }
  return out;
}

}  // namespace lfp::sae
