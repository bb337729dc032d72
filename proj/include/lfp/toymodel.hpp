#pragma once

// A small decoder-only transformer. Per layer, with token rows as positions
// (row convention, X is T x d):
//   Q = X W_q, K = X W_k, V = X W_v, A = softmax(Q K^T / sqrt(d)) causal, O = A V
//   U = X + O
//   H = GELU(U W_in + b_in)            <- the captured "MLP activations"
//   X' = U + H W_out + b_out
// Single head, no layer norm.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lfp/numerics.hpp"
#include "lfp/tensorio.hpp"

namespace lfp::toymodel {

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) {
    for (auto& w : words) add(std::move(w));
  }

  int add(std::string word) {
    word = tensorio::to_lower(word);
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    index_.emplace(word, id);
    words_.push_back(std::move(word));
    return id;
  }

  std::optional<int> find(std::string_view word) const {
    auto it = index_.find(tensorio::to_lower(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view word) const {
    auto found = find(word);
    if (!found) throw std::out_of_range("word not in vocabulary: " + std::string(word));
    return *found;
  }

  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(std::span<const std::string> tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(word(i));
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 32;
  int n_layers = 4;
  int max_context = 32;

  int mlp_width() const { return 4 * d_model; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Matrix wq, wk, wv;  // d x d
  Matrix w_in;        // d x 4d
  Matrix b_in;        // 1 x 4d
  Matrix w_out;       // 4d x d
  Matrix b_out;       // 1 x d

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("wq", self.wq);
    f("wk", self.wk);
    f("wv", self.wv);
    f("w_in", self.w_in);
    f("b_in", self.b_in);
    f("w_out", self.w_out);
    f("b_out", self.b_out);
  }
  static bool is_mlp(std::string_view name) {
    return name == "w_in" || name == "b_in" || name == "w_out" || name == "b_out";
  }
};

class TinyTransformer {
 public:
  ModelConfig config;
  Matrix tok_emb;  // V x d
  Matrix pos_emb;  // T x d
  Matrix unembed;  // d x V
  std::vector<LayerParams> layers;

  /// Randomly initialized model; biases start at zero.
  static TinyTransformer init(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.vocab_size < 1 || cfg.d_model < 1 || cfg.n_layers < 1 || cfg.max_context < 1) {
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    }
    numerics::Rng root(seed);
    auto draw = [&](const char* label, int l, Eigen::Index r, Eigen::Index c) {
      return numerics::xavier_init(r, c, root.fork(label).fork(static_cast<std::uint64_t>(l)).next_u64());
    };
    TinyTransformer m;
    m.config = cfg;
    const int d = cfg.d_model;
    m.tok_emb = draw("tok_emb", 0, cfg.vocab_size, d);
    m.pos_emb = draw("pos_emb", 0, cfg.max_context, d) * 0.5;
    m.unembed = draw("unembed", 0, d, cfg.vocab_size);
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerParams p;
      p.wq = draw("wq", l, d, d);
      p.wk = draw("wk", l, d, d);
      p.wv = draw("wv", l, d, d);
      p.w_in = draw("w_in", l, d, cfg.mlp_width());
      p.b_in = Matrix::Zero(1, cfg.mlp_width());
      p.w_out = draw("w_out", l, cfg.mlp_width(), d);
      p.b_out = Matrix::Zero(1, d);
      m.layers.push_back(std::move(p));
    }
    return m;
  }

  /// Same shapes, all zeros. Used as a gradient accumulator.
  TinyTransformer zeros_like() const {
    TinyTransformer z = *this;
    z.for_each_param([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
  }

  /// Visits every parameter as (qualified name, matrix) in a fixed order.
  template <class F>
  void for_each_param(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      LayerParams::visit(layers[l], [&](const char* name, Matrix& m) {
        f("layers." + std::to_string(l) + "." + name, m);
      });
    }
    f(std::string("unembed"), unembed);
  }

  template <class F>
  void for_each_param(F&& f) const {
    const_cast<TinyTransformer*>(this)->for_each_param(
        [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_param([&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  friend bool operator==(const TinyTransformer& a, const TinyTransformer& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Matrix*> pa, pb;
    a.for_each_param([&](const std::string&, const Matrix& m) { pa.push_back(&m); });
    b.for_each_param([&](const std::string&, const Matrix& m) { pb.push_back(&m); });
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (pa[i]->rows() != pb[i]->rows() || pa[i]->cols() != pb[i]->cols() || *pa[i] != *pb[i]) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Forward / backward

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

/// Called with (layer index, MLP hidden activations T x 4d) after the
/// nonlinearity; may edit the activations in place before they reach w_out.
using MlpHook = std::function<void(int layer, Matrix& hidden)>;

struct CapturedActivations {
  std::vector<int> layers;
  std::vector<Matrix> per_layer;  // T x 4d each, same order as `layers`

  const Matrix& at(int layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] == layer) return per_layer[i];
    }
    throw std::out_of_range("layer " + std::to_string(layer) + " was not captured");
  }
};

struct LayerCache {
  Matrix x_in, q, k, v, attn, o, u, h_pre, h;
};

struct ForwardResult {
  Matrix logits;  // T x V
  CapturedActivations activations;
  std::vector<Matrix> attention;  // per layer, T x T
  std::vector<LayerCache> cache;  // filled when requested for backward
  Matrix final_hidden;            // T x d
};

struct ForwardOptions {
  std::vector<int> capture_layers;
  const MlpHook* hook = nullptr;
  bool keep_cache = false;
  bool last_position_only = false;  // logits for the final row only
};

inline void check_tokens(const TinyTransformer& model, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_context) {
    throw std::invalid_argument("forward: sequence longer than max context (" +
                                std::to_string(tokens.size()) + " > " +
                                std::to_string(model.config.max_context) + ")");
  }
  for (int t : tokens) {
    if (t < 0 || t >= model.config.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " out of vocabulary");
    }
  }
}

inline ForwardResult forward(const TinyTransformer& model, std::span<const int> tokens,
                             const ForwardOptions& opts = {}) {
  check_tokens(model, tokens);
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const int d = model.config.d_model;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (int l : opts.capture_layers) {
    if (l < 0 || l >= model.config.n_layers) throw std::out_of_range("capture layer out of range");
  }

  ForwardResult out;
  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    x.row(t) = model.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + model.pos_emb.row(t);
  }

  for (int l = 0; l < model.config.n_layers; ++l) {
    const LayerParams& p = model.layers[static_cast<std::size_t>(l)];
    LayerCache c;
    c.x_in = x;
    c.q = x * p.wq;
    c.k = x * p.wk;
    c.v = x * p.wv;
    Matrix scores = (c.q * c.k.transpose()) * scale;
    for (Eigen::Index i = 0; i < T; ++i) {
      for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
    }
    c.attn = numerics::softmax_rows(scores);
    c.o = c.attn * c.v;
    c.u = x + c.o;
    c.h_pre = (c.u * p.w_in).rowwise() + p.b_in.row(0);
    c.h = c.h_pre.unaryExpr([](double z) { return gelu(z); });
    if (opts.hook && *opts.hook) (*opts.hook)(l, c.h);
    for (std::size_t i = 0; i < opts.capture_layers.size(); ++i) {
      if (opts.capture_layers[i] == l) {
        out.activations.layers.push_back(l);
        out.activations.per_layer.push_back(c.h);
      }
    }
    x = c.u + ((c.h * p.w_out).rowwise() + p.b_out.row(0));
    out.attention.push_back(c.attn);
    if (opts.keep_cache) out.cache.push_back(std::move(c));
  }
  // Keep requested capture order even when layers repeat or are unsorted.
  if (!opts.capture_layers.empty()) {
    CapturedActivations ordered;
    for (int l : opts.capture_layers) {
      ordered.layers.push_back(l);
      ordered.per_layer.push_back(out.activations.at(l));
    }
    out.activations = std::move(ordered);
  }
  out.final_hidden = x;
  out.logits = opts.last_position_only ? Matrix(x.bottomRows(1) * model.unembed) : Matrix(x * model.unembed);
  return out;
}

/// Accumulates parameter gradients of sum(dlogits .* logits) into `grad`.
/// `fwd` must come from forward(..., keep_cache = true) on the same tokens.
inline void backward(const TinyTransformer& model, std::span<const int> tokens,
                     const ForwardResult& fwd, const Matrix& dlogits, TinyTransformer& grad) {
  if (fwd.cache.size() != model.layers.size()) {
    throw std::invalid_argument("backward: forward cache missing (keep_cache=false?)");
  }
  const auto T = static_cast<Eigen::Index>(tokens.size());
  if (dlogits.rows() != T || dlogits.cols() != model.config.vocab_size) {
    throw std::invalid_argument("backward: dlogits shape mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(model.config.d_model));

  grad.unembed.noalias() += fwd.final_hidden.transpose() * dlogits;
  Matrix dx = dlogits * model.unembed.transpose();

  for (int l = model.config.n_layers - 1; l >= 0; --l) {
    const LayerParams& p = model.layers[static_cast<std::size_t>(l)];
    LayerParams& g = grad.layers[static_cast<std::size_t>(l)];
    const LayerCache& c = fwd.cache[static_cast<std::size_t>(l)];

    // x_out = u + h w_out + b_out, u = x_in + o
    g.w_out.noalias() += c.h.transpose() * dx;
    g.b_out += dx.colwise().sum();
    Matrix dh = dx * p.w_out.transpose();
    Matrix dh_pre = dh.cwiseProduct(c.h_pre.unaryExpr([](double z) { return gelu_grad(z); }));
    g.w_in.noalias() += c.u.transpose() * dh_pre;
    g.b_in += dh_pre.colwise().sum();
    const Matrix du = dx + dh_pre * p.w_in.transpose();
    const Matrix& d_o = du;

    // o = attn v
    Matrix d_attn = d_o * c.v.transpose();
    Matrix dv = c.attn.transpose() * d_o;
    // softmax backward per row; masked entries have attn == 0 so drop out.
    Matrix d_scores(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const double dot = d_attn.row(i).dot(c.attn.row(i));
      d_scores.row(i) = c.attn.row(i).cwiseProduct((d_attn.row(i).array() - dot).matrix());
    }
    d_scores *= scale;
    Matrix dq = d_scores * c.k;
    Matrix dk = d_scores.transpose() * c.q;

    g.wq.noalias() += c.x_in.transpose() * dq;
    g.wk.noalias() += c.x_in.transpose() * dk;
    g.wv.noalias() += c.x_in.transpose() * dv;
    dx = du + dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    grad.tok_emb.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    grad.pos_emb.row(t) += dx.row(t);
  }
}

/// Sum over positions of log p(tokens[t+1] | tokens[..t]) for t >= start-1.
/// Returns per-position log-probs for the predicted tokens tokens[start..].
inline std::vector<double> token_logprobs(const Matrix& logits, std::span<const int> tokens,
                                          std::size_t start) {
  std::vector<double> out;
  for (std::size_t t = std::max<std::size_t>(start, 1); t < tokens.size(); ++t) {
    const RowVector lp = numerics::log_softmax_row(logits.row(static_cast<Eigen::Index>(t - 1)));
    out.push_back(lp(tokens[t]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// Draws an index from softmax(logits / temperature) using one uniform draw.
inline int sample_from_logits(const RowVector& logits, double temperature, numerics::Rng& rng) {
  const RowVector scaled = logits / temperature;
  const double mx = scaled.maxCoeff();
  const RowVector p = (scaled.array() - mx).exp().matrix();
  const double u = rng.uniform() * p.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u < acc) return static_cast<int>(i);
  }
  Eigen::Index arg = 0;
  p.maxCoeff(&arg);
  return static_cast<int>(arg);
}

/// Autoregressive sampling; returns prefix followed by the generated tokens.
inline std::vector<int> generate(const TinyTransformer& model, std::span<const int> prefix, int n_tokens,
                                 double temperature, std::uint64_t seed, const MlpHook* hook = nullptr) {
  if (!(temperature > 0.0)) throw std::invalid_argument("generate: temperature must be > 0");
  if (n_tokens < 0) throw std::invalid_argument("generate: n_tokens must be >= 0");
  if (prefix.empty()) throw std::invalid_argument("generate: empty prefix");
  if (static_cast<int>(prefix.size()) + n_tokens > model.config.max_context) {
    throw std::invalid_argument("generate: prefix + completion exceeds max context");
  }
  std::vector<int> seq(prefix.begin(), prefix.end());
  numerics::Rng rng(seed);
  ForwardOptions opts;
  opts.hook = hook;
  opts.last_position_only = true;
  for (int i = 0; i < n_tokens; ++i) {
    const auto fwd = forward(model, seq, opts);
    seq.push_back(sample_from_logits(fwd.logits.row(0), temperature, rng));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Parameter divergence

enum class LayerSelection { highest_divergence, lowest_layers };

struct DivergenceOptions {
  int top_k = 5;
  LayerSelection mode = LayerSelection::highest_divergence;
  bool mlp_only = false;
};

struct DivergenceReport {
  std::vector<double> per_layer;
  std::vector<int> selected_layers;  // ascending layer index
};

inline DivergenceReport parameter_divergence(const TinyTransformer& base, const TinyTransformer& tuned,
                                             const DivergenceOptions& opts = {}) {
  if (!(base.config == tuned.config) || base.layers.size() != tuned.layers.size()) {
    throw std::invalid_argument("parameter_divergence: architecture mismatch");
  }
  const int n_layers = base.config.n_layers;
  if (opts.top_k < 0 || opts.top_k > n_layers) {
    throw std::invalid_argument("parameter_divergence: top_k must be in [0, n_layers]");
  }
  DivergenceReport rep;
  for (int l = 0; l < n_layers; ++l) {
    double sq = 0.0;
    std::vector<std::pair<std::string, const Matrix*>> a, b;
    LayerParams::visit(base.layers[static_cast<std::size_t>(l)],
                       [&](const char* n, const Matrix& m) { a.emplace_back(n, &m); });
    LayerParams::visit(tuned.layers[static_cast<std::size_t>(l)],
                       [&](const char* n, const Matrix& m) { b.emplace_back(n, &m); });
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (opts.mlp_only && !LayerParams::is_mlp(a[i].first)) continue;
      sq += (*a[i].second - *b[i].second).squaredNorm();
    }
    rep.per_layer.push_back(std::sqrt(sq));
  }
  std::vector<int> order(static_cast<std::size_t>(n_layers));
  std::iota(order.begin(), order.end(), 0);
  if (opts.mode == LayerSelection::highest_divergence) {
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return rep.per_layer[x] > rep.per_layer[y]; });
  }
  rep.selected_layers.assign(order.begin(), order.begin() + opts.top_k);
  std::sort(rep.selected_layers.begin(), rep.selected_layers.end());
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints (container magic "LFPM")

inline constexpr std::string_view kModelMagic = "LFPM";

inline tensorio::Container to_container(const TinyTransformer& model, const Vocabulary* vocab = nullptr) {
  tensorio::Container c;
  c.magic = std::string(kModelMagic);
  c.metadata["vocab_size"] = model.config.vocab_size;
  c.metadata["d_model"] = model.config.d_model;
  c.metadata["n_layers"] = model.config.n_layers;
  c.metadata["max_context"] = model.config.max_context;
  if (vocab) c.metadata["vocabulary"] = vocab->words();
  model.for_each_param([&](const std::string& name, const Matrix& m) { c.add(name, m); });
  return c;
}

inline void save_model(const TinyTransformer& model, const std::filesystem::path& path,
                       const Vocabulary* vocab = nullptr) {
  tensorio::write_container(to_container(model, vocab), path);
}

struct LoadedModel {
  TinyTransformer model;
  Vocabulary vocabulary;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  const auto c = tensorio::read_container(path, kModelMagic);
  ModelConfig cfg;
  try {
    cfg.vocab_size = c.metadata.at("vocab_size").get<int>();
    cfg.d_model = c.metadata.at("d_model").get<int>();
    cfg.n_layers = c.metadata.at("n_layers").get<int>();
    cfg.max_context = c.metadata.at("max_context").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw tensorio::FormatError(tensorio::FormatErrc::schema_error, std::string("model metadata: ") + e.what());
  }
  LoadedModel out;
  out.model = TinyTransformer::init(cfg, 0);
  out.model.for_each_param([&](const std::string& name, Matrix& m) {
    const Matrix& s = c.section(name);
    if (s.rows() != m.rows() || s.cols() != m.cols()) {
      throw tensorio::FormatError(tensorio::FormatErrc::schema_error, "section " + name + " has wrong shape");
    }
    m = s;
  });
  if (c.metadata.contains("vocabulary")) {
    out.vocabulary = Vocabulary(c.metadata["vocabulary"].get<std::vector<std::string>>());
  }
  return out;
}

}  // namespace lfp::toymodel
