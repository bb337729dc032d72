#pragma once

// Shared numerical kernels: dense matrix aliases, a reproducible counter-based
// PRNG, Adam, Xavier initialization, PCA, central finite differences and a
// numerically stable row softmax.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lfp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace numerics {

/// FNV-1a over a byte range. Used for checksums and for deriving stream seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(text.data(), text.size());
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: the i-th draw is splitmix64(key + i * golden).
///
/// Draw i depends only on (key, i), so results are identical across
/// platforms and standard libraries. Child streams are derived with fork(),
/// which hashes a label into a new key; this is how one root seed is split
/// across pipeline stages.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(splitmix64(seed)) {}

  std::uint64_t next_u64() {
    return splitmix64(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one draw per call, the pair partner is
  /// discarded so the counter advances by exactly two).
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Independent child stream keyed by a label.
  Rng fork(std::string_view label) const {
    Rng child(0);
    child.key_ = splitmix64(key_ ^ fnv1a64(label));
    return child;
  }

  Rng fork(std::uint64_t index) const {
    Rng child(0);
    child.key_ = splitmix64(key_ ^ splitmix64(index + 0x632be59bd9b4e019ULL));
    return child;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Derives a 64-bit seed for a named stage from a root seed.
inline std::uint64_t stage_seed(std::uint64_t root, std::string_view stage) {
  return splitmix64(root ^ fnv1a64(stage));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_same_shape(const Matrix& a, const Matrix& b,
                               const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::uint64_t step_count = 0;
  AdamConfig config;

  static AdamState zeros_like(const Matrix& param, AdamConfig config = {}) {
    AdamState s;
    s.first_moment = Matrix::Zero(param.rows(), param.cols());
    s.second_moment = Matrix::Zero(param.rows(), param.cols());
    s.config = config;
    return s;
  }
};

/// In-place bias-corrected Adam update. Weight decay is not applied.
inline void adam_update(AdamState& state, Matrix& param, const Matrix& grad) {
  require_same_shape(param, grad, "adam_update");
  require_same_shape(state.first_moment, grad, "adam_update (state)");
  if (!grad.allFinite()) {
    throw std::domain_error("adam_update: non-finite gradient");
  }
  const auto& c = state.config;
  state.step_count += 1;
  state.first_moment = c.beta1 * state.first_moment + (1.0 - c.beta1) * grad;
  state.second_moment =
      c.beta2 * state.second_moment + (1.0 - c.beta2) * grad.cwiseAbs2();
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  param.array() -= c.learning_rate * (state.first_moment.array() / bc1) /
                   ((state.second_moment.array() / bc2).sqrt() + c.epsilon);
}

/// Value form of adam_update: returns the updated parameter and state.
inline std::pair<Matrix, AdamState> adam_step(const AdamState& state,
                                              const Matrix& param,
                                              const Matrix& grad) {
  AdamState next = state;
  Matrix updated = param;
  adam_update(next, updated, grad);
  return {std::move(updated), std::move(next)};
}

// ---------------------------------------------------------------------------
// Initialization

/// Glorot/Xavier uniform: entries in [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))].
inline Matrix xavier_init(Eigen::Index rows, Eigen::Index cols,
                          std::uint64_t seed) {
  if (rows < 1 || cols < 1) {
    throw std::invalid_argument("xavier_init: dimensions must be >= 1");
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = rng.uniform(-bound, bound);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  Matrix components;  // k x n, rows orthonormal
  std::vector<double> explained_variance_ratio;
  std::vector<double> explained_variance;
  Vector mean;

  /// Projects rows of `data` onto the retained components.
  Matrix project(const Matrix& data) const {
    return (data.rowwise() - mean.transpose()) * components.transpose();
  }
};

/// Top-k principal components from the eigendecomposition of the sample
/// covariance. Data with zero total variance is rejected with
/// std::domain_error (the ratios would be 0/0).
inline PcaResult pca(const Matrix& data, Eigen::Index k) {
  const Eigen::Index m = data.rows();
  const Eigen::Index n = data.cols();
  if (m < 2) throw std::invalid_argument("pca: need at least 2 rows");
  if (k < 1 || k > std::min(m, n)) {
    throw std::invalid_argument("pca: k out of range");
  }
  PcaResult out;
  out.mean = data.colwise().mean().transpose();
  const Matrix centered = data.rowwise() - out.mean.transpose();
  const Matrix cov =
      (centered.transpose() * centered) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw std::domain_error("pca: eigendecomposition failed");
  }
  // Eigen returns ascending eigenvalues.
  const Vector evals = solver.eigenvalues().cwiseMax(0.0);
  const double total = evals.sum();
  if (!(total > 0.0)) throw std::domain_error("pca: data has zero variance");
  out.components.resize(k, n);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index idx = n - 1 - i;
    Vector v = solver.eigenvectors().col(idx);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.row(i) = v.transpose();
    out.explained_variance.push_back(evals(idx));
    out.explained_variance_ratio.push_back(evals(idx) / total);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of a scalar function of a matrix.
inline Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f,
                               const Matrix& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be > 0");
  Matrix grad(x.rows(), x.cols());
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double up = f(probe);
    probe.data()[i] = orig - h;
    const double down = f(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_diff_grad: non-finite function value");
    }
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||, tiny).
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / denom;
}

// ---------------------------------------------------------------------------
// Softmax

inline Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// log-softmax of one row, stable.
inline RowVector log_softmax_row(const RowVector& x) {
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  return (x.array() - lse).matrix();
}

}  // namespace numerics
}  // namespace lfp
