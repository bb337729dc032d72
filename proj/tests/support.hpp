#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lfp/numerics.hpp"
#include "lfp/sae.hpp"

namespace lfp::test_support {

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lfp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Ground-truth dictionary (rows are unit features) and samples that are
/// non-negative combinations of at most `max_active` of them.
struct SyntheticDictionary {
  Matrix features;
  Matrix samples;
};

inline SyntheticDictionary synthetic_dictionary(Eigen::Index n_features, Eigen::Index dim, Eigen::Index n_samples,
                                                int max_active, std::uint64_t seed) {
  numerics::Rng rng(seed);
  SyntheticDictionary s;
  s.features.resize(n_features, dim);
  for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = rng.normal();
  s.features.rowwise().normalize();
  s.samples = Matrix::Zero(n_samples, dim);
  for (Eigen::Index r = 0; r < n_samples; ++r) {
    const auto k = 1 + rng.below(static_cast<std::uint64_t>(max_active));
    for (std::uint64_t j = 0; j < k; ++j) {
      const auto f = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n_features)));
      s.samples.row(r) += rng.uniform(0.5, 1.5) * s.features.row(f);
    }
  }
  return s;
}

/// Worst relative error between analytic and central-difference gradients
/// of the autoencoder loss over every parameter block.
inline double sae_gradient_error(const sae::SparseAutoencoder& ae, const Matrix& batch) {
  const auto analytic = sae::loss_and_grad(ae, batch).second;
  const double h = 1e-6;
  double worst = 0.0;
  auto check = [&](auto setter, const Matrix& start, const Matrix& g) {
    auto f = [&](const Matrix& p) {
      auto copy = ae;
      setter(copy, p);
      return sae::loss(copy, batch).total;
    };
    worst = std::max(worst, numerics::relative_error(g, numerics::finite_diff_grad(f, start, h)));
  };
  check([](sae::SparseAutoencoder& a, const Matrix& p) { a.encoder = p; }, ae.encoder, analytic.encoder);
  check([](sae::SparseAutoencoder& a, const Matrix& p) { a.bias = p.col(0); }, Matrix(ae.bias),
        Matrix(analytic.bias));
  if (!ae.tied) {
    check([](sae::SparseAutoencoder& a, const Matrix& p) { a.decoder = p; }, ae.decoder, analytic.decoder);
  }
  return worst;
}

/// O(n^2) pair counting: tau-b and the pair classification counts.
struct BruteTau {
  double tau = 0.0;
  std::int64_t concordant = 0, discordant = 0, ties_x_only = 0, ties_y_only = 0, ties_both = 0;
};

inline BruteTau brute_force_tau(const std::vector<double>& x, const std::vector<double>& y) {
  BruteTau r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0 && dy == 0) ++r.ties_both;
      else if (dx == 0) ++r.ties_x_only;
      else if (dy == 0) ++r.ties_y_only;
      else if ((dx > 0) == (dy > 0)) ++r.concordant;
      else ++r.discordant;
    }
  }
  const double nx = static_cast<double>(r.concordant + r.discordant + r.ties_y_only);
  const double ny = static_cast<double>(r.concordant + r.discordant + r.ties_x_only);
  if (nx > 0 && ny > 0) r.tau = static_cast<double>(r.concordant - r.discordant) / std::sqrt(nx * ny);
  return r;
}

}  // namespace lfp::test_support
