#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "grouploss/diag.hpp"
#include "grouploss/errors.hpp"
#include "grouploss/matrix.hpp"

namespace grouploss {

/// What to do with negative correlations before they reach the dynamics,
/// which assume a non-negative similarity matrix.
enum class NegativeMode {
  Clamp,  // zero them out (rectifier); the default
  Shift,  // subtract the most negative off-diagonal entry from all of them
};

inline const char* to_string(NegativeMode m) {
  return m == NegativeMode::Clamp ? "clamp" : "shift";
}

/// n x n pairwise similarity: symmetric within 1e-12, exactly zero diagonal,
/// non-negative entries. Validated on construction.
class SimilarityMatrix {
 public:
  explicit SimilarityMatrix(Matrix w) : inner_(std::move(w)) { validate(); }

  const Matrix& inner() const { return inner_; }
  std::size_t size() const { return inner_.rows; }
  double operator()(std::size_t i, std::size_t j) const { return inner_(i, j); }

 private:
  void validate() const {
    if (inner_.rows != inner_.cols) {
      throw ContractError("SimilarityMatrix: not square: " + inner_.shape_str());
    }
    for (std::size_t i = 0; i < inner_.rows; ++i) {
      if (inner_(i, i) != 0.0) {
        throw ContractError("SimilarityMatrix: nonzero diagonal at " + std::to_string(i));
      }
      for (std::size_t j = i + 1; j < inner_.cols; ++j) {
        if (std::abs(inner_(i, j) - inner_(j, i)) > 1e-12) {
          throw ContractError("SimilarityMatrix: asymmetric at (" + std::to_string(i) +
                              "," + std::to_string(j) + ")");
        }
      }
      for (double v : inner_.row(i)) {
        if (v < 0.0 || !std::isfinite(v)) {
          throw ContractError("SimilarityMatrix: negative or non-finite entry");
        }
      }
    }
  }

  Matrix inner_;
};

/// Forward intermediates of the correlation layer, kept so the backward pass
/// does not have to recompute them.
struct PearsonCache {
  Matrix unit_centered;                  // n x d; centered rows scaled to unit norm
  std::vector<double> centered_norms;    // ||row - mean||, 0 for degenerate rows
  std::vector<bool> degenerate;          // rows with variance < kDegenerateVariance
  Matrix raw;                            // n x n correlations before Clamp/Shift, zero diagonal
  bool shift_applied = false;
  double shift_amount = 0.0;             // subtracted constant (>= 0)
  std::size_t shift_i = 0, shift_j = 0;  // first off-diagonal argmin, row-major
};

namespace detail {

inline void compute_pearson_raw(const Matrix& embeddings, PearsonCache& cache) {
  const std::size_t n = embeddings.rows;
  const std::size_t d = embeddings.cols;
  if (n < 2 || d < 2) {
    throw ContractError("pearson_similarity: need at least 2 rows and 2 feature dims, got " +
                        embeddings.shape_str());
  }
  if (!all_finite(embeddings)) {
    throw NumericError("pearson_similarity: non-finite embeddings");
  }
  cache.unit_centered = Matrix(n, d);
  cache.centered_norms.assign(n, 0.0);
  cache.degenerate.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = embeddings.row(i);
    auto dst = cache.unit_centered.row(i);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= static_cast<double>(d);
    double sumsq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dst[k] = src[k] - mean;
      sumsq += dst[k] * dst[k];
    }
    // Population variance (divide by d); the d cancels in the correlation
    // ratio but the degeneracy threshold is stated on the variance.
    if (sumsq / static_cast<double>(d) < kDegenerateVariance) {
      cache.degenerate[i] = true;
      for (std::size_t k = 0; k < d; ++k) dst[k] = 0.0;
      warn("pearson_similarity: constant embedding row " + std::to_string(i) +
           "; its similarities are set to 0");
      continue;
    }
    const double norm = std::sqrt(sumsq);
    cache.centered_norms[i] = norm;
    for (std::size_t k = 0; k < d; ++k) dst[k] /= norm;
  }
  // Correlation of rows i and j is the dot product of their unit-centered
  // forms; computing each pair once keeps W bitwise symmetric.
  cache.raw = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ui = cache.unit_centered.row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto uj = cache.unit_centered.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += ui[k] * uj[k];
      cache.raw(i, j) = dot;
      cache.raw(j, i) = dot;
    }
  }
}

inline Matrix apply_negative_mode(const Matrix& raw, NegativeMode mode, PearsonCache* cache) {
  const std::size_t n = raw.rows;
  Matrix w = raw;
  if (mode == NegativeMode::Clamp) {
    for (double& v : w.data) v = std::max(v, 0.0);
    return w;
  }
  double mn = 0.0;
  std::size_t mi = 0, mj = 1;
  bool first = true;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (first || raw(i, j) < mn) {
        mn = raw(i, j);
        mi = i;
        mj = j;
        first = false;
      }
    }
  }
  if (mn < 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) w(i, j) = raw(i, j) - mn;
      }
    }
    if (cache) {
      cache->shift_applied = true;
      cache->shift_amount = -mn;
      cache->shift_i = mi;
      cache->shift_j = mj;
    }
  }
  return w;
}

}  // namespace detail

/// Pairwise similarity of embedding rows via the correlation coefficient
/// (covariance over the feature dimensions divided by the standard
/// deviations), diagonal set to 0, negatives handled per `mode`.
/// Constant rows get zero similarity to everything plus a warning.
inline SimilarityMatrix pearson_similarity(const Matrix& embeddings, NegativeMode mode,
                                           PearsonCache* cache_out = nullptr) {
  PearsonCache local;
  PearsonCache& cache = cache_out ? *cache_out : local;
  cache = PearsonCache{};
  detail::compute_pearson_raw(embeddings, cache);
  Matrix w = detail::apply_negative_mode(cache.raw, mode, &cache);
  return SimilarityMatrix(std::move(w));
}

/// VJP of the Clamp/Shift stage: maps the adjoint of W back to the adjoint of
/// the raw correlation matrix. Clamped entries use sub-gradient 0 at 0.
inline Matrix negative_mode_backward(const PearsonCache& cache, NegativeMode mode,
                                     const Matrix& upstream) {
  require_same_shape(cache.raw, upstream, "negative_mode_backward");
  const std::size_t n = cache.raw.rows;
  Matrix g(n, n);
  if (mode == NegativeMode::Clamp) {
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      g.data[i] = cache.raw.data[i] > 0.0 ? upstream.data[i] : 0.0;
    }
  } else {
    double min_total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        g(i, j) = upstream(i, j);
        if (cache.shift_applied) min_total += upstream(i, j);
      }
    }
    if (cache.shift_applied) g(cache.shift_i, cache.shift_j) -= min_total;
  }
  for (std::size_t i = 0; i < n; ++i) g(i, i) = 0.0;
  return g;
}

/// VJP of the raw correlation layer: adjoint of raw W back to the embeddings,
/// chaining through unit normalization and mean centering. Degenerate rows
/// produced a constant output, so they receive zero gradient.
inline Matrix pearson_raw_backward(const PearsonCache& cache, const Matrix& upstream_raw) {
  const std::size_t n = cache.unit_centered.rows;
  const std::size_t d = cache.unit_centered.cols;
  require_same_shape(cache.raw, upstream_raw, "pearson_raw_backward");
  Matrix grad(n, d);
  std::vector<double> du(d);
  for (std::size_t i = 0; i < n; ++i) {
    if (cache.degenerate[i]) continue;
    std::fill(du.begin(), du.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || cache.degenerate[j]) continue;
      const double coeff = upstream_raw(i, j) + upstream_raw(j, i);
      if (coeff == 0.0) continue;
      const auto uj = cache.unit_centered.row(j);
      for (std::size_t k = 0; k < d; ++k) du[k] += coeff * uj[k];
    }
    // Through u = c/||c||:  dc = (du - (du . u) u) / ||c||
    const auto ui = cache.unit_centered.row(i);
    double proj = 0.0;
    for (std::size_t k = 0; k < d; ++k) proj += du[k] * ui[k];
    const double inv_norm = 1.0 / cache.centered_norms[i];
    auto dst = grad.row(i);
    for (std::size_t k = 0; k < d; ++k) dst[k] = (du[k] - proj * ui[k]) * inv_norm;
    // Through centering: subtract the row mean of the gradient.
    double mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) mean += dst[k];
    mean /= static_cast<double>(d);
    for (std::size_t k = 0; k < d; ++k) dst[k] -= mean;
  }
  return grad;
}

/// Full chain-rule application: given dL/dW (post Clamp/Shift), return
/// dL/dembeddings. `mode` must match the forward computation.
inline Matrix similarity_jacobian_apply(const Matrix& embeddings, const Matrix& upstream,
                                        NegativeMode mode) {
  if (upstream.rows != embeddings.rows || upstream.cols != embeddings.rows) {
    throw ContractError("similarity_jacobian_apply: upstream must be n x n, got " +
                        upstream.shape_str());
  }
  PearsonCache cache;
  detail::compute_pearson_raw(embeddings, cache);
  detail::apply_negative_mode(cache.raw, mode, &cache);
  return pearson_raw_backward(cache, negative_mode_backward(cache, mode, upstream));
}

}  // namespace grouploss
