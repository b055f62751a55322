#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grouploss/errors.hpp"

namespace grouploss {

// Tolerances shared across the library.
inline constexpr double kRowSumTol = 1e-9;         // row-stochasticity check
inline constexpr double kDegenerateRowSum = 1e-30; // normalizer treated as zero
inline constexpr double kCrossEntropyEps = 1e-12;  // -log clamp
inline constexpr double kDegenerateVariance = 1e-30;

/// Dense row-major matrix of 64-bit floats. The universal numeric carrier:
/// similarity matrices, assignment matrices, logits, embeddings, parameters.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows*cols, row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rs) {
    Matrix m(rs.size(), rs.size() ? rs.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& r : rs) {
      if (r.size() != m.cols) throw ContractError("from_rows: ragged initializer");
      std::copy(r.begin(), r.end(), m.row(i).begin());
      ++i;
    }
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

inline bool all_finite(const Matrix& m) {
  for (double v : m.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    d = std::max(d, std::abs(a.data[i] - b.data[i]));
  }
  return d;
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(op) + ": shape mismatch " + a.shape_str() +
                        " vs " + b.shape_str());
  }
}

/// C = A * B.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ContractError("matmul: inner dimensions disagree " + a.shape_str() +
                        " vs " + b.shape_str());
  }
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      double* crow = c.data.data() + i * c.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// C = A * B^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw ContractError("matmul_nt: inner dimensions disagree " + a.shape_str() +
                        " vs " + b.shape_str());
  }
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      const double* ar = a.data.data() + i * a.cols;
      const double* br = b.data.data() + j * b.cols;
      for (std::size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// C = A^T * B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw ContractError("matmul_tn: inner dimensions disagree " + a.shape_str() +
                        " vs " + b.shape_str());
  }
  Matrix c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ar = a.data.data() + k * a.cols;
    const double* br = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ar[i];
      if (aki == 0.0) continue;
      double* crow = c.data.data() + i * c.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * br[j];
    }
  }
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix c(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * b.data[i];
  return c;
}

/// Column vector (n x 1) of row sums, accumulated left to right.
inline Matrix row_sums(const Matrix& a) {
  Matrix s(a.rows, 1);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double acc = 0.0;
    for (double v : a.row(i)) acc += v;
    s(i, 0) = acc;
  }
  return s;
}

/// Row-stochastic matrix: every entry in [0,1], every row sums to 1 within
/// kRowSumTol. Validated on construction.
class AssignmentMatrix {
 public:
  explicit AssignmentMatrix(Matrix m) : inner_(std::move(m)) { validate(); }

  const Matrix& inner() const { return inner_; }
  std::size_t rows() const { return inner_.rows; }
  std::size_t cols() const { return inner_.cols; }
  double operator()(std::size_t i, std::size_t j) const { return inner_(i, j); }
  std::span<const double> row(std::size_t i) const { return inner_.row(i); }

  static AssignmentMatrix uniform(std::size_t n, std::size_t m) {
    return AssignmentMatrix(Matrix(n, m, 1.0 / static_cast<double>(m)));
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < inner_.rows; ++i) {
      double sum = 0.0;
      for (double v : inner_.row(i)) {
        if (!(v >= 0.0 && v <= 1.0)) {
          throw ContractError("AssignmentMatrix: entry outside [0,1] in row " +
                              std::to_string(i));
        }
        sum += v;
      }
      if (std::abs(sum - 1.0) > kRowSumTol) {
        throw ContractError("AssignmentMatrix: row " + std::to_string(i) +
                            " sums to " + std::to_string(sum));
      }
    }
  }

  Matrix inner_;
};

/// Row-wise softmax of logits / temperature, stabilized by per-row max
/// subtraction. Ties in the input stay ties in the output, so downstream
/// argmax (lowest index wins) is preserved for every finite temperature.
inline AssignmentMatrix softmax_with_temperature(const Matrix& logits,
                                                 double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax_with_temperature: temperature must be > 0, got " +
                         std::to_string(temperature));
  }
  if (!all_finite(logits)) {
    throw NumericError("softmax_with_temperature: non-finite logits");
  }
  if (logits.cols == 0) throw ContractError("softmax_with_temperature: zero columns");
  Matrix out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto in = logits.row(i);
    auto dst = out.row(i);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    mx /= temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] / temperature - mx);
      sum += dst[j];
    }
    for (std::size_t j = 0; j < in.size(); ++j) dst[j] /= sum;
  }
  return AssignmentMatrix(std::move(out));
}

/// Mean over selected rows of -log(max(x_{i,y_i}, eps)).
/// `selected[i]` is true for rows that contribute (non-anchors).
inline double cross_entropy(const AssignmentMatrix& x, const std::vector<int>& y,
                            const std::vector<bool>& selected) {
  const std::size_t n = x.rows();
  if (y.size() != n || selected.size() != n) {
    throw ContractError("cross_entropy: labels/mask length mismatch");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!selected[i]) continue;
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= x.cols()) {
      throw ContractError("cross_entropy: label out of range at row " +
                          std::to_string(i));
    }
    const double p = std::min(std::max(x(i, static_cast<std::size_t>(y[i])),
                                       kCrossEntropyEps), 1.0);
    total += -std::log(p);
    ++count;
  }
  if (count == 0) throw BatchError("cross_entropy: no rows selected");
  return total / static_cast<double>(count);
}

/// Divide each row of a non-negative matrix by its sum. A row whose sum is
/// below kDegenerateRowSum is replaced by the corresponding fallback row.
inline AssignmentMatrix row_normalize(const Matrix& m, const AssignmentMatrix& fallback) {
  if (m.rows != fallback.rows() || m.cols != fallback.cols()) {
    throw ContractError("row_normalize: fallback shape mismatch");
  }
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double sum = 0.0;
    for (double v : m.row(i)) {
      if (v < 0.0) {
        throw ContractError("row_normalize: negative entry in row " + std::to_string(i));
      }
      sum += v;
    }
    auto dst = out.row(i);
    const auto src = m.row(i);
    if (sum < kDegenerateRowSum) {
      const auto fb = fallback.row(i);
      std::copy(fb.begin(), fb.end(), dst.begin());
    } else {
      for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[j] / sum;
    }
  }
  return AssignmentMatrix(std::move(out));
}

}  // namespace grouploss
