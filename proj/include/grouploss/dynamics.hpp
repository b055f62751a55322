#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "grouploss/errors.hpp"
#include "grouploss/matrix.hpp"
#include "grouploss/similarity.hpp"

namespace grouploss {

namespace detail {
// Counts entries into the dynamics; evaluation tests assert it stays put
// during inference.
inline std::atomic<std::uint64_t>& dynamics_invocations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}
}  // namespace detail

/// Which batch rows are pinned to their true one-hot label for the whole
/// refinement. `labels` is the full batch label vector; anchor rows are the
/// subset listed in `indices`.
struct AnchorSpec {
  std::vector<std::size_t> indices;  // sorted, unique
  std::vector<int> labels;           // one label per batch row

  static AnchorSpec none(std::vector<int> batch_labels) {
    return AnchorSpec{{}, std::move(batch_labels)};
  }

  std::size_t batch_size() const { return labels.size(); }

  bool is_anchor(std::size_t row) const {
    return std::binary_search(indices.begin(), indices.end(), row);
  }

  /// true for rows that contribute to the loss (non-anchors).
  std::vector<bool> loss_mask() const {
    std::vector<bool> mask(labels.size(), true);
    for (std::size_t i : indices) mask[i] = false;
    return mask;
  }

  void validate(std::size_t n, std::size_t m) const {
    if (labels.size() != n) {
      throw ContractError("AnchorSpec: label vector length " +
                          std::to_string(labels.size()) + " != batch size " +
                          std::to_string(n));
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= m) {
        throw ContractError("AnchorSpec: label " + std::to_string(y) +
                            " outside [0," + std::to_string(m) + ")");
      }
    }
    std::size_t prev = 0;
    bool first = true;
    for (std::size_t idx : indices) {
      if (idx >= n) {
        throw ContractError("AnchorSpec: anchor row " + std::to_string(idx) +
                            " outside batch of size " + std::to_string(n));
      }
      if (!first && idx <= prev) {
        throw ContractError("AnchorSpec: anchor indices must be sorted and unique");
      }
      prev = idx;
      first = false;
    }
  }
};

/// Everything the refinement produced, step by step: X(0..T) and the support
/// matrices. Kept for the backward pass and for the property suites.
struct RefinementTrace {
  std::vector<AssignmentMatrix> assignments;  // length iteration_count + 1
  std::vector<Matrix> supports;               // length iteration_count

  const AssignmentMatrix& final_assignments() const { return assignments.back(); }
  std::size_t iteration_count() const { return supports.size(); }
};

/// X(0): temperature softmax of the logits, with anchor rows overridden by
/// exact one-hot vectors at their true label.
inline AssignmentMatrix init_assignments(const Matrix& logits, const AnchorSpec& anchors,
                                         double temperature) {
  detail::dynamics_invocations()++;
  anchors.validate(logits.rows, logits.cols);
  AssignmentMatrix soft = softmax_with_temperature(logits, temperature);
  if (anchors.indices.empty()) return soft;
  Matrix x = soft.inner();
  for (std::size_t i : anchors.indices) {
    auto row = x.row(i);
    std::fill(row.begin(), row.end(), 0.0);
    row[static_cast<std::size_t>(anchors.labels[i])] = 1.0;
  }
  return AssignmentMatrix(std::move(x));
}

/// Support matrix: similarity-weighted aggregation of the current
/// assignments. Entry (i, lambda) is how strongly the batch endorses label
/// lambda for row i.
inline Matrix support(const SimilarityMatrix& w, const AssignmentMatrix& x) {
  detail::dynamics_invocations()++;
  if (w.size() != x.rows()) {
    throw ContractError("support: W is " + w.inner().shape_str() + " but X has " +
                        std::to_string(x.rows()) + " rows");
  }
  return matmul(w.inner(), x.inner());
}

namespace detail {
inline AssignmentMatrix replicator_apply(const AssignmentMatrix& x, const Matrix& pi,
                                         const AnchorSpec& anchors) {
  AssignmentMatrix next = row_normalize(hadamard(x.inner(), pi), x);
  if (anchors.indices.empty()) return next;
  Matrix out = next.inner();
  for (std::size_t i : anchors.indices) {
    const auto src = x.row(i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return AssignmentMatrix(std::move(out));
}
}  // namespace detail

/// One multiplicative update: each row reallocates mass toward labels whose
/// support exceeds the row average. Anchor rows are copied through verbatim,
/// as are rows whose normalizer vanishes (all-zero similarity after
/// clamping); a one-hot row with positive support at its label is an exact
/// fixed point.
inline AssignmentMatrix replicator_step(const AssignmentMatrix& x, const SimilarityMatrix& w,
                                        const AnchorSpec& anchors) {
  detail::dynamics_invocations()++;
  anchors.validate(x.rows(), x.cols());
  return detail::replicator_apply(x, matmul(w.inner(), x.inner()), anchors);
}

/// Run `iteration_count` replicator steps, recording every intermediate.
inline RefinementTrace refine(AssignmentMatrix x0, const SimilarityMatrix& w,
                              const AnchorSpec& anchors, std::size_t iteration_count) {
  detail::dynamics_invocations()++;
  anchors.validate(x0.rows(), x0.cols());
  RefinementTrace trace;
  trace.assignments.reserve(iteration_count + 1);
  trace.supports.reserve(iteration_count);
  trace.assignments.push_back(std::move(x0));
  for (std::size_t t = 0; t < iteration_count; ++t) {
    const AssignmentMatrix& x = trace.assignments.back();
    Matrix pi = matmul(w.inner(), x.inner());
    AssignmentMatrix next = detail::replicator_apply(x, pi, anchors);
    trace.supports.push_back(std::move(pi));
    trace.assignments.push_back(std::move(next));
  }
  return trace;
}

/// Consistency functional F(X) = sum_{i,j,lambda} w_ij x_{i lambda} x_{j lambda}.
/// The replicator update never decreases it (for non-negative W without
/// anchors), which is what drives same-label mass together.
inline double consistency(const AssignmentMatrix& x, const SimilarityMatrix& w) {
  detail::dynamics_invocations()++;
  if (w.size() != x.rows()) {
    throw ContractError("consistency: shape mismatch");
  }
  const Matrix pi = matmul(w.inner(), x.inner());
  double f = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t l = 0; l < x.cols(); ++l) f += x(i, l) * pi(i, l);
  }
  return f;
}

}  // namespace grouploss
