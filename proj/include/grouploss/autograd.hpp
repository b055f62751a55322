#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "grouploss/dynamics.hpp"
#include "grouploss/errors.hpp"
#include "grouploss/matrix.hpp"
#include "grouploss/similarity.hpp"

namespace grouploss {

using ValueId = std::size_t;

/// Knobs of one loss evaluation: how many refinement steps, how sharp the
/// initial softmax, and how negative correlations are handled.
struct GroupLossConfig {
  std::size_t iteration_count = 3;
  double temperature = 1.0;
  NegativeMode negative_mode = NegativeMode::Clamp;
};

/// Recorded forward computation over a closed vocabulary of primitives
/// (matmul, hadamard, row-sum, row-divide, softmax, pearson, relu, shift,
/// one-hot overlay, bias add, cross-entropy). Values are immutable once
/// recorded; backward() walks the node list in reverse and accumulates
/// adjoints per value slot.
///
/// The tape also folds every branch decision (clamp masks, degenerate rows,
/// epsilon clamps, shift argmin) into a signature hash. Finite-difference
/// checks compare signatures of the two perturbed evaluations to detect
/// coordinates that straddle a kink.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Register an input or parameter value.
  ValueId leaf(Matrix v) { return push_value(std::move(v)); }

  const Matrix& value(ValueId id) const { return values_.at(id); }
  std::size_t value_count() const { return values_.size(); }
  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t branch_signature() const { return branch_hash_; }

  // ---- primitives -------------------------------------------------------

  ValueId matmul(ValueId a, ValueId b) {
    Matrix out = grouploss::matmul(value(a), value(b));
    return add_node<MatmulNode>("matmul", {a, b}, std::move(out));
  }

  ValueId hadamard(ValueId a, ValueId b) {
    Matrix out = grouploss::hadamard(value(a), value(b));
    return add_node<HadamardNode>("hadamard", {a, b}, std::move(out));
  }

  ValueId row_sum(ValueId a) {
    Matrix out = grouploss::row_sums(value(a));
    return add_node<RowSumNode>("row_sum", {a}, std::move(out));
  }

  /// out[i] = numer[i] / denom[i] rowwise, except rows listed in
  /// `forced_passthrough` (anchors) or whose denominator is below
  /// kDegenerateRowSum: those copy `passthrough_src` row i and behave as an
  /// identity node in the backward pass.
  ValueId row_div(ValueId numer, ValueId denom, ValueId passthrough_src,
                  const std::vector<std::size_t>& forced_passthrough) {
    const Matrix& p = value(numer);
    const Matrix& q = value(denom);
    const Matrix& src = value(passthrough_src);
    if (q.rows != p.rows || q.cols != 1) {
      throw ContractError("row_div: denominator must be " + std::to_string(p.rows) + "x1");
    }
    require_same_shape(p, src, "row_div passthrough");
    std::vector<bool> passthrough(p.rows, false);
    for (std::size_t i : forced_passthrough) passthrough.at(i) = true;
    for (std::size_t i = 0; i < p.rows; ++i) {
      if (q(i, 0) < kDegenerateRowSum) passthrough[i] = true;
    }
    mix_bools(passthrough);
    Matrix out(p.rows, p.cols);
    for (std::size_t i = 0; i < p.rows; ++i) {
      auto dst = out.row(i);
      if (passthrough[i]) {
        const auto s = src.row(i);
        std::copy(s.begin(), s.end(), dst.begin());
      } else {
        const auto pr = p.row(i);
        const double sum = q(i, 0);
        for (std::size_t j = 0; j < p.cols; ++j) dst[j] = pr[j] / sum;
      }
    }
    auto node = std::make_unique<RowDivNode>();
    node->passthrough = std::move(passthrough);
    return finish_node(std::move(node), "row_div", {numer, denom, passthrough_src},
                       std::move(out));
  }

  ValueId softmax(ValueId logits, double temperature) {
    Matrix out = softmax_with_temperature(value(logits), temperature).inner();
    auto node = std::make_unique<SoftmaxNode>();
    node->temperature = temperature;
    return finish_node(std::move(node), "softmax", {logits}, std::move(out));
  }

  /// Raw correlation matrix (before Clamp/Shift), zero diagonal.
  ValueId pearson(ValueId embeddings) {
    auto node = std::make_unique<PearsonNode>();
    detail::compute_pearson_raw(value(embeddings), node->cache);
    mix_bools(node->cache.degenerate);
    Matrix out = node->cache.raw;
    return finish_node(std::move(node), "pearson", {embeddings}, std::move(out));
  }

  ValueId relu(ValueId a) {
    const Matrix& in = value(a);
    Matrix out(in.rows, in.cols);
    std::vector<bool> active(in.data.size());
    for (std::size_t i = 0; i < in.data.size(); ++i) {
      active[i] = in.data[i] > 0.0;
      out.data[i] = active[i] ? in.data[i] : 0.0;
    }
    mix_bools(active);
    auto node = std::make_unique<ReluNode>();
    node->active = std::move(active);
    return finish_node(std::move(node), "relu", {a}, std::move(out));
  }

  /// Shift the off-diagonal entries so the minimum becomes 0 (identity when
  /// the minimum is already non-negative). Diagonal stays untouched.
  ValueId shift_nonnegative(ValueId a) {
    const Matrix& in = value(a);
    if (in.rows != in.cols) throw ContractError("shift_nonnegative: matrix must be square");
    auto node = std::make_unique<ShiftNode>();
    PearsonCache tmp;
    tmp.raw = in;
    Matrix out = detail::apply_negative_mode(in, NegativeMode::Shift, &tmp);
    node->applied = tmp.shift_applied;
    node->argmin_i = tmp.shift_i;
    node->argmin_j = tmp.shift_j;
    mix(node->applied ? (0x5u ^ (tmp.shift_i << 16) ^ tmp.shift_j) : 0x9u);
    return finish_node(std::move(node), "shift", {a}, std::move(out));
  }

  /// Replace anchor rows by exact one-hot vectors at their label. Gradients
  /// do not flow into replaced rows.
  ValueId overlay_one_hot(ValueId a, const AnchorSpec& anchors) {
    const Matrix& in = value(a);
    anchors.validate(in.rows, in.cols);
    Matrix out = in;
    for (std::size_t i : anchors.indices) {
      auto row = out.row(i);
      std::fill(row.begin(), row.end(), 0.0);
      row[static_cast<std::size_t>(anchors.labels[i])] = 1.0;
    }
    auto node = std::make_unique<OverlayNode>();
    node->anchor_rows = anchors.indices;
    return finish_node(std::move(node), "one_hot_overlay", {a}, std::move(out));
  }

  /// Broadcast-add a 1 x c row vector to every row.
  ValueId add_row_vector(ValueId a, ValueId bias) {
    const Matrix& in = value(a);
    const Matrix& b = value(bias);
    if (b.rows != 1 || b.cols != in.cols) {
      throw ContractError("add_row_vector: bias must be 1x" + std::to_string(in.cols));
    }
    Matrix out(in.rows, in.cols);
    for (std::size_t i = 0; i < in.rows; ++i) {
      for (std::size_t j = 0; j < in.cols; ++j) out(i, j) = in(i, j) + b(0, j);
    }
    return add_node<BiasAddNode>("bias_add", {a, bias}, std::move(out));
  }

  /// Mean of -log(max(x_{i,y_i}, eps)) over selected rows; produces a 1x1
  /// value. Throws BatchError when no row is selected.
  ValueId cross_entropy_loss(ValueId x, std::vector<int> labels, std::vector<bool> selected) {
    const Matrix& in = value(x);
    const double loss = cross_entropy(AssignmentMatrix(in), labels, selected);
    auto node = std::make_unique<CrossEntropyNode>();
    node->labels = std::move(labels);
    node->selected = std::move(selected);
    std::vector<bool> clamped(in.rows, false);
    std::size_t count = 0;
    for (std::size_t i = 0; i < in.rows; ++i) {
      if (!node->selected[i]) continue;
      ++count;
      clamped[i] = in(i, static_cast<std::size_t>(node->labels[i])) < kCrossEntropyEps;
    }
    node->selected_count = count;
    mix_bools(clamped);
    Matrix out(1, 1);
    out(0, 0) = loss;
    return finish_node(std::move(node), "cross_entropy", {x}, std::move(out));
  }

  // ---- reverse pass ------------------------------------------------------

  /// Seed d(loss)/d(loss) = 1 and walk the node list in exact reverse order.
  /// Each node accumulates into its inputs' adjoints exactly once. Throws
  /// NumericError naming the node if a non-finite adjoint appears.
  void backward(ValueId loss) {
    const Matrix& l = value(loss);
    if (l.rows != 1 || l.cols != 1) {
      throw ContractError("backward: loss must be a 1x1 value");
    }
    if (!std::isfinite(l(0, 0))) throw NumericError("backward: loss is not finite");
    adjoints_.clear();
    adjoints_.reserve(values_.size());
    for (const Matrix& v : values_) adjoints_.emplace_back(v.rows, v.cols);
    adjoints_[loss](0, 0) = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const Node& node = **it;
      node.backward(*this);
      for (ValueId in : node.inputs) {
        if (!all_finite(adjoints_[in])) {
          throw NumericError("backward: non-finite adjoint out of node '" + node.name + "'");
        }
      }
    }
  }

  const Matrix& adjoint(ValueId id) const {
    if (adjoints_.size() != values_.size()) {
      throw ContractError("adjoint: backward() has not run");
    }
    return adjoints_.at(id);
  }

 private:
  struct Node {
    std::string name;
    std::vector<ValueId> inputs;
    ValueId output = 0;
    virtual ~Node() = default;
    virtual void backward(Tape& t) const = 0;
  };

  struct MatmulNode : Node {
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      accumulate(t.adjoints_[inputs[0]], matmul_nt(g, t.values_[inputs[1]]));
      accumulate(t.adjoints_[inputs[1]], matmul_tn(t.values_[inputs[0]], g));
    }
  };

  struct HadamardNode : Node {
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      accumulate(t.adjoints_[inputs[0]], grouploss::hadamard(g, t.values_[inputs[1]]));
      accumulate(t.adjoints_[inputs[1]], grouploss::hadamard(g, t.values_[inputs[0]]));
    }
  };

  struct RowSumNode : Node {
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      Matrix& da = t.adjoints_[inputs[0]];
      for (std::size_t i = 0; i < da.rows; ++i) {
        const double gi = g(i, 0);
        for (std::size_t j = 0; j < da.cols; ++j) da(i, j) += gi;
      }
    }
  };

  struct RowDivNode : Node {
    std::vector<bool> passthrough;
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      const Matrix& p = t.values_[inputs[0]];
      const Matrix& q = t.values_[inputs[1]];
      Matrix& dp = t.adjoints_[inputs[0]];
      Matrix& dq = t.adjoints_[inputs[1]];
      Matrix& dsrc = t.adjoints_[inputs[2]];
      for (std::size_t i = 0; i < p.rows; ++i) {
        if (passthrough[i]) {
          for (std::size_t j = 0; j < p.cols; ++j) dsrc(i, j) += g(i, j);
          continue;
        }
        const double inv = 1.0 / q(i, 0);
        double qgrad = 0.0;
        for (std::size_t j = 0; j < p.cols; ++j) {
          dp(i, j) += g(i, j) * inv;
          qgrad += g(i, j) * p(i, j);
        }
        dq(i, 0) -= qgrad * inv * inv;
      }
    }
  };

  struct SoftmaxNode : Node {
    double temperature = 1.0;
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      const Matrix& s = t.values_[output];
      Matrix& dl = t.adjoints_[inputs[0]];
      for (std::size_t i = 0; i < s.rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < s.cols; ++j) dot += g(i, j) * s(i, j);
        for (std::size_t j = 0; j < s.cols; ++j) {
          dl(i, j) += s(i, j) * (g(i, j) - dot) / temperature;
        }
      }
    }
  };

  struct PearsonNode : Node {
    PearsonCache cache;
    void backward(Tape& t) const override {
      accumulate(t.adjoints_[inputs[0]], pearson_raw_backward(cache, t.adjoints_[output]));
    }
  };

  struct ReluNode : Node {
    std::vector<bool> active;  // sub-gradient 0 at exactly 0
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      Matrix& da = t.adjoints_[inputs[0]];
      for (std::size_t i = 0; i < da.data.size(); ++i) {
        if (active[i]) da.data[i] += g.data[i];
      }
    }
  };

  struct ShiftNode : Node {
    bool applied = false;
    std::size_t argmin_i = 0, argmin_j = 0;
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      Matrix& da = t.adjoints_[inputs[0]];
      double total = 0.0;
      for (std::size_t i = 0; i < g.rows; ++i) {
        for (std::size_t j = 0; j < g.cols; ++j) {
          if (i == j) continue;
          da(i, j) += g(i, j);
          if (applied) total += g(i, j);
        }
      }
      if (applied) da(argmin_i, argmin_j) -= total;
    }
  };

  struct OverlayNode : Node {
    std::vector<std::size_t> anchor_rows;
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      Matrix& da = t.adjoints_[inputs[0]];
      std::vector<bool> blocked(g.rows, false);
      for (std::size_t i : anchor_rows) blocked[i] = true;
      for (std::size_t i = 0; i < g.rows; ++i) {
        if (blocked[i]) continue;
        for (std::size_t j = 0; j < g.cols; ++j) da(i, j) += g(i, j);
      }
    }
  };

  struct BiasAddNode : Node {
    void backward(Tape& t) const override {
      const Matrix& g = t.adjoints_[output];
      Matrix& da = t.adjoints_[inputs[0]];
      Matrix& db = t.adjoints_[inputs[1]];
      for (std::size_t i = 0; i < g.rows; ++i) {
        for (std::size_t j = 0; j < g.cols; ++j) {
          da(i, j) += g(i, j);
          db(0, j) += g(i, j);
        }
      }
    }
  };

  struct CrossEntropyNode : Node {
    std::vector<int> labels;
    std::vector<bool> selected;
    std::size_t selected_count = 0;
    void backward(Tape& t) const override {
      const double g = t.adjoints_[output](0, 0);
      const Matrix& x = t.values_[inputs[0]];
      Matrix& dx = t.adjoints_[inputs[0]];
      const double scale = g / static_cast<double>(selected_count);
      for (std::size_t i = 0; i < x.rows; ++i) {
        if (!selected[i]) continue;
        const auto col = static_cast<std::size_t>(labels[i]);
        const double p = x(i, col);
        if (p < kCrossEntropyEps) continue;  // clamped: constant branch
        dx(i, col) -= scale / p;
      }
    }
  };

  static void accumulate(Matrix& into, const Matrix& g) {
    for (std::size_t i = 0; i < into.data.size(); ++i) into.data[i] += g.data[i];
  }

  ValueId push_value(Matrix v) {
    values_.push_back(std::move(v));
    return values_.size() - 1;
  }

  template <typename N>
  ValueId add_node(const char* name, std::vector<ValueId> inputs, Matrix out) {
    return finish_node(std::make_unique<N>(), name, std::move(inputs), std::move(out));
  }

  ValueId finish_node(std::unique_ptr<Node> node, const char* name,
                      std::vector<ValueId> inputs, Matrix out) {
    for (ValueId in : inputs) {
      if (in >= values_.size()) throw ContractError("tape: input id out of range");
    }
    const ValueId out_id = push_value(std::move(out));
    node->name = name;
    node->inputs = std::move(inputs);
    node->output = out_id;
    nodes_.push_back(std::move(node));
    return out_id;
  }

  void mix(std::uint64_t v) {
    branch_hash_ ^= v + 0x9e3779b97f4a7c15ULL + (branch_hash_ << 6) + (branch_hash_ >> 2);
  }

  void mix_bools(const std::vector<bool>& bits) {
    std::uint64_t word = 0;
    int filled = 0;
    for (bool b : bits) {
      word = (word << 1) | static_cast<std::uint64_t>(b);
      if (++filled == 64) {
        mix(word);
        word = 0;
        filled = 0;
      }
    }
    mix(word ^ static_cast<std::uint64_t>(filled));
  }

  std::vector<Matrix> values_;
  std::vector<Matrix> adjoints_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

/// Ids of the interesting values recorded by record_group_loss.
struct GroupLossRecord {
  ValueId raw_similarity = 0;
  ValueId similarity = 0;
  ValueId assignments_initial = 0;
  ValueId assignments_final = 0;
  ValueId loss = 0;
};

/// Record the whole pipeline embeddings -> W -> X(0) -> T replicator steps
/// -> cross-entropy onto `tape`, starting from existing value ids.
inline GroupLossRecord record_group_loss(Tape& tape, ValueId embeddings, ValueId logits,
                                         const AnchorSpec& anchors,
                                         const GroupLossConfig& config) {
  const Matrix& e = tape.value(embeddings);
  const Matrix& z = tape.value(logits);
  if (e.rows != z.rows) {
    throw ContractError("record_group_loss: embeddings and logits disagree on batch size");
  }
  anchors.validate(z.rows, z.cols);

  GroupLossRecord rec;
  rec.raw_similarity = tape.pearson(embeddings);
  rec.similarity = config.negative_mode == NegativeMode::Clamp
                       ? tape.relu(rec.raw_similarity)
                       : tape.shift_nonnegative(rec.raw_similarity);
  ValueId x = tape.softmax(logits, config.temperature);
  if (!anchors.indices.empty()) x = tape.overlay_one_hot(x, anchors);
  rec.assignments_initial = x;
  for (std::size_t t = 0; t < config.iteration_count; ++t) {
    const ValueId pi = tape.matmul(rec.similarity, x);
    const ValueId prod = tape.hadamard(x, pi);
    const ValueId q = tape.row_sum(prod);
    x = tape.row_div(prod, q, x, anchors.indices);
  }
  rec.assignments_final = x;
  rec.loss = tape.cross_entropy_loss(x, anchors.labels, anchors.loss_mask());
  return rec;
}

/// One recorded loss evaluation, ready for backward().
struct LossComputation {
  Tape tape;
  double loss = 0.0;
  ValueId embeddings_id = 0;
  ValueId logits_id = 0;
  GroupLossRecord record;
};

/// Gradients of the loss with respect to the two encoder outputs.
struct GradientBundle {
  Matrix d_embeddings;
  Matrix d_logits;
};

inline LossComputation forward_loss(const Matrix& embeddings, const Matrix& logits,
                                    const AnchorSpec& anchors, const GroupLossConfig& config) {
  LossComputation lc;
  lc.embeddings_id = lc.tape.leaf(embeddings);
  lc.logits_id = lc.tape.leaf(logits);
  lc.record = record_group_loss(lc.tape, lc.embeddings_id, lc.logits_id, anchors, config);
  lc.loss = lc.tape.value(lc.record.loss)(0, 0);
  return lc;
}

inline GradientBundle backward(LossComputation& lc) {
  lc.tape.backward(lc.record.loss);
  return GradientBundle{lc.tape.adjoint(lc.embeddings_id), lc.tape.adjoint(lc.logits_id)};
}

}  // namespace grouploss
