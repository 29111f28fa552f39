#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trinity/tensor.hpp"

namespace trinity {

/// Handle to a value recorded on a Tape.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode gradient tape over tensor primitives.
///
/// Forward evaluation is eager: every builder records one node and computes
/// its output immediately, so intermediate values can be inspected while the
/// graph is being built (the MoE router reads its scores to pick experts
/// before the rest of the layer is recorded). Node creation order is a
/// topological order, which the reverse pass relies on.
///
/// A tape is single-owner and not thread safe.
class Tape {
 public:
  // Leaves.
  Var input(Tensor value);     // participates in gradients
  Var constant(Tensor value);  // gradient-free

  // Linear algebra (rank-2).
  Var matmul(Var a, Var b);
  Var transpose(Var x);

  // Elementwise.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double c);
  Var sigmoid(Var x);
  Var silu(Var x);

  /// x / sqrt(mean(x^2, last axis) + eps) * gain, gain length == last extent.
  Var rms_norm(Var x, Var gain, double eps);

  /// Numerically stabilized softmax over the last axis.
  Var softmax_last(Var x);
  /// Same, but entries where mask == 0 get weight exactly 0. Every row of
  /// the mask must allow at least one entry.
  Var masked_softmax_last(Var x, Tensor mask);

  /// Pairwise rotary embedding on [T x d_h] head vectors, d_h even.
  /// Pair k rotates by positions[t] * theta^(-2k/d_h).
  Var rope(Var x, Tensor positions, double theta);

  // Structural ops.
  Var slice_cols(Var x, int64_t offset, int64_t len);
  Var slice_rows(Var x, int64_t offset, int64_t len);
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  Var gather_rows(Var x, std::vector<int64_t> idx);
  /// base with rows[j,:] added at row idx[j]; duplicate indices accumulate.
  Var scatter_add_rows(Var base, Var rows, std::vector<int64_t> idx);
  /// 1-D gather by flat index.
  Var take(Var x, std::vector<int64_t> idx);
  /// Row r scaled by w[r].
  Var scale_rows(Var x, Var w);
  /// Per row: out_i = mask_i * s_i / sum_j(mask_j * s_j). Rows of the mask
  /// must select at least one strictly positive s entry.
  Var masked_row_norm(Var s, Tensor mask);

  // Reductions.
  Var sum(Var x);
  Var mean(Var x);
  Var logsumexp_last(Var x);

  /// Forward value of a recorded var. Returned by value (storage is shared,
  /// copies are cheap); node storage may reallocate as the tape grows.
  Tensor value(Var v) const;
  size_t size() const { return nodes_.size(); }

  /// Reverse-mode gradients of a scalar output w.r.t. the given recorded
  /// vars. Vars that do not influence the output get exact zeros.
  std::vector<Tensor> gradients(Var output, std::span<const Var> wrt) const;

  /// Recomputes every node from its recorded inputs and checks the stored
  /// forward values are reproduced bit-identically.
  bool replay_matches() const;

 private:
  enum class Op : uint8_t {
    kInput, kConstant, kMatmul, kTranspose, kAdd, kSub, kMul, kScale,
    kSigmoid, kSilu, kRmsNorm, kSoftmaxLast, kRope, kSliceCols, kSliceRows,
    kConcatCols, kConcatRows, kGatherRows, kScatterAddRows, kTake,
    kScaleRows, kMaskedRowNorm, kSum, kMean, kLogsumexpLast,
  };

  struct Node {
    Op op;
    std::vector<int32_t> in;
    Tensor out;
    Tensor aux;                 // mask / positions
    std::vector<int64_t> idx;   // gather / scatter / take indices
    double c0 = 0.0;            // scale factor, eps, theta
    int64_t i0 = 0, i1 = 0;     // slice offset / length
    bool requires_grad = false;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  Tensor compute(const Node& n) const;
  void backward_node(int32_t id, const std::vector<double>& gout,
                     std::vector<std::vector<double>>& grads) const;
  std::vector<double>& grad_buf(std::vector<std::vector<double>>& grads, int32_t id) const;

  std::vector<Node> nodes_;
};

}  // namespace trinity
