#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trinity/tape.hpp"

namespace trinity {

enum class AttentionKind : uint8_t { local, global };

/// One attention layer. Local layers apply rotary embeddings and a sliding
/// window; global layers use no positional embedding and a plain causal mask.
/// head_dim is explicit rather than derived so table-faithful presets with
/// h_q * head_dim != d_model construct correctly.
struct AttentionLayerConfig {
  int64_t d_model = 0;
  int64_t h_q = 0;
  int64_t h_kv = 0;
  int64_t head_dim = 0;
  AttentionKind kind = AttentionKind::local;
  int64_t window = 0;          // local only
  double rope_theta = 10000.0; // local only
  double rms_eps = 1e-6;

  int64_t q_dim() const { return h_q * head_dim; }
  int64_t kv_dim() const { return h_kv * head_dim; }
  void validate() const;
};

/// Projections plus per-projection QK-norm gains (one gain vector of length
/// head_dim, shared across heads).
struct AttentionVars {
  Var wq;      // [d_model x h_q*head_dim]
  Var wk;      // [d_model x h_kv*head_dim]
  Var wv;      // [d_model x h_kv*head_dim]
  Var wg;      // [d_model x h_q*head_dim]
  Var wo;      // [h_q*head_dim x d_model]
  Var q_gain;  // [head_dim]
  Var k_gain;  // [head_dim]
};

/// Valid-position mask description for one sequence.
struct AttentionMaskSpec {
  int64_t len = 0;
  AttentionKind kind = AttentionKind::global;
  int64_t window = 0;
  bool intra_doc = false;
  std::span<const int32_t> doc_ids;  // required when intra_doc
};

/// Per-head projections after QK RMS-norm: q has h_q entries, k and v have
/// h_kv entries, each [T x head_dim]. Values are not normalized; rotary
/// embedding is applied later (it depends on the layer kind).
struct ProjectedHeads {
  std::vector<Var> q;
  std::vector<Var> k;
  std::vector<Var> v;
};
ProjectedHeads project_and_norm(Tape& tape, Var x, const AttentionLayerConfig& cfg,
                                const AttentionVars& w);

/// 1-indexed query-head to key/value-head map: j(i) = ceil(i * h_kv / h_q).
int64_t kv_head_index(int64_t i, int64_t h_q, int64_t h_kv);

/// 0-indexed variant used internally.
int64_t kv_head_for_query(int64_t i, int64_t h_q, int64_t h_kv);

/// [T x T] 0/1 tensor; entry (t, s) is 1 when position t may attend to s.
/// Rows always allow the diagonal.
Tensor build_mask(const AttentionMaskSpec& spec);

/// Full gated GQA attention for one sequence:
/// QKV projection, per-head QK RMS-norm, rotary embedding on local layers,
/// masked scaled dot-product attention with shared KV heads, sigmoid gate,
/// output projection. positions feeds the rotary embedding (ignored on
/// global layers).
Var attention_forward(Tape& tape, Var x, const AttentionLayerConfig& cfg, const AttentionVars& w,
                      const Tensor& mask, const Tensor& positions);

}  // namespace trinity
