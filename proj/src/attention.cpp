#include "trinity/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace trinity {

void AttentionLayerConfig::validate() const {
  if (d_model <= 0 || h_q <= 0 || h_kv <= 0 || head_dim <= 0) {
    throw std::invalid_argument("AttentionLayerConfig: dimensions must be positive");
  }
  if (h_q % h_kv != 0) {
    throw std::invalid_argument("AttentionLayerConfig: h_q " + std::to_string(h_q) +
                                " not divisible by h_kv " + std::to_string(h_kv));
  }
  if (kind == AttentionKind::local) {
    if (head_dim % 2 != 0) {
      throw std::invalid_argument("AttentionLayerConfig: local layer needs even head_dim for rotary embedding");
    }
    if (window < 1) throw std::invalid_argument("AttentionLayerConfig: local layer needs window >= 1");
  }
}

int64_t kv_head_index(int64_t i, int64_t h_q, int64_t h_kv) {
  if (i < 1 || i > h_q) {
    throw std::invalid_argument("kv_head_index: query head " + std::to_string(i) + " outside [1, " +
                                std::to_string(h_q) + "]");
  }
  return (i * h_kv + h_q - 1) / h_q;  // ceil(i * h_kv / h_q)
}

int64_t kv_head_for_query(int64_t i, int64_t h_q, int64_t h_kv) {
  return kv_head_index(i + 1, h_q, h_kv) - 1;
}

Tensor build_mask(const AttentionMaskSpec& spec) {
  if (spec.len < 1) throw std::invalid_argument("build_mask: sequence length must be >= 1");
  if (spec.intra_doc && static_cast<int64_t>(spec.doc_ids.size()) != spec.len) {
    throw std::invalid_argument("build_mask: doc_ids length does not match sequence length");
  }
  const int64_t t_len = spec.len;
  std::vector<double> mask(static_cast<size_t>(t_len * t_len), 0.0);
  for (int64_t t = 0; t < t_len; ++t) {
    const int64_t lo = spec.kind == AttentionKind::local ? std::max<int64_t>(0, t - spec.window + 1) : 0;
    for (int64_t s = lo; s <= t; ++s) {
      if (spec.intra_doc && spec.doc_ids[static_cast<size_t>(s)] != spec.doc_ids[static_cast<size_t>(t)]) {
        continue;
      }
      mask[static_cast<size_t>(t * t_len + s)] = 1.0;
    }
    mask[static_cast<size_t>(t * t_len + t)] = 1.0;  // the diagonal is always valid
  }
  return Tensor::from_data({t_len, t_len}, std::move(mask));
}

ProjectedHeads project_and_norm(Tape& tape, Var x, const AttentionLayerConfig& cfg,
                                const AttentionVars& w) {
  cfg.validate();
  const Tensor xv = tape.value(x);
  if (xv.rank() != 2 || xv.dim(1) != cfg.d_model) {
    throw std::invalid_argument("project_and_norm: input " + xv.shape_str() + " does not match d_model " +
                                std::to_string(cfg.d_model));
  }
  const int64_t dh = cfg.head_dim;
  Var q_full = tape.matmul(x, w.wq);
  Var k_full = tape.matmul(x, w.wk);
  Var v_full = tape.matmul(x, w.wv);
  ProjectedHeads out;
  for (int64_t i = 0; i < cfg.h_q; ++i) {
    out.q.push_back(tape.rms_norm(tape.slice_cols(q_full, i * dh, dh), w.q_gain, cfg.rms_eps));
  }
  for (int64_t j = 0; j < cfg.h_kv; ++j) {
    out.k.push_back(tape.rms_norm(tape.slice_cols(k_full, j * dh, dh), w.k_gain, cfg.rms_eps));
    out.v.push_back(tape.slice_cols(v_full, j * dh, dh));
  }
  return out;
}

Var attention_forward(Tape& tape, Var x, const AttentionLayerConfig& cfg, const AttentionVars& w,
                      const Tensor& mask, const Tensor& positions) {
  const int64_t dh = cfg.head_dim;
  const bool local = cfg.kind == AttentionKind::local;
  ProjectedHeads heads = project_and_norm(tape, x, cfg, w);
  Var gate = tape.sigmoid(tape.matmul(x, w.wg));

  std::vector<Var> k_t(static_cast<size_t>(cfg.h_kv));
  for (int64_t j = 0; j < cfg.h_kv; ++j) {
    Var k = heads.k[static_cast<size_t>(j)];
    if (local) k = tape.rope(k, positions, cfg.rope_theta);
    k_t[static_cast<size_t>(j)] = tape.transpose(k);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> gated_heads;
  gated_heads.reserve(static_cast<size_t>(cfg.h_q));
  for (int64_t i = 0; i < cfg.h_q; ++i) {
    const int64_t j = kv_head_for_query(i, cfg.h_q, cfg.h_kv);
    Var q = heads.q[static_cast<size_t>(i)];
    if (local) q = tape.rope(q, positions, cfg.rope_theta);
    Var logits = tape.scale(tape.matmul(q, k_t[static_cast<size_t>(j)]), inv_sqrt_dh);
    Var alpha = tape.masked_softmax_last(logits, mask);
    Var o = tape.matmul(alpha, heads.v[static_cast<size_t>(j)]);
    gated_heads.push_back(tape.mul(o, tape.slice_cols(gate, i * dh, dh)));
  }
  return tape.matmul(tape.concat_cols(gated_heads), w.wo);
}

}  // namespace trinity
