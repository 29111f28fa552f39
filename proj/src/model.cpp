#include "trinity/model.hpp"

#include <cmath>
#include <stdexcept>

#include "trinity/rng.hpp"

namespace trinity {

NormGainInit init_norm_gains(int64_t layers) {
  if (layers < 1) throw std::invalid_argument("init_norm_gains: layers must be >= 1");
  return {1.0, 1.0 / std::sqrt(static_cast<double>(layers))};
}

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
  index_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

void ParamSet::set(size_t i, Tensor value) {
  if (value.shape() != values_[i].shape()) {
    throw std::invalid_argument("ParamSet: shape change for '" + names_[i] + "'");
  }
  values_[i] = std::move(value);
}

const Tensor& ParamSet::get(const std::string& name) const { return values_[index_of(name)]; }

size_t ParamSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
  return it->second;
}

std::vector<ParamShape> enumerate_parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamShape> out;
  const int64_t d = cfg.d_model;
  const int64_t qd = cfg.heads * cfg.head_dim;
  const int64_t kvd = cfg.kv_heads * cfg.head_dim;
  out.push_back({"embed.weight", {cfg.vocab_size, d}});
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    out.push_back({b + "attn_norm1.gain", {d}});
    out.push_back({b + "attn.wq", {d, qd}});
    out.push_back({b + "attn.wk", {d, kvd}});
    out.push_back({b + "attn.wv", {d, kvd}});
    out.push_back({b + "attn.wg", {d, qd}});
    out.push_back({b + "attn.wo", {qd, d}});
    out.push_back({b + "attn.q_gain", {cfg.head_dim}});
    out.push_back({b + "attn.k_gain", {cfg.head_dim}});
    out.push_back({b + "attn_norm2.gain", {d}});
    out.push_back({b + "ffn_norm1.gain", {d}});
    if (cfg.ffn_kind(l) == FfnKind::dense) {
      out.push_back({b + "ffn.gate", {d, cfg.ffn_dim}});
      out.push_back({b + "ffn.up", {d, cfg.ffn_dim}});
      out.push_back({b + "ffn.down", {cfg.ffn_dim, d}});
    } else {
      out.push_back({b + "moe.router", {d, cfg.routed_experts}});
      for (int64_t s = 0; s < cfg.shared_experts; ++s) {
        const std::string p = b + "moe.shared." + std::to_string(s) + ".";
        out.push_back({p + "gate", {d, cfg.expert_dim}});
        out.push_back({p + "up", {d, cfg.expert_dim}});
        out.push_back({p + "down", {cfg.expert_dim, d}});
      }
      for (int64_t e = 0; e < cfg.routed_experts; ++e) {
        const std::string p = b + "moe.expert." + std::to_string(e) + ".";
        out.push_back({p + "gate", {d, cfg.expert_dim}});
        out.push_back({p + "up", {d, cfg.expert_dim}});
        out.push_back({p + "down", {cfg.expert_dim, d}});
      }
    }
    out.push_back({b + "ffn_norm2.gain", {d}});
  }
  out.push_back({"lm_norm.gain", {d}});
  out.push_back({"unembed.weight", {d, cfg.vocab_size}});
  return out;
}

int64_t total_parameter_count(const ModelConfig& cfg) {
  int64_t total = 0;
  for (const ParamShape& p : enumerate_parameter_shapes(cfg)) {
    int64_t n = 1;
    for (int64_t e : p.shape) n *= e;
    total += n;
  }
  return total;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ParamSet init_all_params(const ModelConfig& cfg, uint64_t seed) {
  const NormGainInit gains = init_norm_gains(cfg.layers);
  const double sigma = cfg.computed_init_sigma();
  Rng rng(seed);
  ParamSet params;
  for (ParamShape& p : enumerate_parameter_shapes(cfg)) {
    if (p.shape.size() == 1) {
      // norm gains: depth-scaled for the sandwich output norms, 1 elsewhere
      const double g = ends_with(p.name, "norm2.gain") ? gains.second : gains.first;
      params.add(std::move(p.name), Tensor::full(p.shape, g));
      continue;
    }
    int64_t n = 1;
    for (int64_t e : p.shape) n *= e;
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) {
      double z;
      do {
        z = rng.normal();
      } while (std::fabs(z) > 3.0);
      v = sigma * z;
    }
    params.add(std::move(p.name), Tensor::from_data(p.shape, std::move(data)));
  }
  return params;
}

std::vector<RouterState> init_router_states(const ModelConfig& cfg) {
  std::vector<RouterState> states;
  for (int64_t i = 0; i < cfg.moe_layer_count(); ++i) {
    RouterState s = RouterState::zeros(cfg.routed_experts);
    s.gamma = cfg.balancer_gamma;
    s.lambda = cfg.balancer_lambda;
    s.kappa = cfg.balancer_kappa;
    s.beta = cfg.balancer_beta;
    states.push_back(std::move(s));
  }
  return states;
}

double adjusted_lr(double lr, int64_t fan_in, int64_t fan_out) {
  if (fan_in <= 0 || fan_out <= 0) throw std::invalid_argument("adjusted_lr: fans must be positive");
  const double ratio = static_cast<double>(fan_out) / static_cast<double>(fan_in);
  return lr * std::sqrt(std::max(1.0, ratio));
}

Var sandwich_block(Tape& tape, Var x, Var gain1, Var gain2, double eps, const Sublayer& sublayer) {
  Var inner = sublayer(tape, tape.rms_norm(x, gain1, eps));
  return tape.add(x, tape.rms_norm(inner, gain2, eps));
}

Var embed_tokens(Tape& tape, Var embedding, std::span<const int32_t> ids, int64_t d_model) {
  const Tensor emb = tape.value(embedding);
  std::vector<int64_t> rows;
  rows.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id >= emb.dim(0)) {
      throw std::invalid_argument("embed_tokens: token id " + std::to_string(id) +
                                  " outside vocabulary of size " + std::to_string(emb.dim(0)));
    }
    rows.push_back(id);
  }
  return tape.scale(tape.gather_rows(embedding, std::move(rows)), std::sqrt(static_cast<double>(d_model)));
}

Var final_head(Tape& tape, Var h, Var lm_gain, Var unembed, double eps) {
  return tape.matmul(tape.rms_norm(h, lm_gain, eps), unembed);
}

LossParts training_loss(Tape& tape, Var logits, std::span<const int32_t> targets, double z_weight,
                        std::span<const Var> aux_losses) {
  const Tensor lt = tape.value(logits);
  const int64_t rows = lt.dim(0), vocab = lt.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw std::invalid_argument("training_loss: target count does not match logit rows");
  }
  std::vector<int64_t> flat;
  flat.reserve(targets.size());
  for (int64_t t = 0; t < rows; ++t) {
    const int32_t id = targets[static_cast<size_t>(t)];
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("training_loss: target id " + std::to_string(id) + " outside vocabulary");
    }
    flat.push_back(t * vocab + id);
  }
  LossParts parts;
  parts.lse = tape.logsumexp_last(logits);
  parts.ce_per_position = tape.sub(parts.lse, tape.take(logits, std::move(flat)));
  parts.ce = tape.mean(parts.ce_per_position);
  parts.z_term = tape.scale(tape.mean(tape.mul(parts.lse, parts.lse)), z_weight);
  parts.loss = tape.add(parts.ce, parts.z_term);
  for (Var aux : aux_losses) parts.loss = tape.add(parts.loss, aux);
  return parts;
}

ModelForwardResult model_forward(Tape& tape, const ModelConfig& cfg, const ParamSet& params,
                                 const std::vector<RouterState>& routers, const Batch& batch) {
  cfg.validate();
  if (batch.sequences < 1 || batch.seq_len < 1 || batch.seq_len > cfg.seq_len) {
    throw std::invalid_argument("model_forward: batch shape invalid or longer than configured seq_len");
  }
  const int64_t total = batch.sequences * batch.seq_len;
  if (static_cast<int64_t>(batch.tokens.size()) != total ||
      static_cast<int64_t>(batch.targets.size()) != total ||
      static_cast<int64_t>(batch.doc_ids.size()) != total) {
    throw std::invalid_argument("model_forward: batch arrays do not match sequences * seq_len");
  }
  if (static_cast<int64_t>(routers.size()) != cfg.moe_layer_count()) {
    throw std::invalid_argument("model_forward: router state count mismatch");
  }

  ModelForwardResult res;
  res.param_vars.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) res.param_vars.push_back(tape.input(params.value(i)));
  auto var_of = [&](const std::string& name) { return res.param_vars[params.index_of(name)]; };

  // Per-sequence masks and rotary positions are shared across layers.
  std::vector<Tensor> local_masks, global_masks;
  Tensor positions;
  {
    std::vector<double> pos(static_cast<size_t>(batch.seq_len));
    for (int64_t i = 0; i < batch.seq_len; ++i) pos[static_cast<size_t>(i)] = static_cast<double>(i);
    positions = Tensor::from_data({batch.seq_len}, std::move(pos));
    for (int64_t s = 0; s < batch.sequences; ++s) {
      std::span<const int32_t> docs(batch.doc_ids.data() + s * batch.seq_len,
                                    static_cast<size_t>(batch.seq_len));
      AttentionMaskSpec spec{.len = batch.seq_len, .kind = AttentionKind::local, .window = cfg.window,
                             .intra_doc = cfg.intra_doc_masking, .doc_ids = docs};
      local_masks.push_back(build_mask(spec));
      spec.kind = AttentionKind::global;
      global_masks.push_back(build_mask(spec));
    }
  }

  Var x = embed_tokens(tape, var_of("embed.weight"), batch.tokens, cfg.d_model);
  std::vector<Var> aux_losses;
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    const AttentionLayerConfig acfg = cfg.attention_config(l);
    AttentionVars avars{var_of(b + "attn.wq"), var_of(b + "attn.wk"), var_of(b + "attn.wv"),
                        var_of(b + "attn.wg"), var_of(b + "attn.wo"), var_of(b + "attn.q_gain"),
                        var_of(b + "attn.k_gain")};
    const auto& masks = acfg.kind == AttentionKind::local ? local_masks : global_masks;
    Sublayer attn = [&](Tape& t, Var in) {
      std::vector<Var> seq_outs;
      seq_outs.reserve(static_cast<size_t>(batch.sequences));
      for (int64_t s = 0; s < batch.sequences; ++s) {
        Var xs = t.slice_rows(in, s * batch.seq_len, batch.seq_len);
        seq_outs.push_back(attention_forward(t, xs, acfg, avars, masks[static_cast<size_t>(s)], positions));
      }
      return seq_outs.size() == 1 ? seq_outs[0] : t.concat_rows(seq_outs);
    };
    x = sandwich_block(tape, x, var_of(b + "attn_norm1.gain"), var_of(b + "attn_norm2.gain"), cfg.rms_eps,
                       attn);

    Sublayer ffn;
    MoeForwardResult moe_res;
    if (cfg.ffn_kind(l) == FfnKind::dense) {
      SwigluVars w{var_of(b + "ffn.gate"), var_of(b + "ffn.up"), var_of(b + "ffn.down")};
      ffn = [&, w](Tape& t, Var in) { return swiglu(t, in, w); };
    } else {
      MoeVars mv;
      mv.router = var_of(b + "moe.router");
      for (int64_t s = 0; s < cfg.shared_experts; ++s) {
        const std::string p = b + "moe.shared." + std::to_string(s) + ".";
        mv.shared.push_back({var_of(p + "gate"), var_of(p + "up"), var_of(p + "down")});
      }
      for (int64_t e = 0; e < cfg.routed_experts; ++e) {
        const std::string p = b + "moe.expert." + std::to_string(e) + ".";
        mv.experts.push_back({var_of(p + "gate"), var_of(p + "up"), var_of(p + "down")});
      }
      const RouterState& state = routers[static_cast<size_t>(cfg.moe_slot(l))];
      ffn = [&, mv](Tape& t, Var in) {
        moe_res = moe_forward(t, in, cfg.moe_config(), mv, state, batch.seq_len);
        return moe_res.output;
      };
    }
    x = sandwich_block(tape, x, var_of(b + "ffn_norm1.gain"), var_of(b + "ffn_norm2.gain"), cfg.rms_eps, ffn);
    if (cfg.ffn_kind(l) == FfnKind::moe) {
      aux_losses.push_back(moe_res.aux_loss);
      MoeLayerRecord rec;
      rec.layer = l;
      rec.stats = std::move(moe_res.stats);
      rec.aux = tape.value(moe_res.aux_loss).scalar_value();
      rec.max_vio_value = max_vio(rec.stats);
      const RouterState& state = routers[static_cast<size_t>(cfg.moe_slot(l))];
      for (double v : state.bias) rec.bias_l2 += v * v;
      for (double v : state.momentum) rec.momentum_l2 += v * v;
      rec.bias_l2 = std::sqrt(rec.bias_l2);
      rec.momentum_l2 = std::sqrt(rec.momentum_l2);
      res.moe_layers.push_back(std::move(rec));
    }
  }

  Var logits = final_head(tape, x, var_of("lm_norm.gain"), var_of("unembed.weight"), cfg.rms_eps);
  LossParts loss = training_loss(tape, logits, batch.targets, cfg.z_loss_weight, aux_losses);
  res.loss = loss.loss;
  res.ce_per_position = loss.ce_per_position;
  res.loss_value = tape.value(loss.loss).scalar_value();
  res.ce_value = tape.value(loss.ce).scalar_value();
  res.z_value = tape.value(loss.z_term).scalar_value();
  for (Var a : aux_losses) res.aux_value += tape.value(a).scalar_value();
  const Tensor lse = tape.value(loss.lse);
  double acc = 0.0;
  for (double v : lse.data()) acc += std::fabs(v);
  res.mean_abs_lse = acc / static_cast<double>(lse.numel());
  return res;
}

}  // namespace trinity
