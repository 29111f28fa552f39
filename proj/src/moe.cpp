#include "trinity/moe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace trinity {

void MoeConfig::validate() const {
  if (d_model <= 0 || expert_dim <= 0) throw std::invalid_argument("MoeConfig: dimensions must be positive");
  if (n_routed < 1 || k_active < 1 || k_active > n_routed) {
    throw std::invalid_argument("MoeConfig: need 1 <= k_active <= n_routed, got k=" + std::to_string(k_active) +
                                " n=" + std::to_string(n_routed));
  }
  if (n_shared < 0) throw std::invalid_argument("MoeConfig: negative shared expert count");
  if (route_scale <= 0.0) throw std::invalid_argument("MoeConfig: route_scale must be > 0");
  if (aux_alpha < 0.0) throw std::invalid_argument("MoeConfig: aux_alpha must be >= 0");
}

RouterState RouterState::zeros(int64_t n_experts) {
  RouterState s;
  s.bias.assign(static_cast<size_t>(n_experts), 0.0);
  s.momentum.assign(static_cast<size_t>(n_experts), 0.0);
  return s;
}

double LoadStats::mean_load() const {
  if (counts.empty()) return 0.0;
  int64_t total = 0;
  for (int64_t c : counts) total += c;
  return static_cast<double>(total) / static_cast<double>(counts.size());
}

void LoadStats::accumulate(const LoadStats& other) {
  if (counts.empty()) counts.assign(other.counts.size(), 0);
  if (counts.size() != other.counts.size()) throw std::invalid_argument("LoadStats: expert count mismatch");
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  tokens += other.tokens;
  k_active = other.k_active;
}

Var swiglu(Tape& tape, Var x, const SwigluVars& w) {
  Var a = tape.silu(tape.matmul(x, w.gate));
  Var b = tape.matmul(x, w.up);
  return tape.matmul(tape.mul(a, b), w.down);
}

std::vector<int32_t> select_topk(std::span<const double> scores, std::span<const double> bias, int64_t k) {
  const int64_t n = static_cast<int64_t>(scores.size());
  if (bias.size() != scores.size()) throw std::invalid_argument("select_topk: bias length mismatch");
  if (k < 1 || k > n) throw std::invalid_argument("select_topk: k outside [1, n]");
  std::vector<int32_t> selected;
  selected.reserve(static_cast<size_t>(k));
  std::vector<bool> used(static_cast<size_t>(n), false);
  for (int64_t round = 0; round < k; ++round) {
    int64_t best = -1;
    double best_val = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      if (used[static_cast<size_t>(i)]) continue;
      const double v = scores[static_cast<size_t>(i)] + bias[static_cast<size_t>(i)];
      if (best < 0 || v > best_val) {  // strict > keeps the lowest index on ties
        best = i;
        best_val = v;
      }
    }
    used[static_cast<size_t>(best)] = true;
    selected.push_back(static_cast<int32_t>(best));
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

std::vector<double> normalize_gates(std::span<const double> scores, std::span<const int32_t> selected) {
  if (selected.empty()) throw std::invalid_argument("normalize_gates: empty selection");
  std::vector<double> gates(scores.size(), 0.0);
  double denom = 0.0;
  for (int32_t i : selected) denom += scores[static_cast<size_t>(i)];
  for (int32_t i : selected) gates[static_cast<size_t>(i)] = scores[static_cast<size_t>(i)] / denom;
  return gates;
}

MoeForwardResult moe_forward(Tape& tape, Var u, const MoeConfig& cfg, const MoeVars& w,
                             const RouterState& state, int64_t seq_len,
                             const std::vector<std::vector<int32_t>>* frozen_selection) {
  cfg.validate();
  const Tensor uv = tape.value(u);
  if (uv.rank() != 2 || uv.dim(1) != cfg.d_model) {
    throw std::invalid_argument("moe_forward: input " + uv.shape_str() + " does not match d_model");
  }
  const int64_t t_total = uv.dim(0);
  const int64_t n = cfg.n_routed;
  if (seq_len < 1 || t_total % seq_len != 0) {
    throw std::invalid_argument("moe_forward: rows " + std::to_string(t_total) +
                                " not divisible by seq_len " + std::to_string(seq_len));
  }
  if (static_cast<int64_t>(state.bias.size()) != n) {
    throw std::invalid_argument("moe_forward: router state sized for " + std::to_string(state.bias.size()) +
                                " experts, config has " + std::to_string(n));
  }

  MoeForwardResult res;
  Var scores = tape.sigmoid(tape.matmul(u, w.router));
  res.scores = tape.value(scores);

  // Biased top-k selection, off-tape: the bias steers selection only.
  res.selected.resize(static_cast<size_t>(t_total));
  res.stats.counts.assign(static_cast<size_t>(n), 0);
  res.stats.tokens = t_total;
  res.stats.k_active = cfg.k_active;
  std::vector<double> sel_mask(static_cast<size_t>(t_total * n), 0.0);
  std::vector<std::vector<int64_t>> expert_tokens(static_cast<size_t>(n));
  const std::span<const double> score_data = res.scores.data();
  if (frozen_selection && static_cast<int64_t>(frozen_selection->size()) != t_total) {
    throw std::invalid_argument("moe_forward: frozen selection does not cover every token");
  }
  for (int64_t t = 0; t < t_total; ++t) {
    auto row = score_data.subspan(static_cast<size_t>(t * n), static_cast<size_t>(n));
    auto sel = frozen_selection ? (*frozen_selection)[static_cast<size_t>(t)]
                                : select_topk(row, state.bias, cfg.k_active);
    for (int32_t e : sel) {
      sel_mask[static_cast<size_t>(t * n + e)] = 1.0;
      res.stats.counts[static_cast<size_t>(e)] += 1;
      expert_tokens[static_cast<size_t>(e)].push_back(t);
    }
    res.selected[static_cast<size_t>(t)] = std::move(sel);
  }

  Var gates = tape.masked_row_norm(scores, Tensor::from_data({t_total, n}, std::move(sel_mask)));

  Var out = u;  // residual
  for (const SwigluVars& sh : w.shared) out = tape.add(out, swiglu(tape, u, sh));
  for (int64_t e = 0; e < n; ++e) {
    const auto& idx = expert_tokens[static_cast<size_t>(e)];
    if (idx.empty()) continue;
    Var ue = tape.gather_rows(u, idx);
    Var fe = swiglu(tape, ue, w.experts[static_cast<size_t>(e)]);
    std::vector<int64_t> gate_idx;
    gate_idx.reserve(idx.size());
    for (int64_t t : idx) gate_idx.push_back(t * n + e);
    fe = tape.scale_rows(fe, tape.take(gates, std::move(gate_idx)));
    out = tape.scatter_add_rows(out, tape.scale(fe, cfg.route_scale), idx);
  }
  res.output = out;

  // Sequence-wise balance loss, selection indicator frozen.
  if (cfg.aux_alpha > 0.0) {
    const int64_t n_seq = t_total / seq_len;
    Var total = tape.constant(Tensor::scalar(0.0));
    const Tensor ones = Tensor::full({seq_len, n}, 1.0);
    for (int64_t s = 0; s < n_seq; ++s) {
      std::vector<double> freq(static_cast<size_t>(n), 0.0);
      for (int64_t t = s * seq_len; t < (s + 1) * seq_len; ++t) {
        for (int32_t e : res.selected[static_cast<size_t>(t)]) freq[static_cast<size_t>(e)] += 1.0;
      }
      const double f_scale = static_cast<double>(n) /
                             (static_cast<double>(cfg.k_active) * static_cast<double>(seq_len));
      std::vector<double> f_rows(static_cast<size_t>(seq_len * n));
      for (int64_t t = 0; t < seq_len; ++t) {
        for (int64_t e = 0; e < n; ++e) {
          f_rows[static_cast<size_t>(t * n + e)] = freq[static_cast<size_t>(e)] * f_scale;
        }
      }
      Var s_seq = tape.slice_rows(scores, s * seq_len, seq_len);
      Var s_norm = tape.masked_row_norm(s_seq, ones);
      Var weighted = tape.mul(s_norm, tape.constant(Tensor::from_data({seq_len, n}, std::move(f_rows))));
      total = tape.add(total, tape.scale(tape.sum(weighted), cfg.aux_alpha / static_cast<double>(seq_len)));
    }
    res.aux_loss = tape.scale(total, 1.0 / static_cast<double>(n_seq));
  } else {
    res.aux_loss = tape.constant(Tensor::scalar(0.0));
  }
  return res;
}

BiasUpdateDiag bias_update_sign(RouterState& state, const LoadStats& stats) {
  const size_t n = state.bias.size();
  if (stats.counts.size() != n) throw std::invalid_argument("bias_update_sign: expert count mismatch");
  const double mean = stats.mean_load();
  for (size_t i = 0; i < n; ++i) {
    const double diff = mean - static_cast<double>(stats.counts[i]);
    const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    state.bias[i] += state.gamma * sgn;
  }
  double bias_mean = 0.0;
  for (double b : state.bias) bias_mean += b;
  bias_mean /= static_cast<double>(n);
  BiasUpdateDiag diag;
  for (double& b : state.bias) {
    b -= bias_mean;
    diag.bias_sum += b;
  }
  return diag;
}

BiasUpdateDiag bias_update_smebu(RouterState& state, const LoadStats& stats) {
  const size_t n = state.bias.size();
  if (stats.counts.size() != n) throw std::invalid_argument("bias_update_smebu: expert count mismatch");
  BiasUpdateDiag diag;
  const double mean = stats.mean_load();
  if (mean == 0.0) {  // no tokens routed this step
    for (double b : state.bias) diag.bias_sum += b;
    return diag;
  }
  std::vector<double> delta(n);
  double delta_mean = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double violation = (mean - static_cast<double>(stats.counts[i])) / mean;
    delta[i] = state.lambda * std::tanh(state.kappa * violation);
    delta_mean += delta[i];
  }
  delta_mean /= static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    const double centered = delta[i] - delta_mean;
    diag.centered_delta_sum += centered;
    state.momentum[i] = state.beta * state.momentum[i] + (1.0 - state.beta) * centered;
    state.bias[i] += state.momentum[i];
    diag.bias_sum += state.bias[i];
  }
  return diag;
}

double max_vio(std::span<const double> loads) {
  if (loads.empty()) throw std::invalid_argument("max_vio: empty loads");
  double mx = loads[0], mean = 0.0;
  for (double v : loads) {
    mx = std::max(mx, v);
    mean += v;
  }
  mean /= static_cast<double>(loads.size());
  if (mean == 0.0) throw std::invalid_argument("max_vio: zero mean load");
  return (mx - mean) / mean;
}

double max_vio(const LoadStats& stats) {
  std::vector<double> loads(stats.counts.begin(), stats.counts.end());
  return max_vio(loads);
}

}  // namespace trinity
