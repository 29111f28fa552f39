#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trinity/tape.hpp"

namespace trinity {

enum class BalancerKind : uint8_t { none, sign, smebu };

struct MoeConfig {
  int64_t d_model = 0;
  int64_t n_routed = 0;
  int64_t n_shared = 0;
  int64_t k_active = 0;
  int64_t expert_dim = 0;
  double route_scale = 1.0;
  double aux_alpha = 0.0;
  void validate() const;
};

struct SwigluVars {
  Var gate;  // [in x hidden]
  Var up;    // [in x hidden]
  Var down;  // [hidden x in]
};

struct MoeVars {
  Var router;  // [d_model x n_routed]
  std::vector<SwigluVars> shared;
  std::vector<SwigluVars> experts;
};

/// Decoupled router-bias state. The bias steers top-k selection only; it is
/// never differentiated and never touches gate values.
struct RouterState {
  std::vector<double> bias;
  std::vector<double> momentum;
  double gamma = 5e-4;   // sign-update speed
  double lambda = 5e-4;  // load-balance learning rate
  double kappa = 2.0;    // tanh scale
  double beta = 0.5;     // momentum factor

  static RouterState zeros(int64_t n_experts);
};

/// Per-step routed-token counts.
struct LoadStats {
  std::vector<int64_t> counts;
  int64_t tokens = 0;
  int64_t k_active = 0;

  double mean_load() const;
  void accumulate(const LoadStats& other);
};

struct MoeForwardResult {
  Var output;    // [T x d_model]
  Var aux_loss;  // scalar, already alpha-weighted; zero constant when alpha == 0
  LoadStats stats;
  Tensor scores;  // [T x n_routed] router scores (values)
  std::vector<std::vector<int32_t>> selected;  // per token, ascending expert ids
};

/// down( SiLU(x W_gate) * (x W_up) ).
Var swiglu(Tape& tape, Var x, const SwigluVars& w);

/// Indices of the k largest scores[i] + bias[i]; ties break toward the
/// lowest expert index. Returned ascending.
std::vector<int32_t> select_topk(std::span<const double> scores, std::span<const double> bias, int64_t k);

/// Zero for unselected experts, scores renormalized over the selected set
/// otherwise. Host-side mirror of the on-tape gate computation.
std::vector<double> normalize_gates(std::span<const double> scores, std::span<const int32_t> selected);

/// Full sparse-MoE layer: residual + shared experts + route_scale-weighted
/// gated routed experts. The router bias in `state` is read, never written.
/// seq_len partitions the rows into sequences for the sequence-wise aux
/// loss; pass seq_len == rows for a single sequence. frozen_selection pins
/// the per-token expert sets (gradient checks perturb weights and must not
/// flip the top-k sets between evaluations).
MoeForwardResult moe_forward(Tape& tape, Var u, const MoeConfig& cfg, const MoeVars& w,
                             const RouterState& state, int64_t seq_len,
                             const std::vector<std::vector<int32_t>>* frozen_selection = nullptr);

/// Post-update sums used by the invariant checks: the bias vector after the
/// update and the centered pre-momentum deltas (always zero for the sign
/// update, which centers the bias itself).
struct BiasUpdateDiag {
  double bias_sum = 0.0;
  double centered_delta_sum = 0.0;
};

/// Sign-based bias update with re-centering; keeps sum(bias) == 0.
BiasUpdateDiag bias_update_sign(RouterState& state, const LoadStats& stats);

/// Soft-clamped momentum update: normalized violation, tanh clamp,
/// mean-centering, momentum smoothing. Skipped entirely when no tokens were
/// routed in the step.
BiasUpdateDiag bias_update_smebu(RouterState& state, const LoadStats& stats);

/// (max load - mean load) / mean load; throws when the mean load is zero.
double max_vio(std::span<const double> loads);
double max_vio(const LoadStats& stats);

}  // namespace trinity
