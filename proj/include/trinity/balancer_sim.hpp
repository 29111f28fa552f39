#pragma once

#include <cstdint>
#include <vector>

#include "trinity/moe.hpp"

namespace trinity {

/// Synthetic routing stream for balancer studies. Per-token expert affinity
/// logits are N(mu_i, 1) with a raised mean for the hot group, sized so the
/// unbalanced hot:cold load ratio is roughly 4:1 at the defaults.
struct BalancerSimParams {
  int64_t n_experts = 16;
  int64_t k_active = 2;
  int64_t tokens_per_step = 1024;
  int64_t steps = 2000;
  int64_t hot_experts = 4;
  double affinity_gap = 0.9;  // hot mean minus cold mean; ~4:1 unbalanced load ratio
  BalancerKind balancer = BalancerKind::smebu;
  double gamma = 5e-4;
  double lambda = 5e-4;
  double kappa = 2.0;
  double beta = 0.5;
  uint64_t seed = 1;
};

struct BalancerSimResult {
  std::vector<double> max_vio;            // per step, measured before the update
  std::vector<double> mean_abs_bias_change;  // mean_i |b_i(t) - b_i(t-1)|
  double worst_abs_bias_sum = 0.0;        // max over steps |sum_i b_i| (sign updates)
  double worst_abs_delta_sum = 0.0;       // max over steps |sum_i centered delta| (smebu)
  RouterState final_state;

  double mean_max_vio_tail(int64_t steps_from_end) const;
  double mean_abs_change_tail(int64_t steps_from_end) const;
};

BalancerSimResult run_balancer_sim(const BalancerSimParams& params);

}  // namespace trinity
