#include "trinity/balancer_sim.hpp"

#include <cmath>
#include <stdexcept>

#include "trinity/rng.hpp"

namespace trinity {

double BalancerSimResult::mean_max_vio_tail(int64_t steps_from_end) const {
  const size_t n = max_vio.size();
  const size_t k = std::min(static_cast<size_t>(steps_from_end), n);
  double acc = 0.0;
  for (size_t i = n - k; i < n; ++i) acc += max_vio[i];
  return acc / static_cast<double>(k);
}

double BalancerSimResult::mean_abs_change_tail(int64_t steps_from_end) const {
  const size_t n = mean_abs_bias_change.size();
  const size_t k = std::min(static_cast<size_t>(steps_from_end), n);
  double acc = 0.0;
  for (size_t i = n - k; i < n; ++i) acc += mean_abs_bias_change[i];
  return acc / static_cast<double>(k);
}

BalancerSimResult run_balancer_sim(const BalancerSimParams& p) {
  if (p.hot_experts < 0 || p.hot_experts > p.n_experts) {
    throw std::invalid_argument("run_balancer_sim: hot expert count out of range");
  }
  Rng rng(p.seed);
  RouterState state = RouterState::zeros(p.n_experts);
  state.gamma = p.gamma;
  state.lambda = p.lambda;
  state.kappa = p.kappa;
  state.beta = p.beta;

  const size_t n = static_cast<size_t>(p.n_experts);
  std::vector<double> mu(n);
  for (size_t i = 0; i < n; ++i) {
    mu[i] = i < static_cast<size_t>(p.hot_experts) ? 0.5 * p.affinity_gap : -0.5 * p.affinity_gap;
  }

  BalancerSimResult res;
  res.max_vio.reserve(static_cast<size_t>(p.steps));
  res.mean_abs_bias_change.reserve(static_cast<size_t>(p.steps));
  std::vector<double> scores(n);
  std::vector<double> prev_bias = state.bias;
  for (int64_t step = 0; step < p.steps; ++step) {
    LoadStats stats;
    stats.counts.assign(n, 0);
    stats.tokens = p.tokens_per_step;
    stats.k_active = p.k_active;
    for (int64_t t = 0; t < p.tokens_per_step; ++t) {
      for (size_t i = 0; i < n; ++i) {
        scores[i] = 1.0 / (1.0 + std::exp(-(mu[i] + rng.normal())));
      }
      for (int32_t e : select_topk(scores, state.bias, p.k_active)) {
        stats.counts[static_cast<size_t>(e)] += 1;
      }
    }
    res.max_vio.push_back(max_vio(stats));

    prev_bias = state.bias;
    BiasUpdateDiag diag;
    switch (p.balancer) {
      case BalancerKind::sign:
        diag = bias_update_sign(state, stats);
        res.worst_abs_bias_sum = std::max(res.worst_abs_bias_sum, std::fabs(diag.bias_sum));
        break;
      case BalancerKind::smebu:
        diag = bias_update_smebu(state, stats);
        res.worst_abs_delta_sum = std::max(res.worst_abs_delta_sum, std::fabs(diag.centered_delta_sum));
        break;
      case BalancerKind::none:
        break;
    }
    double change = 0.0;
    for (size_t i = 0; i < n; ++i) change += std::fabs(state.bias[i] - prev_bias[i]);
    res.mean_abs_bias_change.push_back(change / static_cast<double>(n));
  }
  res.final_state = state;
  return res;
}

}  // namespace trinity
