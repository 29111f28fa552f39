#pragma once

#include <cstdint>
#include <vector>

#include "trinity/model.hpp"

namespace trinity {

/// Decoupled-weight-decay adaptive moment estimation over a ParamSet, with
/// the fan-ratio learning-rate adjustment applied to hidden-layer matrices.
/// Embedding/unembedding matrices and norm gains keep the base rate; gains
/// are also excluded from weight decay. Schedule: linear warmup, an
/// optional hold at the peak rate, then linear decay to zero at total_steps.
struct OptimizerConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int64_t warmup_steps = 10;
  int64_t hold_steps = 0;  // steps at peak rate between warmup and decay
  int64_t total_steps = 200;
};

class AdamW {
 public:
  AdamW(const ParamSet& params, OptimizerConfig cfg);

  /// Applies one update; step_index counts from 0.
  void step(ParamSet& params, const std::vector<Tensor>& grads, int64_t step_index);

  double schedule(int64_t step_index) const;
  double rate_multiplier(size_t param_index) const { return rate_mult_[param_index]; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<double> rate_mult_;
  std::vector<bool> decay_;
};

}  // namespace trinity
