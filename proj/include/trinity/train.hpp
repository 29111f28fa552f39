#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "trinity/datapipe.hpp"
#include "trinity/model.hpp"
#include "trinity/optimizer.hpp"

namespace trinity {

/// Cyclic corpus a tiny model can drive to a low, stable loss: one random
/// phrase repeated until `tokens` tokens exist, as a single document. A
/// small fraction of positions is re-randomized per repetition, so packed
/// rows share contexts whose next token genuinely conflicts; that
/// irreducible entropy keeps gradient noise alive at the optimum and stops
/// the late-training logit drift a fully fittable corpus would sustain.
/// The default phrase length matches one packed row of the tiny preset
/// (seq_len + 1), aligning the conflicts across rows.
std::vector<Document> make_memorizable_corpus(int64_t tokens, int64_t vocab, uint64_t seed,
                                              int64_t phrase_len = 65, double noise_rate = 0.1);

/// Sequentially packs documents into a fixed training batch with next-token
/// targets and per-position document ids. Positions whose target falls in a
/// different document still carry it (the loss is over the packed stream);
/// the tiny smoke corpus is a single document so the case never bites there.
Batch pack_training_batch(const std::vector<Document>& docs, int64_t seq_len,
                          int64_t max_sequences = 0);

struct StepMetrics {
  int64_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double z_term = 0.0;
  double aux = 0.0;
  double mean_abs_lse = 0.0;
  double batch_het = 0.0;
  double max_vio_mean = 0.0;  // mean over MoE layers, this step's loads
  double grad_norm = 0.0;
  double lr = 0.0;
  std::vector<MoeLayerRecord> moe_layers;
};

struct TrainOptions {
  int64_t steps = 200;
  int64_t microbatches = 4;
  /// Sequences sampled per step (0 = the whole batch). Sampling is a seeded
  /// epoch shuffle, so runs are deterministic.
  int64_t batch_sequences = 8;
  uint64_t sampler_seed = 1;
  std::optional<BalancerKind> balancer_override;
  std::optional<double> lr_override;
};

struct TrainReport {
  std::vector<StepMetrics> steps;
  bool hit_nan = false;
  int64_t nan_step = -1;
};

using MetricsHook = std::function<void(const StepMetrics&)>;

/// Smoke training: minibatch forward, reverse, AdamW update, balancer
/// update, repeated. Deterministic given (config, params, batch, options).
TrainReport train_model(const ModelConfig& cfg, ParamSet& params, std::vector<RouterState>& routers,
                        const Batch& batch, const TrainOptions& options, const MetricsHook& hook = {});

}  // namespace trinity
