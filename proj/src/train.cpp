#include "trinity/train.hpp"

#include <cmath>
#include <stdexcept>

#include "trinity/rng.hpp"

namespace trinity {

std::vector<Document> make_memorizable_corpus(int64_t tokens, int64_t vocab, uint64_t seed,
                                              int64_t phrase_len, double noise_rate) {
  if (tokens < 1 || vocab < 2 || phrase_len < 1 || noise_rate < 0.0 || noise_rate >= 1.0) {
    throw std::invalid_argument("make_memorizable_corpus: invalid sizes");
  }
  Rng rng(seed);
  std::vector<int32_t> phrase(static_cast<size_t>(phrase_len));
  for (int32_t& t : phrase) t = static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(vocab)));
  Document doc;
  doc.tokens.reserve(static_cast<size_t>(tokens));
  for (int64_t i = 0; i < tokens; ++i) {
    if (rng.uniform() < noise_rate) {
      doc.tokens.push_back(static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(vocab))));
    } else {
      doc.tokens.push_back(phrase[static_cast<size_t>(i % phrase_len)]);
    }
  }
  return {std::move(doc)};
}

Batch pack_training_batch(const std::vector<Document>& docs, int64_t seq_len, int64_t max_sequences) {
  if (seq_len < 1) throw std::invalid_argument("pack_training_batch: seq_len must be >= 1");
  VectorDocumentStream stream(docs);
  // Pack at seq_len + 1 so every position has an in-buffer next token.
  SequentialPacker packer(stream, seq_len + 1);
  Batch batch;
  batch.seq_len = seq_len;
  while (auto buf = packer.next()) {
    for (int64_t i = 0; i < seq_len; ++i) {
      batch.tokens.push_back(buf->tokens[static_cast<size_t>(i)]);
      batch.targets.push_back(buf->tokens[static_cast<size_t>(i + 1)]);
    }
    for (const SpanRecord& span : buf->spans) {
      const int64_t end = std::min(span.buf_offset + span.len, seq_len);
      for (int64_t i = span.buf_offset; i < end; ++i) batch.doc_ids.push_back(static_cast<int32_t>(span.doc_id));
    }
    batch.sequences += 1;
    if (max_sequences > 0 && batch.sequences == max_sequences) break;
  }
  if (batch.sequences == 0) {
    throw std::runtime_error("pack_training_batch: corpus shorter than one sequence");
  }
  return batch;
}

TrainReport train_model(const ModelConfig& cfg_in, ParamSet& params, std::vector<RouterState>& routers,
                        const Batch& batch, const TrainOptions& options, const MetricsHook& hook) {
  ModelConfig cfg = cfg_in;
  if (options.balancer_override) cfg.balancer = *options.balancer_override;
  if (options.lr_override) cfg.lr = *options.lr_override;

  OptimizerConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.eps = cfg.adam_eps;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.warmup_steps = cfg.warmup_steps;
  opt_cfg.hold_steps = std::min(cfg.hold_steps, std::max<int64_t>(0, options.steps - cfg.warmup_steps - 1));
  opt_cfg.total_steps = options.steps;
  AdamW optimizer(params, opt_cfg);

  const int64_t per_step = options.batch_sequences > 0
                               ? std::min(options.batch_sequences, batch.sequences)
                               : batch.sequences;
  const int64_t m = std::max<int64_t>(1, std::min(options.microbatches, per_step));
  Rng sampler(options.sampler_seed);
  std::vector<int64_t> order(static_cast<size_t>(batch.sequences));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  size_t cursor = order.size();  // forces a shuffle on first use
  auto next_minibatch = [&]() {
    Batch mb;
    mb.seq_len = batch.seq_len;
    mb.sequences = per_step;
    const size_t t_len = static_cast<size_t>(batch.seq_len);
    for (int64_t k = 0; k < per_step; ++k) {
      if (cursor == order.size()) {
        // Fisher-Yates epoch shuffle
        for (size_t i = order.size(); i > 1; --i) {
          const size_t j = static_cast<size_t>(sampler.uniform_below(i));
          std::swap(order[i - 1], order[j]);
        }
        cursor = 0;
      }
      const size_t s = static_cast<size_t>(order[cursor++]);
      const size_t off = s * t_len;
      mb.tokens.insert(mb.tokens.end(), batch.tokens.begin() + off, batch.tokens.begin() + off + t_len);
      mb.targets.insert(mb.targets.end(), batch.targets.begin() + off, batch.targets.begin() + off + t_len);
      mb.doc_ids.insert(mb.doc_ids.end(), batch.doc_ids.begin() + off, batch.doc_ids.begin() + off + t_len);
    }
    return mb;
  };

  TrainReport report;
  report.steps.reserve(static_cast<size_t>(options.steps));
  for (int64_t step = 0; step < options.steps; ++step) {
    const Batch mb = per_step == batch.sequences ? batch : next_minibatch();
    Tape tape;
    ModelForwardResult fwd = model_forward(tape, cfg, params, routers, mb);
    StepMetrics metrics;
    metrics.step = step;
    metrics.loss = fwd.loss_value;
    metrics.ce = fwd.ce_value;
    metrics.z_term = fwd.z_value;
    metrics.aux = fwd.aux_value;
    metrics.mean_abs_lse = fwd.mean_abs_lse;
    metrics.lr = optimizer.schedule(step);
    if (!std::isfinite(fwd.loss_value)) {
      report.hit_nan = true;
      report.nan_step = step;
      report.steps.push_back(std::move(metrics));
      if (hook) hook(report.steps.back());
      break;
    }

    // Per-microbatch losses over contiguous sequence groups.
    {
      const Tensor ce_vec = tape.value(fwd.ce_per_position);
      std::vector<double> losses;
      const int64_t seqs_per = mb.sequences / m;
      for (int64_t g = 0; g < m; ++g) {
        const int64_t s0 = g * seqs_per;
        const int64_t s1 = g + 1 == m ? mb.sequences : s0 + seqs_per;
        double acc = 0.0;
        int64_t count = 0;
        for (int64_t pos = s0 * mb.seq_len; pos < s1 * mb.seq_len; ++pos) {
          acc += ce_vec.at(pos);
          ++count;
        }
        losses.push_back(acc / static_cast<double>(count));
      }
      metrics.batch_het = batch_het(losses);
    }
    if (!fwd.moe_layers.empty()) {
      double acc = 0.0;
      for (const MoeLayerRecord& rec : fwd.moe_layers) acc += rec.max_vio_value;
      metrics.max_vio_mean = acc / static_cast<double>(fwd.moe_layers.size());
    }
    metrics.moe_layers = fwd.moe_layers;

    std::vector<Tensor> grads = tape.gradients(fwd.loss, fwd.param_vars);
    double gnorm = 0.0;
    for (const Tensor& g : grads) {
      for (double v : g.data()) gnorm += v * v;
    }
    metrics.grad_norm = std::sqrt(gnorm);
    optimizer.step(params, grads, step);

    // Balancer updates from this step's aggregate loads.
    if (cfg.balancer != BalancerKind::none) {
      for (const MoeLayerRecord& rec : fwd.moe_layers) {
        RouterState& state = routers[static_cast<size_t>(cfg.moe_slot(rec.layer))];
        if (cfg.balancer == BalancerKind::sign) {
          bias_update_sign(state, rec.stats);
        } else {
          bias_update_smebu(state, rec.stats);
        }
      }
    }

    report.steps.push_back(std::move(metrics));
    if (hook) hook(report.steps.back());
  }
  return report;
}

}  // namespace trinity
