#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "trinity/attention.hpp"
#include "trinity/moe.hpp"
#include "trinity/tape.hpp"

namespace trinity {

enum class FfnKind : uint8_t { dense, moe };

/// Full model description. Mirrors the config file fields one to one.
/// init_sigma is the reported initialization width and must agree with
/// 0.5 / sqrt(d_model) to the file's printed precision; initialization uses
/// the exact value.
struct ModelConfig {
  int64_t layers = 0;
  int64_t dense_first = 0;
  int64_t d_model = 0;
  int64_t ffn_dim = 0;
  int64_t heads = 0;
  int64_t kv_heads = 0;
  int64_t head_dim = 0;
  int64_t window = 0;
  int64_t seq_len = 0;
  int64_t vocab_size = 0;
  int64_t shared_experts = 0;
  int64_t routed_experts = 0;
  int64_t active_experts = 0;
  int64_t expert_dim = 0;
  double route_scale = 1.0;
  double init_sigma = 0.0;
  double z_loss_weight = 0.0;
  double aux_alpha = 0.0;
  double rope_theta = 10000.0;
  double rms_eps = 1e-6;
  bool intra_doc_masking = false;
  BalancerKind balancer = BalancerKind::smebu;
  double balancer_gamma = 5e-4;
  double balancer_lambda = 5e-4;
  double balancer_kappa = 2.0;
  double balancer_beta = 0.5;
  // smoke-training knobs
  double lr = 3e-3;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  int64_t warmup_steps = 10;
  int64_t hold_steps = 0;

  static ModelConfig tiny();
  static ModelConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;
  void validate() const;

  double computed_init_sigma() const;
  AttentionKind attention_kind(int64_t layer) const;  // [local,local,local,global] repeating
  FfnKind ffn_kind(int64_t layer) const;              // dense for the first dense_first layers
  AttentionLayerConfig attention_config(int64_t layer) const;
  MoeConfig moe_config() const;
  int64_t moe_layer_count() const;
  /// Index into the per-MoE-layer router state list, -1 for dense layers.
  int64_t moe_slot(int64_t layer) const;
};

/// Sandwich-norm gain initialization: the input norm starts at 1, the output
/// norm at 1/sqrt(L).
struct NormGainInit {
  double first;
  double second;
};
NormGainInit init_norm_gains(int64_t layers);

struct ParamShape {
  std::string name;
  std::vector<int64_t> shape;
};

/// Parameter shapes in initialization order; no tensor is allocated.
std::vector<ParamShape> enumerate_parameter_shapes(const ModelConfig& cfg);
int64_t total_parameter_count(const ModelConfig& cfg);

/// Ordered, name-addressable parameter store.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  size_t size() const { return values_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  const Tensor& value(size_t i) const { return values_[i]; }
  void set(size_t i, Tensor value);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  size_t index_of(const std::string& name) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, size_t> index_;
};

/// Draws every matrix from TruncNormal(0, sigma^2; [-3 sigma, 3 sigma]) with
/// sigma = 0.5/sqrt(d_model); norm gains per init_norm_gains. No biases
/// exist anywhere.
ParamSet init_all_params(const ModelConfig& cfg, uint64_t seed);

/// Fresh router states (zero bias and momentum) for every MoE layer.
std::vector<RouterState> init_router_states(const ModelConfig& cfg);

/// lr * sqrt(max(1, fan_out / fan_in)).
double adjusted_lr(double lr, int64_t fan_in, int64_t fan_out);

/// y = x + RMSNorm2(sublayer(RMSNorm1(x))).
using Sublayer = std::function<Var(Tape&, Var)>;
Var sandwich_block(Tape& tape, Var x, Var gain1, Var gain2, double eps, const Sublayer& sublayer);

/// sqrt(d) * E[token] rows.
Var embed_tokens(Tape& tape, Var embedding, std::span<const int32_t> ids, int64_t d_model);

/// unembed(RMSNorm_LM(h)).
Var final_head(Tape& tape, Var h, Var lm_gain, Var unembed, double eps);

struct LossParts {
  Var loss;
  Var ce;
  Var z_term;
  Var ce_per_position;
  Var lse;
};

/// mean cross-entropy + z_weight * mean(logsumexp^2) + sum of aux losses.
LossParts training_loss(Tape& tape, Var logits, std::span<const int32_t> targets, double z_weight,
                        std::span<const Var> aux_losses);

/// Fixed-size training batch: `sequences` rows of seq_len tokens with
/// next-token targets and document ids for intra-document masking.
struct Batch {
  std::vector<int32_t> tokens;
  std::vector<int32_t> targets;
  std::vector<int32_t> doc_ids;
  int64_t sequences = 0;
  int64_t seq_len = 0;
};

struct MoeLayerRecord {
  int64_t layer = 0;
  LoadStats stats;
  double aux = 0.0;
  double max_vio_value = 0.0;
  double bias_l2 = 0.0;
  double momentum_l2 = 0.0;
};

struct ModelForwardResult {
  Var loss;
  Var ce_per_position;
  double loss_value = 0.0;
  double ce_value = 0.0;
  double z_value = 0.0;
  double aux_value = 0.0;
  double mean_abs_lse = 0.0;
  std::vector<MoeLayerRecord> moe_layers;
  std::vector<Var> param_vars;  // aligned with the ParamSet order
};

/// Full forward pass and loss on one batch. Router states are read-only
/// here; balancer updates happen between steps.
ModelForwardResult model_forward(Tape& tape, const ModelConfig& cfg, const ParamSet& params,
                                 const std::vector<RouterState>& routers, const Batch& batch);

}  // namespace trinity
