#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "trinity/model.hpp"

namespace trinity {

namespace {

std::string balancer_name(BalancerKind k) {
  switch (k) {
    case BalancerKind::none: return "none";
    case BalancerKind::sign: return "sign";
    case BalancerKind::smebu: return "smebu";
  }
  return "?";
}

BalancerKind parse_balancer(const std::string& s) {
  if (s == "none") return BalancerKind::none;
  if (s == "sign") return BalancerKind::sign;
  if (s == "smebu") return BalancerKind::smebu;
  throw std::runtime_error("config: unknown balancer '" + s + "'");
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::runtime_error("config: expected boolean, got '" + s + "'");
}

}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.layers = 8;
  c.dense_first = 2;
  c.d_model = 64;
  c.ffn_dim = 128;
  c.heads = 8;
  c.kv_heads = 2;
  c.head_dim = 8;
  c.window = 16;
  c.seq_len = 64;
  c.vocab_size = 512;
  c.shared_experts = 1;
  c.routed_experts = 16;
  c.active_experts = 2;
  c.expert_dim = 64;
  c.route_scale = 1.414;
  c.init_sigma = 0.0625;  // 0.5 / sqrt(64), exact
  c.z_loss_weight = 1e-6;
  c.aux_alpha = 1e-4;
  c.intra_doc_masking = true;
  c.balancer = BalancerKind::smebu;
  c.balancer_lambda = 5e-3;  // toy load scale: a few hundred tokens per step
  c.lr = 3e-3;
  c.weight_decay = 0.1;
  c.adam_eps = 1e-3;
  c.warmup_steps = 10;
  c.hold_steps = 50;
  c.validate();
  return c;
}

double ModelConfig::computed_init_sigma() const {
  return 0.5 / std::sqrt(static_cast<double>(d_model));
}

void ModelConfig::validate() const {
  auto positive = [](int64_t v, const char* name) {
    if (v <= 0) throw std::runtime_error(std::string("config: ") + name + " must be positive");
  };
  positive(layers, "layers");
  positive(d_model, "d_model");
  positive(ffn_dim, "ffn_dim");
  positive(heads, "heads");
  positive(kv_heads, "kv_heads");
  positive(head_dim, "head_dim");
  positive(seq_len, "seq_len");
  positive(vocab_size, "vocab_size");
  if (dense_first < 0 || dense_first > layers) {
    throw std::runtime_error("config: dense_first must lie in [0, layers]");
  }
  if (heads % kv_heads != 0) throw std::runtime_error("config: heads must be divisible by kv_heads");
  if (dense_first < layers) {
    positive(routed_experts, "routed_experts");
    positive(expert_dim, "expert_dim");
    if (active_experts < 1 || active_experts > routed_experts) {
      throw std::runtime_error("config: active_experts must lie in [1, routed_experts]");
    }
    if (shared_experts < 0) throw std::runtime_error("config: shared_experts must be >= 0");
    if (route_scale <= 0) throw std::runtime_error("config: route_scale must be positive");
  }
  if (z_loss_weight < 0 || aux_alpha < 0) throw std::runtime_error("config: loss weights must be >= 0");
  // Any depth >= 1 starts with a local layer, which needs a window and an
  // even head_dim for the rotary pairs.
  if (window < 1) throw std::runtime_error("config: window must be >= 1");
  if (head_dim % 2 != 0) throw std::runtime_error("config: head_dim must be even");
  const double sigma = computed_init_sigma();
  if (init_sigma > 0 && std::fabs(init_sigma - sigma) > 5e-4) {
    throw std::runtime_error("config: init_sigma " + std::to_string(init_sigma) +
                             " is not 0.5/sqrt(d_model) = " + std::to_string(sigma) + " within rounding");
  }
}

AttentionKind ModelConfig::attention_kind(int64_t layer) const {
  return layer % 4 < 3 ? AttentionKind::local : AttentionKind::global;
}

FfnKind ModelConfig::ffn_kind(int64_t layer) const {
  return layer < dense_first ? FfnKind::dense : FfnKind::moe;
}

AttentionLayerConfig ModelConfig::attention_config(int64_t layer) const {
  AttentionLayerConfig a;
  a.d_model = d_model;
  a.h_q = heads;
  a.h_kv = kv_heads;
  a.head_dim = head_dim;
  a.kind = attention_kind(layer);
  a.window = window;
  a.rope_theta = rope_theta;
  a.rms_eps = rms_eps;
  return a;
}

MoeConfig ModelConfig::moe_config() const {
  MoeConfig m;
  m.d_model = d_model;
  m.n_routed = routed_experts;
  m.n_shared = shared_experts;
  m.k_active = active_experts;
  m.expert_dim = expert_dim;
  m.route_scale = route_scale;
  m.aux_alpha = aux_alpha;
  return m;
}

int64_t ModelConfig::moe_layer_count() const { return layers - dense_first; }

int64_t ModelConfig::moe_slot(int64_t layer) const {
  return layer < dense_first ? -1 : layer - dense_first;
}

ModelConfig ModelConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::unordered_map<std::string, std::string> kv;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char c : line) {
        if (!isspace(static_cast<unsigned char>(c))) blank = false;
      }
      if (blank) continue;
      throw std::runtime_error("config: " + path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  ModelConfig c;
  auto take_int = [&](const char* key, int64_t& out, bool required = true) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw std::runtime_error("config: " + path + ": missing field '" + key + "'");
      return;
    }
    out = std::stoll(it->second);
    kv.erase(it);
  };
  auto take_double = [&](const char* key, double& out, bool required = true) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw std::runtime_error("config: " + path + ": missing field '" + key + "'");
      return;
    }
    out = std::stod(it->second);
    kv.erase(it);
  };
  take_int("layers", c.layers);
  take_int("dense_first", c.dense_first);
  take_int("d_model", c.d_model);
  take_int("ffn_dim", c.ffn_dim);
  take_int("heads", c.heads);
  take_int("kv_heads", c.kv_heads);
  take_int("head_dim", c.head_dim);
  take_int("window", c.window);
  take_int("seq_len", c.seq_len);
  take_int("vocab_size", c.vocab_size);
  take_int("shared_experts", c.shared_experts);
  take_int("routed_experts", c.routed_experts);
  take_int("active_experts", c.active_experts);
  take_int("expert_dim", c.expert_dim);
  take_double("route_scale", c.route_scale);
  take_double("init_sigma", c.init_sigma);
  take_double("z_loss_weight", c.z_loss_weight, false);
  take_double("aux_alpha", c.aux_alpha, false);
  take_double("rope_theta", c.rope_theta, false);
  take_double("rms_eps", c.rms_eps, false);
  take_double("balancer_gamma", c.balancer_gamma, false);
  take_double("balancer_lambda", c.balancer_lambda, false);
  take_double("balancer_kappa", c.balancer_kappa, false);
  take_double("balancer_beta", c.balancer_beta, false);
  take_double("lr", c.lr, false);
  take_double("weight_decay", c.weight_decay, false);
  take_double("adam_eps", c.adam_eps, false);
  take_int("warmup_steps", c.warmup_steps, false);
  take_int("hold_steps", c.hold_steps, false);
  if (auto it = kv.find("intra_doc_masking"); it != kv.end()) {
    c.intra_doc_masking = parse_bool(it->second);
    kv.erase(it);
  }
  if (auto it = kv.find("balancer"); it != kv.end()) {
    c.balancer = parse_balancer(it->second);
    kv.erase(it);
  }
  if (!kv.empty()) {
    throw std::runtime_error("config: " + path + ": unknown field '" + kv.begin()->first + "'");
  }
  c.validate();
  return c;
}

void ModelConfig::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot open " + path + " for writing");
  std::ostringstream s;
  s << "layers = " << layers << "\n"
    << "dense_first = " << dense_first << "\n"
    << "d_model = " << d_model << "\n"
    << "ffn_dim = " << ffn_dim << "\n"
    << "heads = " << heads << "\n"
    << "kv_heads = " << kv_heads << "\n"
    << "head_dim = " << head_dim << "\n"
    << "window = " << window << "\n"
    << "seq_len = " << seq_len << "\n"
    << "vocab_size = " << vocab_size << "\n"
    << "shared_experts = " << shared_experts << "\n"
    << "routed_experts = " << routed_experts << "\n"
    << "active_experts = " << active_experts << "\n"
    << "expert_dim = " << expert_dim << "\n"
    << "route_scale = " << route_scale << "\n"
    << "init_sigma = " << init_sigma << "\n"
    << "z_loss_weight = " << z_loss_weight << "\n"
    << "aux_alpha = " << aux_alpha << "\n"
    << "rope_theta = " << rope_theta << "\n"
    << "rms_eps = " << rms_eps << "\n"
    << "intra_doc_masking = " << (intra_doc_masking ? "true" : "false") << "\n"
    << "balancer = " << balancer_name(balancer) << "\n"
    << "balancer_gamma = " << balancer_gamma << "\n"
    << "balancer_lambda = " << balancer_lambda << "\n"
    << "balancer_kappa = " << balancer_kappa << "\n"
    << "balancer_beta = " << balancer_beta << "\n"
    << "lr = " << lr << "\n"
    << "weight_decay = " << weight_decay << "\n"
    << "adam_eps = " << adam_eps << "\n"
    << "warmup_steps = " << warmup_steps << "\n"
    << "hold_steps = " << hold_steps << "\n";
  out << s.str();
}

}  // namespace trinity
