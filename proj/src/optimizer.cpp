#include "trinity/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace trinity {

namespace {

bool is_embedding(const std::string& name) {
  return name == "embed.weight" || name == "unembed.weight";
}

}  // namespace

AdamW::AdamW(const ParamSet& params, OptimizerConfig cfg) : cfg_(cfg) {
  if (cfg_.total_steps < 1 || cfg_.warmup_steps < 0 || cfg_.hold_steps < 0 ||
      cfg_.warmup_steps + cfg_.hold_steps >= cfg_.total_steps) {
    throw std::invalid_argument("AdamW: need 0 <= warmup_steps + hold_steps < total_steps");
  }
  m_.resize(params.size());
  v_.resize(params.size());
  rate_mult_.resize(params.size(), 1.0);
  decay_.resize(params.size(), false);
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.value(i);
    m_[i].assign(static_cast<size_t>(t.numel()), 0.0);
    v_[i].assign(static_cast<size_t>(t.numel()), 0.0);
    const bool gain = t.rank() == 1;
    decay_[i] = !gain;
    if (t.rank() == 2 && !is_embedding(params.name(i))) {
      rate_mult_[i] = adjusted_lr(1.0, t.dim(0), t.dim(1));
    }
  }
}

double AdamW::schedule(int64_t step_index) const {
  if (step_index < cfg_.warmup_steps) {
    return cfg_.lr * static_cast<double>(step_index + 1) / static_cast<double>(cfg_.warmup_steps);
  }
  const int64_t decay_start = cfg_.warmup_steps + cfg_.hold_steps;
  if (step_index < decay_start) return cfg_.lr;
  const double remain = static_cast<double>(cfg_.total_steps - step_index);
  const double span = static_cast<double>(cfg_.total_steps - decay_start);
  return cfg_.lr * std::max(0.0, remain / span);
}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads, int64_t step_index) {
  if (grads.size() != params.size()) throw std::invalid_argument("AdamW: gradient count mismatch");
  const double base = schedule(step_index);
  const double t = static_cast<double>(step_index + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    const double lr = base * rate_mult_[i];
    const Tensor& p = params.value(i);
    auto pd = p.data();
    auto gd = grads[i].data();
    std::vector<double> next(pd.begin(), pd.end());
    auto& m = m_[i];
    auto& v = v_[i];
    const double wd = decay_[i] ? cfg_.weight_decay : 0.0;
    for (size_t j = 0; j < next.size(); ++j) {
      const double g = gd[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      next[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * next[j]);
    }
    params.set(i, Tensor::from_data(p.shape(), std::move(next)));
  }
}

}  // namespace trinity
