#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "trinity/finite_diff.hpp"
#include "trinity/moe.hpp"
#include "trinity/rng.hpp"

using namespace trinity;

namespace {

Tensor rand_tensor(Rng& rng, std::vector<int64_t> shape, double scale = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v));
}

struct HostMoe {
  MoeConfig cfg;
  Tensor router;
  std::vector<std::array<Tensor, 3>> shared, experts;  // gate, up, down
};

HostMoe random_moe(Rng& rng, MoeConfig cfg, double scale = 0.4) {
  HostMoe m;
  m.cfg = cfg;
  m.router = rand_tensor(rng, {cfg.d_model, cfg.n_routed}, scale);
  for (int64_t i = 0; i < cfg.n_shared; ++i) {
    m.shared.push_back({rand_tensor(rng, {cfg.d_model, cfg.expert_dim}, scale),
                        rand_tensor(rng, {cfg.d_model, cfg.expert_dim}, scale),
                        rand_tensor(rng, {cfg.expert_dim, cfg.d_model}, scale)});
  }
  for (int64_t i = 0; i < cfg.n_routed; ++i) {
    m.experts.push_back({rand_tensor(rng, {cfg.d_model, cfg.expert_dim}, scale),
                         rand_tensor(rng, {cfg.d_model, cfg.expert_dim}, scale),
                         rand_tensor(rng, {cfg.expert_dim, cfg.d_model}, scale)});
  }
  return m;
}

MoeVars load_moe(Tape& t, const HostMoe& m) {
  MoeVars v;
  v.router = t.input(m.router);
  for (const auto& s : m.shared) v.shared.push_back({t.input(s[0]), t.input(s[1]), t.input(s[2])});
  for (const auto& e : m.experts) v.experts.push_back({t.input(e[0]), t.input(e[1]), t.input(e[2])});
  return v;
}

/// Brute-force oracle: stable sort by (biased score desc, index asc).
std::vector<int32_t> topk_sort_oracle(std::span<const double> scores, std::span<const double> bias, int64_t k) {
  std::vector<int32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    const double va = scores[static_cast<size_t>(a)] + bias[static_cast<size_t>(a)];
    const double vb = scores[static_cast<size_t>(b)] + bias[static_cast<size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  std::vector<int32_t> out(order.begin(), order.begin() + static_cast<ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("router scores are sigmoids of dot products") {
  MoeConfig cfg{.d_model = 4, .n_routed = 3, .n_shared = 0, .k_active = 1, .expert_dim = 4};
  Rng rng(1);
  HostMoe m = random_moe(rng, cfg);
  // u orthogonal to a router column gives score exactly one half
  m.router = Tensor::from_data({4, 3}, {0, 1, 1,
                                        0, 1, -1,
                                        0, 0, 1,
                                        0, 1, 0});
  Tape t;
  MoeVars v = load_moe(t, m);
  Var u = t.input(Tensor::from_data({1, 4}, {1, 2, 3, 4}));
  Tensor s = t.value(t.sigmoid(t.matmul(u, v.router)));
  CHECK(s.at(0) == 0.5);  // first column is zero: u^T e = 0
  for (int64_t i = 0; i < s.numel(); ++i) {
    CHECK(s.at(i) > 0.0);
    CHECK(s.at(i) < 1.0);
  }
}

TEST_CASE("top-k selection: examples, dominance, and sort oracle") {
  const std::vector<double> s = {0.9, 0.1, 0.5, 0.4};
  const std::vector<double> zero_bias(4, 0.0);
  CHECK(select_topk(s, zero_bias, 2) == std::vector<int32_t>{0, 2});  // experts 1 and 3, 1-indexed

  std::vector<double> strong_bias = {0, 100.0, 0, 0};
  for (int rep = 0; rep < 20; ++rep) {
    Rng rng(static_cast<uint64_t>(rep));
    std::vector<double> rs(4);
    for (double& x : rs) x = rng.uniform();
    auto sel = select_topk(rs, strong_bias, 2);
    CHECK(std::find(sel.begin(), sel.end(), 1) != sel.end());  // bias dominance
  }

  CHECK(select_topk(s, zero_bias, 4) == std::vector<int32_t>{0, 1, 2, 3});  // K == N

  // ties break toward the lowest expert index
  const std::vector<double> tied = {0.5, 0.7, 0.7, 0.5};
  CHECK(select_topk(tied, zero_bias, 3) == std::vector<int32_t>{0, 1, 2});

  Rng rng(99);
  for (int rep = 0; rep < 2000; ++rep) {
    const int64_t n = 2 + static_cast<int64_t>(rng.uniform_below(31));
    const int64_t k = 1 + static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(n)));
    std::vector<double> scores(static_cast<size_t>(n)), bias(static_cast<size_t>(n));
    for (double& x : scores) x = rng.uniform();
    for (double& x : bias) x = 0.1 * rng.normal();
    CHECK(select_topk(scores, bias, k) == topk_sort_oracle(scores, bias, k));
  }

  // selection is invariant to a constant added to every biased logit
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> scores(8), bias(8), shifted(8);
    for (double& x : scores) x = rng.uniform();
    for (size_t i = 0; i < 8; ++i) bias[i] = 0.05 * rng.normal();
    const double c = rng.normal();
    for (size_t i = 0; i < 8; ++i) shifted[i] = bias[i] + c;
    CHECK(select_topk(scores, bias, 3) == select_topk(scores, shifted, 3));
  }
}

TEST_CASE("gate normalization") {
  const std::vector<double> s = {0.9, 0.1, 0.5, 0.4};
  auto g = normalize_gates(s, std::vector<int32_t>{0, 2});
  CHECK(g[0] == doctest::Approx(9.0 / 14.0).epsilon(1e-12));
  CHECK(g[1] == 0.0);
  CHECK(g[2] == doctest::Approx(5.0 / 14.0).epsilon(1e-12));
  CHECK(g[3] == 0.0);

  auto one = normalize_gates(s, std::vector<int32_t>{3});
  CHECK(one[3] == 1.0);

  auto even = normalize_gates(std::vector<double>{0.3, 0.3}, std::vector<int32_t>{0, 1});
  CHECK(even[0] == 0.5);
  CHECK(even[1] == 0.5);

  // gate rows sum to one over random rows
  Rng rng(7);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> scores(16);
    for (double& x : scores) x = 1.0 / (1.0 + std::exp(-rng.normal()));
    std::vector<double> bias(16, 0.0);
    auto sel = select_topk(scores, bias, 4);
    auto gates = normalize_gates(scores, sel);
    double total = 0.0;
    for (double x : gates) total += x;
    CHECK(std::fabs(total - 1.0) <= 1e-10);
  }
}

TEST_CASE("swiglu expert behavior") {
  Rng rng(17);
  MoeConfig cfg{.d_model = 4, .n_routed = 1, .n_shared = 0, .k_active = 1, .expert_dim = 6};
  Tape t;
  SwigluVars w{t.input(rand_tensor(rng, {4, 6})), t.input(rand_tensor(rng, {4, 6})),
               t.input(rand_tensor(rng, {6, 4}))};
  Tensor zero_out = t.value(swiglu(t, t.input(Tensor::zeros({2, 4})), w));
  for (double v : zero_out.data()) CHECK(v == 0.0);

  SwigluVars zero_up{w.gate, t.input(Tensor::zeros({4, 6})), w.down};
  Tensor gated_out = t.value(swiglu(t, t.input(rand_tensor(rng, {2, 4})), zero_up));
  for (double v : gated_out.data()) CHECK(v == 0.0);

  MultiTapeFn fn = [](Tape& tp, std::span<const Var> v) {
    SwigluVars sw{v[1], v[2], v[3]};
    Var y = swiglu(tp, v[0], sw);
    return tp.mean(tp.mul(y, y));
  };
  std::vector<Tensor> xs = {rand_tensor(rng, {3, 4}), rand_tensor(rng, {4, 6}, 0.5),
                            rand_tensor(rng, {4, 6}, 0.5), rand_tensor(rng, {6, 4}, 0.5)};
  CHECK(finite_difference_check(fn, xs, 1e-4) < 1e-4);
  (void)cfg;
}

TEST_CASE("moe_forward: residual passthrough, single-expert gate, load counting") {
  Rng rng(23);
  MoeConfig cfg{.d_model = 4, .n_routed = 4, .n_shared = 1, .k_active = 2, .expert_dim = 4,
                .route_scale = 1.7, .aux_alpha = 1e-4};
  HostMoe m = random_moe(rng, cfg);
  // zero expert weights: output equals the input
  for (auto& e : m.experts) e = {Tensor::zeros({4, 4}), Tensor::zeros({4, 4}), Tensor::zeros({4, 4})};
  for (auto& s : m.shared) s = {Tensor::zeros({4, 4}), Tensor::zeros({4, 4}), Tensor::zeros({4, 4})};
  Tensor u = rand_tensor(rng, {6, 4});
  {
    Tape t;
    MoeVars v = load_moe(t, m);
    auto res = moe_forward(t, t.input(u), cfg, v, RouterState::zeros(4), 6);
    CHECK(t.value(res.output).same_bits(u));
    int64_t total = 0;
    for (int64_t c : res.stats.counts) total += c;
    CHECK(total == 6 * cfg.k_active);
  }
  // one routed expert: its gate is exactly one
  {
    MoeConfig cfg1{.d_model = 4, .n_routed = 1, .n_shared = 1, .k_active = 1, .expert_dim = 4,
                   .route_scale = 2.0, .aux_alpha = 0.0};
    HostMoe m1 = random_moe(rng, cfg1);
    Tape t;
    MoeVars v = load_moe(t, m1);
    Var uv = t.input(u);
    auto res = moe_forward(t, uv, cfg1, v, RouterState::zeros(1), 6);
    // reference: u + shared(u) + route_scale * expert(u)
    SwigluVars sh = v.shared[0], ex = v.experts[0];
    Tensor want = t.value(t.add(t.add(uv, swiglu(t, uv, sh)), t.scale(swiglu(t, uv, ex), 2.0)));
    Tensor got = t.value(res.output);
    for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("bias steers selection but never leaks into the output") {
  Rng rng(29);
  MoeConfig cfg{.d_model = 6, .n_routed = 8, .n_shared = 1, .k_active = 2, .expert_dim = 6,
                .route_scale = 1.3, .aux_alpha = 1e-4};
  HostMoe m = random_moe(rng, cfg);
  Tensor u = rand_tensor(rng, {5, 6});

  RouterState a = RouterState::zeros(8);
  RouterState b = RouterState::zeros(8);
  for (double& x : b.bias) x = 0.37;  // constant offset: same selection sets

  Tape ta, tb;
  MoeVars va = load_moe(ta, m);
  MoeVars vb = load_moe(tb, m);
  auto ra = moe_forward(ta, ta.input(u), cfg, va, a, 5);
  auto rb = moe_forward(tb, tb.input(u), cfg, vb, b, 5);
  CHECK(ra.selected == rb.selected);
  CHECK(ta.value(ra.output).same_bits(tb.value(rb.output)));  // exact, not approximate
}

TEST_CASE("sign-based bias update") {
  RouterState s = RouterState::zeros(2);
  s.gamma = 0.01;
  // balanced load: no movement
  bias_update_sign(s, {{3, 3}, 6, 1});
  CHECK(s.bias[0] == 0.0);
  CHECK(s.bias[1] == 0.0);
  // n = [2, 0]: deltas are -gamma and +gamma, centered sum stays zero
  bias_update_sign(s, {{2, 0}, 2, 1});
  CHECK(s.bias[0] == doctest::Approx(-0.01).epsilon(1e-12));
  CHECK(s.bias[1] == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(std::fabs(s.bias[0] + s.bias[1]) <= 1e-15);

  // per-step movement is bounded by 2 gamma after centering
  Rng rng(5);
  RouterState w = RouterState::zeros(8);
  w.gamma = 5e-4;
  for (int step = 0; step < 200; ++step) {
    std::vector<double> before = w.bias;
    LoadStats st;
    st.counts.resize(8);
    st.k_active = 2;
    for (auto& c : st.counts) c = static_cast<int64_t>(rng.uniform_below(100));
    bias_update_sign(w, st);
    double sum = 0.0;
    for (size_t i = 0; i < 8; ++i) {
      CHECK(std::fabs(w.bias[i] - before[i]) <= 2.0 * w.gamma + 1e-15);
      sum += w.bias[i];
    }
    CHECK(std::fabs(sum) <= 1e-9);
  }
}

TEST_CASE("smebu bias update") {
  // balanced load with zero momentum: bit-identical fixed point
  RouterState s = RouterState::zeros(4);
  RouterState before = s;
  bias_update_smebu(s, {{5, 5, 5, 5}, 20, 1});
  CHECK(s.bias == before.bias);
  CHECK(s.momentum == before.momentum);

  // fully starved expert: violation 1, tanh(kappa) at kappa = 2
  RouterState t = RouterState::zeros(2);
  t.beta = 0.0;  // momentum off isolates the clamped delta
  bias_update_smebu(t, {{0, 8}, 8, 1});
  // v = (4 - 0)/4 = 1 -> tanh(2) = 0.96402758...; centered against the other expert
  const double tanh2 = std::tanh(2.0);
  CHECK(tanh2 == doctest::Approx(0.9640275800758169).epsilon(1e-12));
  const double other = std::tanh(2.0 * (4.0 - 8.0) / 4.0);  // tanh(-2)
  const double centered = t.lambda * (tanh2 - 0.5 * (tanh2 + other));
  CHECK(t.bias[0] == doctest::Approx(centered).epsilon(1e-12));

  // large kappa recovers the sign direction
  RouterState k = RouterState::zeros(3);
  k.kappa = 1e6;
  k.beta = 0.0;
  bias_update_smebu(k, {{1, 5, 3}, 9, 1});
  CHECK(k.bias[0] > 0.0);  // under-loaded: bias pushed up
  CHECK(k.bias[1] < 0.0);  // over-loaded: pushed down

  // no tokens routed: update skipped, state unchanged
  RouterState z = RouterState::zeros(3);
  z.momentum = {0.1, -0.1, 0.0};
  RouterState zc = z;
  bias_update_smebu(z, {{0, 0, 0}, 0, 1});
  CHECK(z.bias == zc.bias);
  CHECK(z.momentum == zc.momentum);
}

TEST_CASE("sequence-wise auxiliary loss") {
  // Rotated one-hot-ish scores: uniform selection and uniform mass -> L = alpha.
  const int64_t n = 4, t_len = 4;
  MoeConfig cfg{.d_model = 2, .n_routed = n, .n_shared = 0, .k_active = 1, .expert_dim = 2,
                .route_scale = 1.0, .aux_alpha = 1e-3};
  std::vector<double> srows;
  const std::vector<double> base = {0.9, 0.1, 0.2, 0.3};
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t e = 0; e < n; ++e) srows.push_back(base[static_cast<size_t>((e - t + n) % n)]);
  }
  // Feed scores through a crafted router so moe_forward computes them: easier
  // to validate the loss directly with the same formula on a tape.
  Tape tape;
  Var scores = tape.input(Tensor::from_data({t_len, n}, srows));
  // selection = argmax per row = rotated identity; f_i = N/(K*T) * 1 = 1
  Tensor ones = Tensor::full({t_len, n}, 1.0);
  Var snorm = tape.masked_row_norm(scores, ones);
  std::vector<double> f_rows(static_cast<size_t>(t_len * n), 1.0);
  Var weighted = tape.mul(snorm, tape.constant(Tensor::from_data({t_len, n}, f_rows)));
  const double alpha = 1e-3;
  Var loss = tape.scale(tape.sum(weighted), alpha / static_cast<double>(t_len));
  CHECK(tape.value(loss).scalar_value() == doctest::Approx(alpha).epsilon(1e-12));
}

TEST_CASE("moe_forward aux loss: uniform vs collapsed routing") {
  Rng rng(31);
  MoeConfig cfg{.d_model = 4, .n_routed = 4, .n_shared = 0, .k_active = 1, .expert_dim = 4,
                .route_scale = 1.0, .aux_alpha = 1e-2};
  HostMoe m = random_moe(rng, cfg);
  Tensor u = rand_tensor(rng, {8, 4});

  // all tokens forced to expert 0 via a dominant bias
  RouterState collapse = RouterState::zeros(4);
  collapse.bias[0] = 100.0;
  Tape t1;
  MoeVars v1 = load_moe(t1, m);
  auto r1 = moe_forward(t1, t1.input(u), cfg, v1, collapse, 8);
  // f = [N, 0, 0, 0] -> L = alpha * N * P_0
  double p0 = 0.0;
  for (int64_t row = 0; row < 8; ++row) {
    double denom = 0.0;
    for (int64_t e = 0; e < 4; ++e) denom += r1.scores.at(row, e);
    p0 += r1.scores.at(row, 0) / denom;
  }
  p0 /= 8.0;
  CHECK(t1.value(r1.aux_loss).scalar_value() == doctest::Approx(cfg.aux_alpha * 4.0 * p0).epsilon(1e-9));

  // alpha = 0 -> exactly zero
  MoeConfig cfg0 = cfg;
  cfg0.aux_alpha = 0.0;
  Tape t2;
  MoeVars v2 = load_moe(t2, m);
  auto r2 = moe_forward(t2, t2.input(u), cfg0, v2, RouterState::zeros(4), 8);
  CHECK(t2.value(r2.aux_loss).scalar_value() == 0.0);
}

TEST_CASE("seq aux loss gradient matches finite differences with frozen selection") {
  Rng rng(37);
  MoeConfig cfg{.d_model = 4, .n_routed = 6, .n_shared = 1, .k_active = 2, .expert_dim = 4,
                .route_scale = 1.4, .aux_alpha = 1e-2};
  HostMoe m = random_moe(rng, cfg, 0.3);
  Tensor u = rand_tensor(rng, {4, 4});
  RouterState state = RouterState::zeros(6);

  // pin the selection once so perturbed evaluations keep the same expert sets
  std::vector<std::vector<int32_t>> frozen;
  {
    Tape t;
    MoeVars mv = load_moe(t, m);
    frozen = moe_forward(t, t.input(u), cfg, mv, state, 4).selected;
  }

  MultiTapeFn fn = [&](Tape& t, std::span<const Var> v) {
    MoeVars mv;
    mv.router = v[1];
    mv.shared.push_back({v[2], v[3], v[4]});
    for (size_t e = 0; e < 6; ++e) {
      mv.experts.push_back({v[5 + 3 * e], v[6 + 3 * e], v[7 + 3 * e]});
    }
    auto res = moe_forward(t, v[0], cfg, mv, state, 4, &frozen);
    return t.add(t.mean(t.mul(res.output, res.output)), res.aux_loss);
  };
  std::vector<Tensor> xs = {u, m.router, m.shared[0][0], m.shared[0][1], m.shared[0][2]};
  for (const auto& e : m.experts) {
    xs.push_back(e[0]);
    xs.push_back(e[1]);
    xs.push_back(e[2]);
  }
  CHECK(finite_difference_check(fn, xs, 1e-4) < 1e-4);
}

TEST_CASE("max_vio closed forms") {
  CHECK(max_vio(std::vector<double>{3, 3, 3}) == 0.0);
  CHECK(max_vio(std::vector<double>{2, 1, 1}) == doctest::Approx(0.5).epsilon(1e-12));
  // one hot expert holding all tokens among N experts
  for (int n : {4, 16}) {
    std::vector<double> loads(static_cast<size_t>(n), 0.0);
    loads[0] = 100.0;
    CHECK(max_vio(loads) == doctest::Approx(static_cast<double>(n - 1)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(max_vio(std::vector<double>{0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(max_vio(std::vector<double>{}), std::invalid_argument);
}
