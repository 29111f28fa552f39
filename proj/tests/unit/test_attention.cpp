#include <doctest.h>

#include <cmath>
#include <vector>

#include "trinity/attention.hpp"
#include "trinity/finite_diff.hpp"
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

Tensor eye(int64_t n) {
  std::vector<double> v(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
  return Tensor::from_data({n, n}, std::move(v));
}

Tensor arange_positions(int64_t t, double offset = 0.0) {
  std::vector<double> p(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) p[static_cast<size_t>(i)] = offset + static_cast<double>(i);
  return Tensor::from_data({t}, std::move(p));
}

struct TestWeights {
  Tensor wq, wk, wv, wg, wo, qg, kg;
};

TestWeights random_weights(Rng& rng, const AttentionLayerConfig& cfg, double scale) {
  return {rand_tensor(rng, {cfg.d_model, cfg.q_dim()}, scale),
          rand_tensor(rng, {cfg.d_model, cfg.kv_dim()}, scale),
          rand_tensor(rng, {cfg.d_model, cfg.kv_dim()}, scale),
          rand_tensor(rng, {cfg.d_model, cfg.q_dim()}, scale),
          rand_tensor(rng, {cfg.q_dim(), cfg.d_model}, scale),
          Tensor::full({cfg.head_dim}, 1.0),
          Tensor::full({cfg.head_dim}, 1.0)};
}

AttentionVars load_weights(Tape& t, const TestWeights& w) {
  return {t.input(w.wq), t.input(w.wk), t.input(w.wv), t.input(w.wg),
          t.input(w.wo), t.input(w.qg), t.input(w.kg)};
}

Tensor run_attention(const AttentionLayerConfig& cfg, const TestWeights& w, const Tensor& x,
                     const Tensor& mask, const Tensor& positions) {
  Tape t;
  Var xv = t.input(x);
  AttentionVars vars = load_weights(t, w);
  return t.value(attention_forward(t, xv, cfg, vars, mask, positions));
}

/// Plain multi-head attention reference with independent per-head loops;
/// used to pin the GQA degenerate case h_kv == h_q.
Tensor mha_reference(const AttentionLayerConfig& cfg, const TestWeights& w, const Tensor& x,
                     const Tensor& mask, const Tensor& positions) {
  const int64_t t_len = x.dim(0), d = cfg.d_model, dh = cfg.head_dim;
  auto matvec_block = [&](const Tensor& m, int64_t row, int64_t col0) {
    std::vector<double> out(static_cast<size_t>(dh), 0.0);
    for (int64_t c = 0; c < dh; ++c) {
      double acc = 0.0;
      for (int64_t k = 0; k < d; ++k) acc += x.at(row, k) * m.at(k, col0 + c);
      out[static_cast<size_t>(c)] = acc;
    }
    return out;
  };
  auto rms = [&](std::vector<double> v) {
    double ms = 0.0;
    for (double a : v) ms += a * a;
    ms /= static_cast<double>(v.size());
    const double inv = 1.0 / std::sqrt(ms + cfg.rms_eps);
    for (double& a : v) a *= inv;
    return v;
  };
  auto rope_vec = [&](std::vector<double> v, double pos) {
    if (cfg.kind != AttentionKind::local) return v;
    for (int64_t k = 0; k < dh / 2; ++k) {
      const double freq = std::pow(cfg.rope_theta, -2.0 * static_cast<double>(k) / static_cast<double>(dh));
      const double cs = std::cos(pos * freq), sn = std::sin(pos * freq);
      const double a = v[static_cast<size_t>(2 * k)], b = v[static_cast<size_t>(2 * k + 1)];
      v[static_cast<size_t>(2 * k)] = a * cs - b * sn;
      v[static_cast<size_t>(2 * k + 1)] = a * sn + b * cs;
    }
    return v;
  };

  std::vector<double> concat(static_cast<size_t>(t_len * cfg.q_dim()), 0.0);
  for (int64_t h = 0; h < cfg.h_q; ++h) {
    std::vector<std::vector<double>> q(static_cast<size_t>(t_len)), k(q), v(q);
    for (int64_t t = 0; t < t_len; ++t) {
      const double pos = positions.at(t);
      q[static_cast<size_t>(t)] = rope_vec(rms(matvec_block(w.wq, t, h * dh)), pos);
      k[static_cast<size_t>(t)] = rope_vec(rms(matvec_block(w.wk, t, h * dh)), pos);
      v[static_cast<size_t>(t)] = matvec_block(w.wv, t, h * dh);
    }
    for (int64_t t = 0; t < t_len; ++t) {
      std::vector<double> logits;
      std::vector<int64_t> allowed;
      for (int64_t s = 0; s < t_len; ++s) {
        if (mask.at(t, s) == 0.0) continue;
        double dot = 0.0;
        for (int64_t c = 0; c < dh; ++c) dot += q[static_cast<size_t>(t)][static_cast<size_t>(c)] * k[static_cast<size_t>(s)][static_cast<size_t>(c)];
        logits.push_back(dot / std::sqrt(static_cast<double>(dh)));
        allowed.push_back(s);
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double denom = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      std::vector<double> g = matvec_block(w.wg, t, h * dh);
      for (int64_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (size_t a = 0; a < allowed.size(); ++a) {
          acc += logits[a] / denom * v[static_cast<size_t>(allowed[a])][static_cast<size_t>(c)];
        }
        const double gate = 1.0 / (1.0 + std::exp(-g[static_cast<size_t>(c)]));
        concat[static_cast<size_t>(t * cfg.q_dim() + h * dh + c)] = acc * gate;
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(t_len * d), 0.0);
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int64_t k2 = 0; k2 < cfg.q_dim(); ++k2) acc += concat[static_cast<size_t>(t * cfg.q_dim() + k2)] * w.wo.at(k2, c);
      out[static_cast<size_t>(t * d + c)] = acc;
    }
  }
  return Tensor::from_data({t_len, d}, std::move(out));
}

}  // namespace

TEST_CASE("kv head mapping follows the ceiling formula") {
  CHECK(kv_head_index(1, 48, 8) == 1);
  CHECK(kv_head_index(6, 48, 8) == 1);
  CHECK(kv_head_index(7, 48, 8) == 2);
  CHECK(kv_head_index(48, 48, 8) == 8);
  for (int64_t i = 1; i <= 16; ++i) CHECK(kv_head_index(i, 16, 16) == i);  // MHA degenerate case
  for (int64_t i = 1; i <= 16; ++i) CHECK(kv_head_index(i, 16, 1) == 1);   // MQA degenerate case
  CHECK_THROWS_AS(kv_head_index(0, 8, 2), std::invalid_argument);
  CHECK_THROWS_AS(kv_head_index(9, 8, 2), std::invalid_argument);
  // each kv head serves exactly h_q / h_kv query heads
  std::vector<int> served(8, 0);
  for (int64_t i = 1; i <= 48; ++i) served[static_cast<size_t>(kv_head_index(i, 48, 8) - 1)] += 1;
  for (int c : served) CHECK(c == 6);
}

TEST_CASE("build_mask covers window, causal, and intra-doc cases") {
  // Positions are 0-indexed here; with T=5, w=2 the query at index 3 may
  // attend to {2, 3} (the fourth position attends to the third and fourth).
  Tensor local = build_mask({.len = 5, .kind = AttentionKind::local, .window = 2});
  for (int64_t s = 0; s < 5; ++s) CHECK(local.at(3, s) == ((s == 2 || s == 3) ? 1.0 : 0.0));
  CHECK(local.at(0, 0) == 1.0);

  Tensor wide = build_mask({.len = 6, .kind = AttentionKind::local, .window = 6});
  Tensor causal = build_mask({.len = 6, .kind = AttentionKind::global});
  CHECK(wide.same_bits(causal));
  for (int64_t t = 0; t < 6; ++t)
    for (int64_t s = 0; s < 6; ++s) CHECK(causal.at(t, s) == (s <= t ? 1.0 : 0.0));

  const std::vector<int32_t> docs = {7, 7, 9, 9};
  Tensor intra = build_mask({.len = 4, .kind = AttentionKind::global, .intra_doc = true, .doc_ids = docs});
  CHECK(intra.at(2, 0) == 0.0);
  CHECK(intra.at(2, 1) == 0.0);
  CHECK(intra.at(2, 2) == 1.0);
  CHECK(intra.at(3, 2) == 1.0);
  CHECK(intra.at(1, 0) == 1.0);
}

TEST_CASE("projected q/k heads have unit RMS under unit gains") {
  Rng rng(21);
  AttentionLayerConfig cfg{.d_model = 8, .h_q = 4, .h_kv = 2, .head_dim = 2, .kind = AttentionKind::global};
  cfg.rms_eps = 0.0;
  TestWeights w = random_weights(rng, cfg, 0.3);
  Tensor x = rand_tensor(rng, {5, 8});
  Tape t;
  AttentionVars vars = load_weights(t, w);
  ProjectedHeads heads = project_and_norm(t, t.input(x), cfg, vars);
  for (const Var& q : heads.q) {
    Tensor qt = t.value(q);
    for (int64_t row = 0; row < qt.dim(0); ++row) {
      double ms = 0.0;
      for (int64_t c = 0; c < qt.dim(1); ++c) ms += qt.at(row, c) * qt.at(row, c);
      CHECK(std::fabs(ms / static_cast<double>(qt.dim(1)) - 1.0) < 1e-9);
    }
  }
  // zero input stays zero (eps guards the division)
  cfg.rms_eps = 1e-6;
  Tape t2;
  AttentionVars vars2 = load_weights(t2, w);
  ProjectedHeads zero = project_and_norm(t2, t2.input(Tensor::zeros({3, 8})), cfg, vars2);
  for (const auto& header : {zero.q[0], zero.k[0], zero.v[0]}) {
    for (double v : t2.value(header).data()) CHECK(v == 0.0);
  }
  // RMS-normalized q is invariant to input scale (eps -> 0)
  cfg.rms_eps = 0.0;
  Tape t3;
  AttentionVars vars3 = load_weights(t3, w);
  Tensor x10 = t3.value(t3.scale(t3.constant(x), 10.0));
  ProjectedHeads h1 = project_and_norm(t3, t3.input(x), cfg, vars3);
  ProjectedHeads h10 = project_and_norm(t3, t3.input(x10), cfg, vars3);
  const Tensor a = t3.value(h1.q[1]);
  const Tensor b = t3.value(h10.q[1]);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-9));
}

TEST_CASE("rotary embedding: identity at position zero, relative-shift invariance") {
  Rng rng(31);
  Tensor x = rand_tensor(rng, {1, 8});
  Tape t;
  Var xv = t.input(x);
  Tensor rotated = t.value(t.rope(xv, Tensor::from_data({1}, {0.0}), 10000.0));
  for (int64_t i = 0; i < 8; ++i) CHECK(rotated.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));

  // <RoPE_m(q), RoPE_n(k)> == <RoPE_{m+s}(q), RoPE_{n+s}(k)>
  Tensor q = rand_tensor(rng, {1, 8});
  Tensor k = rand_tensor(rng, {1, 8});
  for (int rep = 0; rep < 10; ++rep) {
    const double m = std::floor(rng.uniform() * 50);
    const double n = std::floor(rng.uniform() * 50);
    const double s = std::floor(rng.uniform() * 50);
    auto dot_at = [&](double pm, double pn) {
      Tape tp;
      Tensor qr = tp.value(tp.rope(tp.input(q), Tensor::from_data({1}, {pm}), 10000.0));
      Tensor kr = tp.value(tp.rope(tp.input(k), Tensor::from_data({1}, {pn}), 10000.0));
      double acc = 0.0;
      for (int64_t i = 0; i < 8; ++i) acc += qr.at(i) * kr.at(i);
      return acc;
    };
    CHECK(dot_at(m, n) == doctest::Approx(dot_at(m + s, n + s)).epsilon(1e-9));
  }
}

TEST_CASE("single-position attention returns the value projection") {
  // W_G = 0 gives gates of exactly one half; W_O = 2 I undoes them.
  AttentionLayerConfig cfg{.d_model = 4, .h_q = 2, .h_kv = 2, .head_dim = 2, .kind = AttentionKind::global};
  Rng rng(41);
  TestWeights w = random_weights(rng, cfg, 0.5);
  w.wv = eye(4);
  w.wg = Tensor::zeros({4, 4});
  Tensor two_eye = Tensor::from_data({4, 4}, {2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 2});
  w.wo = two_eye;
  Tensor x = rand_tensor(rng, {1, 4});
  Tensor mask = build_mask({.len = 1, .kind = AttentionKind::global});
  Tensor out = run_attention(cfg, w, x, mask, arange_positions(1));
  for (int64_t i = 0; i < 4; ++i) CHECK(out.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));
}

TEST_CASE("uniform logits average the allowed values; saturated gates kill the output") {
  AttentionLayerConfig cfg{.d_model = 4, .h_q = 2, .h_kv = 2, .head_dim = 2,
                           .kind = AttentionKind::local, .window = 2};
  Rng rng(43);
  TestWeights w = random_weights(rng, cfg, 0.5);
  w.wq = Tensor::zeros({4, 4});  // zero queries -> equal logits over allowed positions
  w.wv = eye(4);
  w.wg = Tensor::zeros({4, 4});
  w.wo = Tensor::from_data({4, 4}, {2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 2, 0, 0, 0, 0, 2});
  Tensor x = rand_tensor(rng, {5, 4});
  Tensor mask = build_mask({.len = 5, .kind = AttentionKind::local, .window = 2});
  Tensor out = run_attention(cfg, w, x, mask, arange_positions(5));
  for (int64_t t = 1; t < 5; ++t) {
    for (int64_t c = 0; c < 4; ++c) {
      const double want = 0.5 * (x.at(t, c) + x.at(t - 1, c));
      CHECK(out.at(t, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  // strongly negative gate projections drive the output to zero
  TestWeights w2 = random_weights(rng, cfg, 0.5);
  w2.wg = Tensor::full({4, 4}, -200.0);
  Tensor ones = Tensor::full({3, 4}, 1.0);
  Tensor out2 = run_attention(cfg, w2, ones, build_mask({.len = 3, .kind = AttentionKind::local, .window = 2}),
                              arange_positions(3));
  for (double v : out2.data()) CHECK(std::fabs(v) < 1e-60);
}

TEST_CASE("causality and window locality under perturbation") {
  Rng rng(53);
  AttentionLayerConfig cfg{.d_model = 6, .h_q = 3, .h_kv = 3, .head_dim = 2,
                           .kind = AttentionKind::local, .window = 3};
  TestWeights w = random_weights(rng, cfg, 0.4);
  const int64_t t_len = 10;
  Tensor x = rand_tensor(rng, {t_len, 6});
  Tensor mask = build_mask({.len = t_len, .kind = AttentionKind::local, .window = 3});
  Tensor base = run_attention(cfg, w, x, mask, arange_positions(t_len));

  const int64_t probe = 6;
  // edits strictly after `probe` leave its output unchanged (causality)
  {
    std::vector<double> data(x.data().begin(), x.data().end());
    for (int64_t c = 0; c < 6; ++c) data[static_cast<size_t>(8 * 6 + c)] += rng.normal();
    Tensor out = run_attention(cfg, w, Tensor::from_data({t_len, 6}, std::move(data)), mask, arange_positions(t_len));
    for (int64_t c = 0; c < 6; ++c) CHECK(out.at(probe, c) == base.at(probe, c));
  }
  // edits before the window (s < t - w + 1 = 4) also leave it unchanged
  {
    std::vector<double> data(x.data().begin(), x.data().end());
    for (int64_t c = 0; c < 6; ++c) data[static_cast<size_t>(2 * 6 + c)] += rng.normal();
    Tensor out = run_attention(cfg, w, Tensor::from_data({t_len, 6}, std::move(data)), mask, arange_positions(t_len));
    for (int64_t c = 0; c < 6; ++c) CHECK(out.at(probe, c) == base.at(probe, c));
  }
  // edits inside the window do change it
  {
    std::vector<double> data(x.data().begin(), x.data().end());
    for (int64_t c = 0; c < 6; ++c) data[static_cast<size_t>(5 * 6 + c)] += 1.0 + rng.uniform();
    Tensor out = run_attention(cfg, w, Tensor::from_data({t_len, 6}, std::move(data)), mask, arange_positions(t_len));
    double diff = 0.0;
    for (int64_t c = 0; c < 6; ++c) diff += std::fabs(out.at(probe, c) - base.at(probe, c));
    CHECK(diff > 1e-9);
  }
}

TEST_CASE("GQA with h_kv == h_q reproduces plain MHA") {
  Rng rng(61);
  for (AttentionKind kind : {AttentionKind::global, AttentionKind::local}) {
    AttentionLayerConfig cfg{.d_model = 8, .h_q = 4, .h_kv = 4, .head_dim = 2, .kind = kind, .window = 3};
    TestWeights w = random_weights(rng, cfg, 0.4);
    Tensor x = rand_tensor(rng, {7, 8});
    Tensor mask = build_mask({.len = 7, .kind = kind, .window = 3});
    Tensor got = run_attention(cfg, w, x, mask, arange_positions(7));
    Tensor want = mha_reference(cfg, w, x, mask, arange_positions(7));
    for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-10));
  }
}

TEST_CASE("NoPE global layer output depends on content, not absolute position") {
  // With intra-document masking, a document's outputs are identical wherever
  // the document sits inside the packed sequence: the global layer carries no
  // positional signal and the mask hides the neighbours.
  Rng rng(71);
  AttentionLayerConfig cfg{.d_model = 6, .h_q = 3, .h_kv = 3, .head_dim = 2, .kind = AttentionKind::global};
  TestWeights w = random_weights(rng, cfg, 0.4);
  Tensor doc_a = rand_tensor(rng, {3, 6});
  Tensor doc_b = rand_tensor(rng, {4, 6});

  auto run_packed = [&](const Tensor& first, const Tensor& second, const std::vector<int32_t>& ids) {
    std::vector<double> data(first.data().begin(), first.data().end());
    data.insert(data.end(), second.data().begin(), second.data().end());
    const int64_t t_len = first.dim(0) + second.dim(0);
    Tensor mask = build_mask({.len = t_len, .kind = AttentionKind::global, .intra_doc = true, .doc_ids = ids});
    return run_attention(cfg, w, Tensor::from_data({t_len, 6}, std::move(data)), mask, arange_positions(t_len));
  };
  Tensor ab = run_packed(doc_a, doc_b, {0, 0, 0, 1, 1, 1, 1});
  Tensor ba = run_packed(doc_b, doc_a, {1, 1, 1, 1, 0, 0, 0});
  // doc_b occupies rows [3,7) in the first packing and [0,4) in the second
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t c = 0; c < 6; ++c) {
      CHECK(ab.at(3 + r, c) == doctest::Approx(ba.at(r, c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("gated attention block passes the finite-difference oracle") {
  Rng rng(81);
  AttentionLayerConfig cfg{.d_model = 4, .h_q = 2, .h_kv = 2, .head_dim = 2,
                           .kind = AttentionKind::local, .window = 2};
  const int64_t t_len = 3;
  Tensor mask = build_mask({.len = t_len, .kind = AttentionKind::local, .window = 2});
  Tensor positions = arange_positions(t_len);
  std::vector<Tensor> xs = {
      rand_tensor(rng, {t_len, 4}),
      rand_tensor(rng, {4, 4}, 0.5), rand_tensor(rng, {4, 4}, 0.5), rand_tensor(rng, {4, 4}, 0.5),
      rand_tensor(rng, {4, 4}, 0.5), rand_tensor(rng, {4, 4}, 0.5),
      Tensor::full({2}, 1.0), Tensor::full({2}, 1.0),
  };
  MultiTapeFn fn = [&](Tape& t, std::span<const Var> v) {
    AttentionVars vars{v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
    Var u = attention_forward(t, v[0], cfg, vars, mask, positions);
    return t.mean(t.mul(u, u));
  };
  CHECK(finite_difference_check(fn, xs, 1e-4) < 1e-4);
}
