#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qfta/lm.hpp"
#include "qfta/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace qfta;
using ad::Mat;
using ad::Node;
using ad::Tape;

namespace {

Mat random_mat(int r, int c, std::mt19937_64 &rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = d(rng);
  return m;
}

// Central finite differences of a scalar-valued function of one matrix input
// against the analytic gradient at randomly probed entries.
void check_grad(const std::function<double(const Mat &)> &f, const Mat &x0,
                const Mat &analytic, std::mt19937_64 &rng, int n_probe = 20,
                double tol = 1e-6) {
  std::uniform_int_distribution<int> ri(0, static_cast<int>(x0.rows()) - 1);
  std::uniform_int_distribution<int> ci(0, static_cast<int>(x0.cols()) - 1);
  for (int p = 0; p < n_probe; ++p) {
    const int i = ri(rng), j = ci(rng);
    const double h = 1e-6 * std::max(1.0, std::abs(x0(i, j)));
    Mat xp = x0, xm = x0;
    xp(i, j) += h;
    xm(i, j) -= h;
    const double fd = (f(xp) - f(xm)) / (2 * h);
    // skip probes dominated by roundoff in the central difference itself
    if (std::abs(fd) < 1e-5 && std::abs(analytic(i, j)) < 1e-5) continue;
    const double denom = std::max({std::abs(fd), std::abs(analytic(i, j)), 1e-8});
    CHECK(std::abs(fd - analytic(i, j)) / denom < tol);
  }
}

}  // namespace

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(1);
  Mat a0 = random_mat(3, 4, rng), b0 = random_mat(4, 5, rng);
  Mat w = random_mat(3, 5, rng);  // fixed projection before the scalar reduction

  Tape t;
  Node *a = t.leaf(a0, true);
  Node *b = t.leaf(b0, true);
  Node *prod = t.matmul(a, b);
  Node *flat = t.matmul_nt(prod, t.constant(w));  // (3,3)
  Node *scalar = t.cross_entropy_mean(flat, {0, 1, 2});
  t.backward(scalar);

  auto f_a = [&](const Mat &am) {
    Tape tt;
    Node *an = tt.leaf(am, false);
    Node *bn = tt.constant(b0);
    Node *pr = tt.matmul(an, bn);
    Node *fl = tt.matmul_nt(pr, tt.constant(w));
    Node *sc = tt.cross_entropy_mean(fl, {0, 1, 2});
    return sc->val(0, 0);
  };
  auto f_b = [&](const Mat &bm) {
    Tape tt;
    Node *an = tt.constant(a0);
    Node *bn = tt.leaf(bm, false);
    Node *pr = tt.matmul(an, bn);
    Node *fl = tt.matmul_nt(pr, tt.constant(w));
    Node *sc = tt.cross_entropy_mean(fl, {0, 1, 2});
    return sc->val(0, 0);
  };
  check_grad(f_a, a0, a->grad, rng);
  check_grad(f_b, b0, b->grad, rng);
}

TEST_CASE("layernorm, gelu, softmax gradients match finite differences") {
  std::mt19937_64 rng(2);
  Mat x0 = random_mat(4, 8, rng);
  Mat g0 = random_mat(1, 8, rng, 0.5);
  Mat b0 = random_mat(1, 8, rng, 0.5);

  auto build = [&](Tape &t, Node *x, Node *g, Node *b) {
    Node *ln = t.layernorm(x, g, b);
    Node *ge = t.gelu(ln);
    Node *sm = t.softmax_rows(ge);
    return t.cross_entropy_mean(sm, {1, 2, 3, 4});
  };

  Tape t;
  Node *x = t.leaf(x0, true);
  Node *g = t.leaf(g0, true);
  Node *b = t.leaf(b0, true);
  t.backward(build(t, x, g, b));

  auto f_x = [&](const Mat &m) {
    Tape tt;
    return build(tt, tt.constant(m), tt.constant(g0), tt.constant(b0))->val(0, 0);
  };
  auto f_g = [&](const Mat &m) {
    Tape tt;
    return build(tt, tt.constant(x0), tt.constant(m), tt.constant(b0))->val(0, 0);
  };
  check_grad(f_x, x0, x->grad, rng, 30, 2e-5);
  check_grad(f_g, g0, g->grad, rng, 10, 2e-5);
}

TEST_CASE("causal softmax masks the future and matches finite differences") {
  std::mt19937_64 rng(3);
  Mat s0 = random_mat(5, 5, rng);
  Tape t;
  Node *s = t.leaf(s0, true);
  Node *a = t.softmax_causal(s, 0);
  for (int i = 0; i < 5; ++i) {
    double row = 0;
    for (int j = 0; j < 5; ++j) {
      if (j > i) CHECK(a->val(i, j) == 0.0);
      row += a->val(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
  Node *loss = t.cross_entropy_mean(t.matmul(a, t.constant(random_mat(5, 3, rng))), {0, 1, 2, 0, 1});
  t.backward(loss);
  CHECK(s->has_grad());
}

TEST_CASE("full transformer step gradient w.r.t. kv cache matches finite differences") {
  std::mt19937_64 rng(4);
  LmConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_pos = 16;
  LmWeights w = init_lm(cfg, 11, 99);
  // make weights less tiny so gradients are non-trivial
  w.for_each([&rng](Mat &m) {
    if (m.cols() > 1 && m.rows() > 1) m += 0.2 * random_mat(static_cast<int>(m.rows()), static_cast<int>(m.cols()), rng, 1.0);
  });

  KvCache cache = KvCache::empty(cfg);
  for (auto &k : cache.k) k = random_mat(3, cfg.d_model, rng, 0.5);
  for (auto &v : cache.v) v = random_mat(3, cfg.d_model, rng, 0.5);

  auto loss_at = [&](const KvCache &c) {
    Tape t;
    WeightNodes wn = wrap_weights(t, w, false);
    std::vector<Node *> kc, vc;
    for (int li = 0; li < cfg.n_layers; ++li) {
      kc.push_back(t.constant(c.k[static_cast<size_t>(li)]));
      vc.push_back(t.constant(c.v[static_cast<size_t>(li)]));
    }
    StepGraph sg = step_graph(t, wn, kc, vc, embed_token(t, wn, 5, 3), 3);
    Node *p = t.softmax_rows(sg.logits);
    Node *loss = t.cross_entropy_mean(p, {7});
    return loss->val(0, 0);
  };

  Tape t;
  WeightNodes wn = wrap_weights(t, w, false);
  std::vector<Node *> kc, vc;
  for (int li = 0; li < cfg.n_layers; ++li) {
    kc.push_back(t.leaf(cache.k[static_cast<size_t>(li)], true));
    vc.push_back(t.leaf(cache.v[static_cast<size_t>(li)], true));
  }
  StepGraph sg = step_graph(t, wn, kc, vc, embed_token(t, wn, 5, 3), 3);
  Node *p = t.softmax_rows(sg.logits);
  t.backward(t.cross_entropy_mean(p, {7}));

  for (int li = 0; li < cfg.n_layers; ++li) {
    auto f_k = [&](const Mat &m) {
      KvCache c = cache;
      c.k[static_cast<size_t>(li)] = m;
      return loss_at(c);
    };
    auto f_v = [&](const Mat &m) {
      KvCache c = cache;
      c.v[static_cast<size_t>(li)] = m;
      return loss_at(c);
    };
    REQUIRE(kc[static_cast<size_t>(li)]->has_grad());
    REQUIRE(vc[static_cast<size_t>(li)]->has_grad());
    check_grad(f_k, cache.k[static_cast<size_t>(li)], kc[static_cast<size_t>(li)]->grad, rng, 15, 2e-5);
    check_grad(f_v, cache.v[static_cast<size_t>(li)], vc[static_cast<size_t>(li)]->grad, rng, 15, 2e-5);
  }
}
