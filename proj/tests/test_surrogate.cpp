#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qfta/surrogate.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace qfta;

namespace {

std::shared_ptr<LanguageModel> tiny_lm(unsigned long seed = 3) {
  LmConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_pos = 32;
  auto lm = std::make_shared<LanguageModel>();
  lm->tokenizer = Tokenizer::build(
      {"spam offer win cash prize now", "meeting notes for the team review today"});
  lm->w = init_lm(cfg, lm->tokenizer.vocab_size(), seed);
  return lm;
}

DatasetSplit tiny_data() {
  DatasetSplit d;
  for (int i = 0; i < 24; ++i) {
    d.train.push_back({"s" + std::to_string(i), "spam offer win cash prize now", 1});
    d.train.push_back({"h" + std::to_string(i), "meeting notes for the team review today", 0});
  }
  d.test = {{"t0", "win cash prize", 1}, {"t1", "team meeting notes", 0}};
  return d;
}

}  // namespace

TEST_CASE("the untrained head is exactly uniform: loss = ln 2") {
  auto sur = make_surrogate(tiny_lm());
  auto pooled = sur.pooled_features(sur.lm->tokenizer.encode("win cash now"));
  CHECK(std::abs(surrogate_loss(sur, pooled, 0) - std::log(2.0)) < 1e-9);
  CHECK(std::abs(surrogate_loss(sur, pooled, 1) - std::log(2.0)) < 1e-9);
  auto p = sur.predict(pooled);
  CHECK(std::abs(p.probs(0) - 0.5) < 1e-12);
}

TEST_CASE("head training separates the classes and freezes the generator") {
  auto sur = make_surrogate(tiny_lm());
  const std::string digest0 = sur.lm->w.digest();
  HeadTrainOptions opt;
  opt.epochs = 60;
  auto log = train_head(sur, tiny_data(), opt);
  CHECK(log.generator_digest_before == digest0);
  CHECK(log.generator_digest_after == digest0);
  CHECK(log.epoch_loss.back() < log.epoch_loss.front());

  auto p1 = sur.predict(sur.pooled_features(sur.lm->tokenizer.encode("spam offer win cash prize now")));
  auto p0 = sur.predict(sur.pooled_features(sur.lm->tokenizer.encode("meeting notes for the team review today")));
  CHECK(p1.probs(1) > 0.5);
  CHECK(p0.probs(0) > 0.5);
}

TEST_CASE("head training matches a logistic-regression oracle on frozen features") {
  // With fixed generator features the head is plain logistic regression; a
  // long full-batch run must approach the same decision on train points.
  auto sur = make_surrogate(tiny_lm());
  auto data = tiny_data();
  HeadTrainOptions opt;
  opt.epochs = 200;
  opt.batch_size = 64;
  opt.val_frac = 0.0;
  train_head(sur, data, opt);
  int correct = 0;
  for (const auto &e : data.train) {
    auto p = sur.predict(sur.pooled_features(sur.lm->tokenizer.encode(e.text)));
    correct += (p.probs(1) > 0.5 ? 1 : 0) == e.label;
  }
  CHECK(correct == static_cast<int>(data.train.size()));
}

TEST_CASE("degenerate training data is rejected") {
  auto sur = make_surrogate(tiny_lm());
  DatasetSplit empty;
  CHECK_THROWS_AS(train_head(sur, empty, {}), DataError);
  DatasetSplit one_class;
  one_class.train = {{"a", "spam offer", 1}, {"b", "win cash", 1}};
  CHECK_THROWS_AS(train_head(sur, one_class, {}), DataError);
}

TEST_CASE("adversarial gradient matches central finite differences") {
  auto lm = tiny_lm();
  auto sur = make_surrogate(lm);
  HeadTrainOptions opt;
  opt.epochs = 40;
  train_head(sur, tiny_data(), opt);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> dist(0.0, 0.5);
  KvCache cache = KvCache::empty(lm->w.cfg);
  for (auto &k : cache.k) {
    k = Mat(4, lm->w.cfg.d_model);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = dist(rng);
  }
  for (auto &v : cache.v) {
    v = Mat(4, lm->w.cfg.d_model);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = dist(rng);
  }

  const int pending = 2, pos = 4, target = 0;
  HistoryGrad g = adversarial_gradient(sur, cache, pending, pos, target);
  REQUIRE(g.k.size() == cache.k.size());

  auto loss_at = [&](const KvCache &c) {
    // independent value oracle for the same quantity
    Tape t;
    WeightNodes wn = wrap_weights(t, lm->w, false);
    std::vector<Node *> kc, vc;
    for (size_t li = 0; li < c.k.size(); ++li) {
      kc.push_back(t.constant(c.k[li]));
      vc.push_back(t.constant(c.v[li]));
    }
    StepGraph s1 = step_graph(t, wn, kc, vc, embed_token(t, wn, pending, pos), pos);
    Node *p = t.softmax_rows(s1.logits);
    Node *e = t.add(t.matmul(p, wn.tok_emb), t.gather_rows(wn.pos_emb, {pos + 1}));
    std::vector<Node *> kc2, vc2;
    for (size_t li = 0; li < c.k.size(); ++li) {
      kc2.push_back(t.concat_rows(kc[li], s1.k_new[li]));
      vc2.push_back(t.concat_rows(vc[li], s1.v_new[li]));
    }
    StepGraph s2 = step_graph(t, wn, kc2, vc2, e, pos + 1);
    return surrogate_loss(sur, s2.hidden->val.row(0), target);
  };

  CHECK(std::abs(g.loss - loss_at(cache)) < 1e-9);

  std::uniform_int_distribution<int> ri(0, 3), ci(0, lm->w.cfg.d_model - 1);
  int checked = 0;
  for (int probe = 0; probe < 60; ++probe) {
    const size_t li = static_cast<size_t>(probe) % cache.k.size();
    const bool is_k = probe % 2 == 0;
    const int i = ri(rng), j = ci(rng);
    const double h = 1e-6;
    KvCache cp = cache, cm = cache;
    (is_k ? cp.k[li] : cp.v[li])(i, j) += h;
    (is_k ? cm.k[li] : cm.v[li])(i, j) -= h;
    const double fd = (loss_at(cp) - loss_at(cm)) / (2 * h);
    const double an = (is_k ? g.k[li] : g.v[li])(i, j);
    if (std::abs(fd) < 1e-6 && std::abs(an) < 1e-6) continue;
    CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-4);
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("gradient computation counts exactly one generator forward pass") {
  auto lm = tiny_lm();
  auto sur = make_surrogate(lm);
  KvCache cache = KvCache::empty(lm->w.cfg);
  lm->step(cache, 2, 0, true);
  const long before = lm->forward_count;
  adversarial_gradient(sur, cache, 3, 1, 0);
  CHECK(lm->forward_count == before + 1);
}

TEST_CASE("head checkpoint round trip") {
  auto lm = tiny_lm();
  auto sur = make_surrogate(lm);
  HeadTrainOptions opt;
  opt.epochs = 20;
  train_head(sur, tiny_data(), opt);
  const std::string dir =
      (std::filesystem::temp_directory_path() / "qfta_head_ckpt").string();
  save_head(sur, dir, "digest123");

  auto sur2 = make_surrogate(lm);
  auto info = load_head(sur2, dir);
  CHECK(info.train_config_digest == "digest123");
  CHECK(info.hidden_dim == lm->hidden_dim());
  CHECK((sur2.head_w - sur.head_w).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sur2.head_b - sur.head_b).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(load_head(sur2, "/nonexistent/dir"), ConfigError);
}

TEST_CASE("head size is a rounding error next to the generator") {
  auto lm = tiny_lm();
  auto sur = make_surrogate(lm);
  CHECK(sur.trainable_params() == lm->hidden_dim() * 2 + 2);
  CHECK(sur.trainable_params() * 50 < lm->w.n_params());
}
