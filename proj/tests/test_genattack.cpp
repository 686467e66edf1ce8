#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qfta/genattack.hpp"

#include <cmath>
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
  lm->tokenizer = Tokenizer::build({"a b c d e f g h i j k l m n o p"});
  lm->w = init_lm(cfg, lm->tokenizer.vocab_size(), seed);
  return lm;
}

SurrogateModel tiny_surrogate() {
  auto sur = make_surrogate(tiny_lm());
  // non-trivial head so the adversarial loss has a gradient
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Eigen::Index i = 0; i < sur.head_w.size(); ++i) sur.head_w.data()[i] = d(rng);
  return sur;
}

TokenizedExample example_of(const SurrogateModel &sur, const std::string &text, int label,
                            const std::string &id = "ex1") {
  return {id, sur.lm->tokenizer.encode(text), label};
}

}  // namespace

TEST_CASE("config validation") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda_fusion = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.prefix_ratio = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.top_k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.length_policy = "forever";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("prefix length uses the ceiling rule and the history tracks it") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  cfg.prefix_ratio = 0.5;
  auto ex = example_of(sur, "a b c d e f g", 0);  // n = 7 -> prefix 4
  GenerationState st = init_state(ex, *sur.lm, cfg);
  CHECK(st.prefix.size() == 4);
  CHECK(st.step == 4);
  CHECK(st.history.rows() == 3);  // pending token's past
  CHECK(st.pending_token == ex.ids[3]);
  CHECK(st.adv_target == 1);
  CHECK(!st.no_generation);

  cfg.prefix_ratio = 1.0;  // keep everything: nothing to generate
  GenerationState full = init_state(ex, *sur.lm, cfg);
  CHECK(full.no_generation);
  CHECK(full.complete);
}

TEST_CASE("too-short examples are rejected") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  TokenizedExample ex{"short", {2}, 0};
  CHECK_THROWS_AS(init_state(ex, *sur.lm, cfg), DataError);
}

TEST_CASE("per-tensor update norm equals alpha at gamma 1") {
  AttackConfig cfg;
  cfg.alpha = 0.37;
  cfg.gamma = 1.0;
  KvCache h;
  h.k = {Mat::Zero(3, 4)};
  h.v = {Mat::Zero(3, 4)};
  HistoryGrad g;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0.0, 1.0);
  g.k = {Mat(3, 4)};
  g.v = {Mat(3, 4)};
  for (Eigen::Index i = 0; i < 12; ++i) {
    g.k[0].data()[i] = d(rng);
    g.v[0].data()[i] = d(rng);
  }
  perturb_history(h, g, cfg);
  CHECK(std::abs(h.k[0].norm() - cfg.alpha) / cfg.alpha < 1e-3);
  CHECK(std::abs(h.v[0].norm() - cfg.alpha) / cfg.alpha < 1e-3);
}

TEST_CASE("gamma 0 leaves the raw gradient scaled by alpha") {
  AttackConfig cfg;
  cfg.alpha = 0.5;
  cfg.gamma = 0.0;
  KvCache h;
  h.k = {Mat::Zero(2, 2)};
  h.v = {Mat::Zero(2, 2)};
  HistoryGrad g;
  g.k = {(Mat(2, 2) << 1, -2, 3, 4).finished()};
  g.v = {Mat::Zero(2, 2)};
  perturb_history(h, g, cfg);
  // denominator is ||g||^0 + eps = 1 + 1e-10
  CHECK((h.k[0] + cfg.alpha * g.k[0]).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("non-finite gradients skip the tensor with a warning") {
  AttackConfig cfg;
  KvCache h;
  h.k = {Mat::Ones(2, 2)};
  h.v = {Mat::Ones(2, 2)};
  HistoryGrad g;
  g.k = {(Mat(2, 2) << std::nan(""), 0, 0, 0).finished()};
  g.v = {Mat::Ones(2, 2)};
  std::vector<std::string> warnings;
  perturb_history(h, g, cfg, &warnings);
  CHECK((h.k[0] - Mat::Ones(2, 2)).cwiseAbs().maxCoeff() == 0.0);  // untouched
  CHECK(h.v[0](0, 0) != 1.0);                                      // applied
  REQUIRE(warnings.size() == 1);
}

TEST_CASE("fusion endpoints and a hand-computed midpoint") {
  Eigen::RowVectorXd po(2), pp(2);
  po << 0.75, 0.25;
  pp << 0.25, 0.75;
  CHECK((fuse_distributions(po, pp, 0.0) - po).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((fuse_distributions(po, pp, 1.0) - pp).cwiseAbs().maxCoeff() < 1e-6);

  // lambda = 1/2: weights sqrt(0.75*0.25) on both sides -> exactly uniform
  Eigen::RowVectorXd mid = fuse_distributions(po, pp, 0.5);
  CHECK(std::abs(mid(0) - 0.5) < 1e-9);
  CHECK(std::abs(mid(1) - 0.5) < 1e-9);

  // general hand case: w_i = po_i^0.25 * pp_i^0.75, renormalized
  Eigen::RowVectorXd f = fuse_distributions(po, pp, 0.75);
  const double w0 = std::pow(0.75, 0.25) * std::pow(0.25, 0.75);
  const double w1 = std::pow(0.25, 0.25) * std::pow(0.75, 0.75);
  CHECK(std::abs(f(0) - w0 / (w0 + w1)) < 1e-9);
  CHECK(std::abs(f(1) - w1 / (w0 + w1)) < 1e-9);

  // a zero-probability token stays at zero under lambda < 1
  Eigen::RowVectorXd pz(3), pq(3);
  pz << 0.0, 0.5, 0.5;
  pq << 0.2, 0.4, 0.4;
  CHECK(fuse_distributions(pz, pq, 0.3)(0) == 0.0);

  Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(2);
  CHECK_THROWS_AS(fuse_distributions(z, z, 0.5), RuntimeFailure);
}

TEST_CASE("generation is deterministic per (seed, example id)") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  cfg.alpha = 0.3;
  cfg.n_update_steps = 2;
  auto ex = example_of(sur, "a b c d e f g h", 0);
  auto o1 = generate_adversarial(ex, sur, cfg);
  auto o2 = generate_adversarial(ex, sur, cfg);
  CHECK(o1.tokens == o2.tokens);

  auto ex2 = example_of(sur, "a b c d e f g h", 0, "другой");
  auto o3 = generate_adversarial(ex2, sur, cfg);
  CHECK(example_rng_seed(cfg.seed, "ex1") != example_rng_seed(cfg.seed, "другой"));
  (void)o3;

  AttackConfig other = cfg;
  other.seed = 99;
  auto o4 = generate_adversarial(ex, sur, other);
  CHECK(example_rng_seed(cfg.seed, "ex1") != example_rng_seed(other.seed, "ex1"));
  (void)o4;
}

TEST_CASE("prefix tokens are preserved bit-exact and length is bounded") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  cfg.alpha = 0.4;
  cfg.prefix_ratio = 0.5;
  for (int trial = 0; trial < 8; ++trial) {
    auto ex = example_of(sur, "a b c d e f g h i j", 1, "t" + std::to_string(trial));
    auto out = generate_adversarial(ex, sur, cfg);
    const size_t plen = 5;
    REQUIRE(out.tokens.size() >= plen);
    for (size_t i = 0; i < plen; ++i) CHECK(out.tokens[i] == ex.ids[i]);
    CHECK(out.tokens.size() <= ex.ids.size());
  }
}

TEST_CASE("disabled attack arms reproduce unmodified generation") {
  SurrogateModel sur = tiny_surrogate();
  auto ex = example_of(sur, "a b c d e f g h", 0);

  AttackConfig off1;  // no gradient rounds
  off1.n_update_steps = 0;
  off1.lambda_fusion = 0.0;
  AttackConfig off2;  // rounds happen but fusion ignores the perturbed side
  off2.n_update_steps = 10;
  off2.lambda_fusion = 0.0;
  off2.accumulate_history = false;  // keep later steps on the clean history too

  auto o1 = generate_adversarial(ex, sur, off1);
  auto o2 = generate_adversarial(ex, sur, off2);
  CHECK(o1.tokens == o2.tokens);
}

TEST_CASE("forward-pass accounting matches the attack-loop cost model") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  cfg.n_update_steps = 3;
  auto ex = example_of(sur, "a b c d e f g h i j", 0);
  auto out = generate_adversarial(ex, sur, cfg);
  // one priming pass plus (1 + n_update + 1) per attempted position
  CHECK(out.forward_passes ==
        1 + static_cast<long>(out.trace.size()) * (cfg.n_update_steps + 2));
  const long n = static_cast<long>(ex.ids.size());
  const long prefix = (n + 1) / 2;
  CHECK(out.forward_passes <= (n - prefix) * (cfg.n_update_steps + 2) + 1);

  cfg.prefix_ratio = 1.0;
  auto noop = generate_adversarial(ex, sur, cfg);
  CHECK(noop.no_generation);
  CHECK(noop.forward_passes == 0);
  CHECK(noop.tokens == ex.ids);
}

TEST_CASE("trace records the surrogate loss drop per position") {
  SurrogateModel sur = tiny_surrogate();
  AttackConfig cfg;
  cfg.alpha = 0.4;
  cfg.n_update_steps = 8;
  auto ex = example_of(sur, "a b c d e f g h i j", 0);
  auto out = generate_adversarial(ex, sur, cfg);
  REQUIRE(!out.trace.empty());
  int improved = 0;
  for (const auto &t : out.trace) {
    CHECK(t.step >= 5);
    CHECK(t.fused_entropy >= 0.0);
    if (t.loss_after < t.loss_before) ++improved;
  }
  // normalized ascent on the surrogate objective lowers the loss on most steps
  CHECK(improved * 2 > static_cast<int>(out.trace.size()));
}

TEST_CASE("diagnostic history loss agrees with the gradient computation") {
  SurrogateModel sur = tiny_surrogate();
  KvCache cache = KvCache::empty(sur.lm->w.cfg);
  sur.lm->step(cache, 2, 0, true);
  sur.lm->step(cache, 3, 1, true);
  const long fw = sur.lm->forward_count;
  const double v = surrogate_history_loss(sur, cache, 4, 2, 1);
  CHECK(sur.lm->forward_count == fw);  // diagnostics are not counted
  HistoryGrad g = adversarial_gradient(sur, cache, 4, 2, 1);
  CHECK(std::abs(v - g.loss) < 1e-12);
}
