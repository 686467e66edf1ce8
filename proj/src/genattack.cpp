#include "qfta/genattack.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>

namespace qfta {

void AttackConfig::validate() const {
  if (lambda_fusion < 0.0 || lambda_fusion > 1.0)
    throw ConfigError("lambda_fusion must lie in [0,1]");
  if (prefix_ratio <= 0.0 || prefix_ratio > 1.0)
    throw ConfigError("prefix_ratio must lie in (0,1]");
  if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
  if (n_update_steps < 0) throw ConfigError("n_update_steps must be >= 0");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
  if (length_policy != "match_original" && length_policy != "max_tokens")
    throw ConfigError("unknown length_policy: " + length_policy);
}

unsigned long example_rng_seed(unsigned long base_seed, const std::string &example_id) {
  unsigned long h = 1469598103934665603ul;  // FNV-1a
  for (unsigned char c : example_id) {
    h ^= c;
    h *= 1099511628211ul;
  }
  return h ^ base_seed;
}

GenerationState init_state(const TokenizedExample &example, const LanguageModel &lm,
                           const AttackConfig &cfg) {
  cfg.validate();
  const int n = static_cast<int>(example.ids.size());
  if (n < 2) throw DataError("attack example must have at least 2 tokens: " + example.id);

  GenerationState st;
  const int prefix_len = static_cast<int>(
      std::ceil(cfg.prefix_ratio * static_cast<double>(n) - 1e-12));
  st.prefix.assign(example.ids.begin(), example.ids.begin() + prefix_len);
  st.step = prefix_len;
  st.adv_target = 1 - example.label;
  st.maxlen = cfg.length_policy == "match_original"
                  ? n
                  : std::min(n, std::min(cfg.max_tokens, 256));
  st.maxlen = std::min(st.maxlen, lm.w.cfg.max_pos);

  if (prefix_len >= st.maxlen) {
    st.no_generation = true;
    st.complete = true;
    st.history = KvCache::empty(lm.w.cfg);
    st.pending_token = st.prefix.back();
    return st;
  }

  // Prime the history over the prefix; the last prefix token stays pending.
  st.history = KvCache::empty(lm.w.cfg);
  for (int i = 0; i + 1 < prefix_len; ++i)
    lm.step(st.history, st.prefix[static_cast<size_t>(i)], i, /*append=*/true);
  st.pending_token = st.prefix.back();
  Eigen::RowVectorXd probs =
      lm.step(st.history, st.pending_token, prefix_len - 1, /*append=*/false);
  st.next_dist = probs;
  lm.forward_count++;  // one priming pass over the prefix
  return st;
}

void perturb_history(KvCache &history, const HistoryGrad &grad, const AttackConfig &cfg,
                     std::vector<std::string> *warnings) {
  constexpr double kEps = 1e-10;
  auto apply = [&](Mat &h, const Mat &g, const char *what, size_t layer) {
    assert(h.rows() == g.rows() && h.cols() == g.cols());
    if (!g.allFinite()) {
      if (warnings)
        warnings->push_back(std::string("non-finite gradient for ") + what + " layer " +
                            std::to_string(layer) + "; update skipped");
      return;
    }
    // g is the gradient of -log p(adv target); ascending the log-likelihood
    // therefore subtracts it.
    const double denom = std::pow(g.norm(), cfg.gamma) + kEps;
    h -= (cfg.alpha / denom) * g;
  };
  for (size_t li = 0; li < history.k.size(); ++li) {
    apply(history.k[li], grad.k[li], "k", li);
    apply(history.v[li], grad.v[li], "v", li);
  }
}

Eigen::RowVectorXd fuse_distributions(const Eigen::RowVectorXd &p_orig,
                                      const Eigen::RowVectorXd &p_pert, double lambda) {
  assert(p_orig.size() == p_pert.size());
  const double l0 = 1.0 - lambda, l1 = lambda;
  Eigen::RowVectorXd logw(p_orig.size());
  for (Eigen::Index i = 0; i < p_orig.size(); ++i) {
    double acc = 0.0;
    // A zero coefficient contributes nothing even against zero mass.
    if (l0 != 0.0) acc += l0 * std::log(p_orig(i));
    if (l1 != 0.0) acc += l1 * std::log(p_pert(i));
    logw(i) = acc;
  }
  const double mx = logw.maxCoeff();
  if (!std::isfinite(mx))
    throw RuntimeFailure("degenerate fusion: zero mass on every token");
  // scalar exp: the vectorized path clamps -inf and leaks a denormal where a
  // zero-mass token must stay exactly zero
  Eigen::RowVectorXd w(logw.size());
  for (Eigen::Index i = 0; i < logw.size(); ++i) w(i) = std::exp(logw(i) - mx);
  return w / w.sum();
}

double surrogate_history_loss(const SurrogateModel &model, const KvCache &cache,
                              int pending_token, int pos, int target) {
  const LanguageModel &lm = *model.lm;
  Tape t;
  WeightNodes wn = wrap_weights(t, lm.w, false);
  std::vector<Node *> kc, vc;
  for (int li = 0; li < lm.n_layers(); ++li) {
    kc.push_back(t.constant(cache.k[static_cast<size_t>(li)]));
    vc.push_back(t.constant(cache.v[static_cast<size_t>(li)]));
  }
  StepGraph s1 = step_graph(t, wn, kc, vc, embed_token(t, wn, pending_token, pos), pos);
  Node *p = t.softmax_rows(s1.logits);
  const int pos2 = std::min(pos + 1, lm.w.cfg.max_pos - 1);
  Node *e = t.add(t.matmul(p, wn.tok_emb), t.gather_rows(wn.pos_emb, {pos2}));
  std::vector<Node *> kc2, vc2;
  for (size_t li = 0; li < wn.layers.size(); ++li) {
    kc2.push_back(t.concat_rows(kc[li], s1.k_new[li]));
    vc2.push_back(t.concat_rows(vc[li], s1.v_new[li]));
  }
  StepGraph s2 = step_graph(t, wn, kc2, vc2, e, pos2);
  Eigen::RowVectorXd pooled = s2.hidden->val.row(0);
  return surrogate_loss(model, pooled, target);
}

namespace {

int sample_top_k(const Eigen::RowVectorXd &probs, int k, double temperature,
                 std::mt19937_64 &rng) {
  std::vector<int> idx(static_cast<size_t>(probs.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const int kk = std::min<int>(k, static_cast<int>(probs.size()));
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&probs](int a, int b) {
    return probs(a) != probs(b) ? probs(a) > probs(b) : a < b;
  });
  std::vector<double> w(static_cast<size_t>(kk));
  double sum = 0.0;
  for (int i = 0; i < kk; ++i) {
    w[static_cast<size_t>(i)] = std::pow(probs(idx[static_cast<size_t>(i)]), 1.0 / temperature);
    sum += w[static_cast<size_t>(i)];
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng) * sum;
  for (int i = 0; i < kk; ++i) {
    u -= w[static_cast<size_t>(i)];
    if (u <= 0.0) return idx[static_cast<size_t>(i)];
  }
  return idx[static_cast<size_t>(kk - 1)];
}

double entropy(const Eigen::RowVectorXd &p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  return h;
}

}  // namespace

int step_token(GenerationState &state, const SurrogateModel &sur, const AttackConfig &cfg,
               std::mt19937_64 &rng, TraceEntry *trace,
               std::vector<std::string> *warnings) {
  assert(!state.complete && state.step < state.maxlen);
  const LanguageModel &lm = *sur.lm;
  const int pos = state.step - 1;

  // Unmodified next-token distribution, and the unperturbed grown cache for
  // the reset-history ablation.
  KvCache base_grown = state.history;
  Eigen::RowVectorXd p_orig = lm.step(base_grown, state.pending_token, pos, /*append=*/true);
  lm.forward_count++;

  KvCache perturbed = state.history;
  double loss_before = 0.0;
  for (int round = 0; round < cfg.n_update_steps; ++round) {
    HistoryGrad g = adversarial_gradient(sur, perturbed, state.pending_token, pos,
                                         state.adv_target);
    if (round == 0) loss_before = g.loss;
    perturb_history(perturbed, g, cfg, warnings);
  }
  if (cfg.n_update_steps == 0)
    loss_before = surrogate_history_loss(sur, perturbed, state.pending_token, pos,
                                         state.adv_target);
  const double loss_after = surrogate_history_loss(sur, perturbed, state.pending_token,
                                                   pos, state.adv_target);

  // Eq.-6 style recompute from the perturbed history; its forward pass also
  // yields the grown perturbed cache committed in accumulate mode.
  Eigen::RowVectorXd p_pert = lm.step(perturbed, state.pending_token, pos, /*append=*/true);
  lm.forward_count++;

  Eigen::RowVectorXd fused = fuse_distributions(p_orig, p_pert, cfg.lambda_fusion);
  const int token = sample_top_k(fused, cfg.top_k, cfg.temperature, rng);

  if (trace) {
    trace->step = state.step;
    trace->loss_before = loss_before;
    trace->loss_after = loss_after;
    trace->fused_entropy = entropy(fused);
    trace->token = token;
  }

  state.history = cfg.accumulate_history ? std::move(perturbed) : std::move(base_grown);
  state.next_dist = fused;
  if (token == Tokenizer::kEos) {
    state.complete = true;
    return token;
  }
  state.generated.push_back(token);
  state.pending_token = token;
  state.step += 1;
  if (state.step >= state.maxlen) state.complete = true;
  return token;
}

GenerationOutcome generate_adversarial(const TokenizedExample &example,
                                       const SurrogateModel &sur, const AttackConfig &cfg) {
  const LanguageModel &lm = *sur.lm;
  const long fw0 = lm.forward_count;
  GenerationOutcome out;

  GenerationState st = init_state(example, lm, cfg);
  if (st.no_generation) {
    out.tokens = example.ids;
    out.text = lm.tokenizer.decode(out.tokens);
    out.no_generation = true;
    out.forward_passes = lm.forward_count - fw0;
    return out;
  }

  std::mt19937_64 rng(example_rng_seed(cfg.seed, example.id));
  while (!st.complete) {
    TraceEntry te;
    step_token(st, sur, cfg, rng, &te, &out.warnings);
    out.trace.push_back(te);
  }

  out.tokens = st.prefix;
  out.tokens.insert(out.tokens.end(), st.generated.begin(), st.generated.end());
  out.text = lm.tokenizer.decode(out.tokens);
  out.forward_passes = lm.forward_count - fw0;
  return out;
}

}  // namespace qfta
