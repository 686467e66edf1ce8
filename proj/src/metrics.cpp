#include "qfta/metrics.hpp"

#include <cmath>
#include <random>

namespace qfta {

std::optional<Eigen::VectorXd> HashedBowEncoder::embed(const std::string &text) const {
  auto words = split_words(normalize_text(text));
  if (words.empty()) return std::nullopt;
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
  for (const auto &w : words) {
    unsigned long h = 1469598103934665603ul;
    for (unsigned char c : w) {
      h ^= c;
      h *= 1099511628211ul;
    }
    std::mt19937_64 rng(h ^ seed_);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < dim_; ++i) v(i) += dist(rng);
  }
  return v;
}

std::optional<int> HeuristicGrammarChecker::error_count(const std::string &text) const {
  auto words = split_words(normalize_text(text));
  int errors = 0;
  for (size_t i = 1; i < words.size(); ++i)
    if (words[i] == words[i - 1]) ++errors;
  long paren = 0, quotes = 0;
  for (const auto &w : words) {
    bool has_digit = false, has_alpha = false;
    for (unsigned char c : w) {
      if (c == '(') ++paren;
      if (c == ')') --paren;
      if (c == '"') ++quotes;
      if (std::isdigit(c)) has_digit = true;
      if (std::isalpha(c)) has_alpha = true;
    }
    if (has_digit && has_alpha) ++errors;
  }
  errors += static_cast<int>(std::abs(paren)) + static_cast<int>(quotes % 2);
  return errors;
}

std::optional<std::vector<double>> GeneratorScorer::token_nll(const std::string &text) const {
  auto ids = lm_->tokenizer.encode(text);
  if (ids.size() < 2) return std::nullopt;
  return lm_->token_nll(ids);
}

std::optional<std::vector<double>> UniformScorer::token_nll(const std::string &text) const {
  auto words = split_words(normalize_text(text));
  if (words.size() < 2) return std::nullopt;
  return std::vector<double>(words.size() - 1, std::log(static_cast<double>(vocab_)));
}

double cosine(const Eigen::VectorXd &a, const Eigen::VectorXd &b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

std::optional<double> use_similarity(const std::string &a, const std::string &b,
                                     const SentenceEncoder &encoder) {
  auto ea = encoder.embed(a);
  auto eb = encoder.embed(b);
  if (!ea || !eb) return std::nullopt;
  return cosine(*ea, *eb);
}

std::optional<PplResult> perplexity(const std::string &text, const LmScorer &scorer,
                                    double nll_clamp) {
  auto nll = scorer.token_nll(text);
  if (!nll || nll->empty()) return std::nullopt;
  PplResult r;
  double sum = 0.0;
  for (double x : *nll) {
    if (x > nll_clamp) {
      x = nll_clamp;
      r.clamped = true;
    }
    sum += x;
  }
  r.value = std::exp(sum / static_cast<double>(nll->size()));
  return r;
}

std::optional<int> delta_i(const std::string &original, const std::string &adversarial,
                           const GrammarChecker &checker) {
  auto eo = checker.error_count(original);
  auto ea = checker.error_count(adversarial);
  if (!eo || !ea) return std::nullopt;
  return *ea - *eo;
}

std::optional<double> compute_asr(const std::vector<AttackResult> &results) {
  long eligible = 0, success = 0;
  for (const auto &r : results) {
    if (r.errored) continue;
    if (r.eligible) {
      ++eligible;
      if (r.success) ++success;
    }
  }
  if (eligible == 0) return std::nullopt;
  return 100.0 * static_cast<double>(success) / static_cast<double>(eligible);
}

std::optional<double> compute_mean_query(const std::vector<AttackResult> &results) {
  long n = 0;
  double sum = 0.0;
  for (const auto &r : results) {
    if (r.errored || !r.eligible || !r.success) continue;
    sum += static_cast<double>(r.queries_attack_loop);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

MetricsReport compute_report(std::vector<AttackResult> &results,
                             const SentenceEncoder &encoder, const LmScorer &scorer,
                             const GrammarChecker &checker) {
  MetricsReport rep;
  rep.n_total = static_cast<long>(results.size());
  double use_sum = 0.0, ppl_sum = 0.0, di_sum = 0.0;
  for (auto &r : results) {
    if (r.errored) {
      ++rep.n_errored;
      continue;
    }
    if (!r.eligible) {
      ++rep.n_ineligible;
      continue;
    }
    ++rep.n_eligible;
    if (!r.success) continue;
    ++rep.n_success;
    // Quality metrics are averaged over successful attacks only.
    if (auto u = use_similarity(r.original, r.adversarial, encoder)) {
      r.use_similarity = *u;
      use_sum += *u;
      ++rep.n_use;
    }
    if (auto p = perplexity(r.adversarial, scorer)) {
      r.perplexity = p->value;
      rep.ppl_clamped = rep.ppl_clamped || p->clamped;
      ppl_sum += p->value;
      ++rep.n_ppl;
    }
    if (auto d = delta_i(r.original, r.adversarial, checker)) {
      r.delta_i = *d;
      di_sum += static_cast<double>(*d);
      ++rep.n_delta_i;
    }
  }
  rep.asr = compute_asr(results);
  rep.mean_query = compute_mean_query(results);
  if (rep.n_use) rep.use_mean = use_sum / static_cast<double>(rep.n_use);
  if (rep.n_ppl) rep.ppl_mean = ppl_sum / static_cast<double>(rep.n_ppl);
  if (rep.n_delta_i) rep.delta_i_mean = di_sum / static_cast<double>(rep.n_delta_i);
  return rep;
}

}  // namespace qfta
