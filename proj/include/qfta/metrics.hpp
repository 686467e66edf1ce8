#pragma once

#include "qfta/victim.hpp"

#include <memory>
#include <optional>

namespace qfta {

// Sentence embedding handle for the USE-style similarity metric. Pluggable:
// a null object marks the metric unavailable rather than reporting zeros.
struct SentenceEncoder {
  virtual ~SentenceEncoder() = default;
  virtual std::optional<Eigen::VectorXd> embed(const std::string &text) const = 0;
  virtual std::string id() const = 0;
};

// Deterministic hashed bag-of-words random-projection embedding.
class HashedBowEncoder final : public SentenceEncoder {
 public:
  explicit HashedBowEncoder(int dim = 256, unsigned long seed = 1234)
      : dim_(dim), seed_(seed) {}
  std::optional<Eigen::VectorXd> embed(const std::string &text) const override;
  std::string id() const override { return "hashed-bow"; }

 private:
  int dim_;
  unsigned long seed_;
};

struct NullEncoder final : public SentenceEncoder {
  std::optional<Eigen::VectorXd> embed(const std::string &) const override {
    return std::nullopt;
  }
  std::string id() const override { return "null"; }
};

struct GrammarChecker {
  virtual ~GrammarChecker() = default;
  virtual std::optional<int> error_count(const std::string &text) const = 0;
};

// Counts rough error spans: repeated consecutive words, unbalanced
// brackets/quotes, words with interior digit/letter mixes.
struct HeuristicGrammarChecker final : public GrammarChecker {
  std::optional<int> error_count(const std::string &text) const override;
};

struct NullChecker final : public GrammarChecker {
  std::optional<int> error_count(const std::string &) const override {
    return std::nullopt;
  }
};

struct LmScorer {
  virtual ~LmScorer() = default;
  // Per-token negative log-likelihoods; empty optional when text is too short.
  virtual std::optional<std::vector<double>> token_nll(const std::string &text) const = 0;
};

class GeneratorScorer final : public LmScorer {
 public:
  explicit GeneratorScorer(std::shared_ptr<const LanguageModel> lm) : lm_(std::move(lm)) {}
  std::optional<std::vector<double>> token_nll(const std::string &text) const override;

 private:
  std::shared_ptr<const LanguageModel> lm_;
};

class UniformScorer final : public LmScorer {
 public:
  explicit UniformScorer(int vocab_size) : vocab_(vocab_size) {}
  std::optional<std::vector<double>> token_nll(const std::string &text) const override;

 private:
  int vocab_;
};

struct NullScorer final : public LmScorer {
  std::optional<std::vector<double>> token_nll(const std::string &) const override {
    return std::nullopt;
  }
};

double cosine(const Eigen::VectorXd &a, const Eigen::VectorXd &b);

std::optional<double> use_similarity(const std::string &a, const std::string &b,
                                     const SentenceEncoder &encoder);

struct PplResult {
  double value = 0.0;
  bool clamped = false;  // some per-token NLL hit the overflow clamp
};

// exp(mean per-token NLL); per-token NLL clamped at `nll_clamp`.
std::optional<PplResult> perplexity(const std::string &text, const LmScorer &scorer,
                                    double nll_clamp = 30.0);

std::optional<int> delta_i(const std::string &original, const std::string &adversarial,
                           const GrammarChecker &checker);

std::optional<double> compute_asr(const std::vector<AttackResult> &results);
std::optional<double> compute_mean_query(const std::vector<AttackResult> &results);

struct MetricsReport {
  std::optional<double> asr;         // percentage
  std::optional<double> mean_query;  // over successes; nullopt rendered as inf
  std::optional<double> use_mean;
  std::optional<double> ppl_mean;
  std::optional<double> delta_i_mean;
  long n_total = 0, n_eligible = 0, n_ineligible = 0, n_success = 0, n_errored = 0;
  bool ppl_clamped = false;
  long n_use = 0, n_ppl = 0, n_delta_i = 0;  // successes actually measured
};

// Aggregates efficiency metrics and fills/averages quality metrics over the
// successful attacks only.
MetricsReport compute_report(std::vector<AttackResult> &results,
                             const SentenceEncoder &encoder, const LmScorer &scorer,
                             const GrammarChecker &checker);

}  // namespace qfta
