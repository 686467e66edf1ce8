#pragma once

#include "qfta/corpus.hpp"
#include "qfta/surrogate.hpp"
#include "qfta/tokenizer.hpp"

#include <map>
#include <optional>
#include <string>

namespace qfta {

struct QueryCounter {
  long total = 0;
  std::map<std::string, long> per_example;
  std::optional<long> budget;  // per-example cap when set

  bool exhausted(const std::string &example_id) const;
  void count(const std::string &example_id);
  long for_example(const std::string &example_id) const;
};

// Bag-of-embeddings text classifier trained from scratch. The arch id picks
// the embedding width ("boe", "boe-wide", "bow-logreg").
struct VictimModel {
  std::string model_id;
  std::string arch;
  std::string dataset_id;
  double clean_accuracy = 0.0;
  bool low_accuracy_warning = false;

  Tokenizer tokenizer;
  Mat emb;     // (V, De)
  Mat head_w;  // (De, 2)
  Mat head_b;  // (1, 2)

  Eigen::RowVector2d logits(const std::string &text) const;
  ClassDistribution classify(const std::string &text) const;
  int predict(const std::string &text) const;  // argmax; lower class id wins ties

  void save(const std::string &path) const;
  static VictimModel load(const std::string &path);
};

VictimModel train_victim(const std::string &arch, const DatasetSplit &data,
                         unsigned long seed, double accuracy_floor = 0.60,
                         double accuracy_warn = 0.80);

// Separate counters so both query-accounting conventions stay reportable.
struct VictimSession {
  QueryCounter loop;         // attack-loop queries (the "Query" metric)
  QueryCounter eligibility;  // one per trial, T(s) == y check
  QueryCounter verification; // one per trial, final adversarial check
};

// Counted prediction; empty when the per-example budget is exhausted.
std::optional<int> classify_counted(const VictimModel &victim, QueryCounter &counter,
                                    const std::string &text, const std::string &example_id);

struct AttackResult {
  std::string example_id;
  std::string original;
  std::string adversarial;
  bool eligible = false;
  bool success = false;
  bool errored = false;
  std::string error;
  long queries_attack_loop = 0;
  long queries_total = 0;
  std::string attacker_id;
  std::string victim_id;
  std::string config_digest;
  // Optional per-example quality metrics, filled by the metrics layer.
  std::optional<double> use_similarity;
  std::optional<double> perplexity;
  std::optional<int> delta_i;
};

// Adjudicates a pre-generated adversarial text: eligibility query first, one
// verification query on success paths. `loop_queries_used` is 0 for the
// query-free attacker.
AttackResult attack_trial(const VictimModel &victim, VictimSession &session,
                          const Example &example, const std::string &adversarial_text,
                          const std::string &attacker_id, long loop_queries_used = 0);

// Minimal query-based reference attacker: cumulative random character
// swaps/deletions on non-prefix words, one victim query per round.
AttackResult baseline_random_perturb(const Example &example, int budget,
                                     const VictimModel &victim, VictimSession &session,
                                     unsigned long seed, double prefix_ratio = 0.5);

}  // namespace qfta
