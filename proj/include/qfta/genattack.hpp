#pragma once

#include "qfta/surrogate.hpp"

#include <random>
#include <string>
#include <vector>

namespace qfta {

struct AttackConfig {
  double alpha = 0.06;        // history update step size
  double gamma = 1.0;         // gradient-norm exponent
  int n_update_steps = 10;    // perturbation rounds per position
  double lambda_fusion = 0.97;
  double prefix_ratio = 0.5;  // fraction of the original kept verbatim
  int top_k = 10;
  double temperature = 1.0;
  std::string length_policy = "match_original";  // or "max_tokens"
  int max_tokens = 256;
  bool accumulate_history = true;  // false: reset cache to unperturbed each step
  unsigned long seed = 42;

  void validate() const;
};

struct TokenizedExample {
  std::string id;
  std::vector<int> ids;
  int label = 0;
};

// Evolving state of one attack. `history` holds the per-layer key/value
// context of the pending token, i.e. history rows == step - 1; the pending
// token's own projections are recomputed endogenously on every re-forward.
struct GenerationState {
  std::vector<int> prefix;
  std::vector<int> generated;
  KvCache history;
  int pending_token = 0;
  Eigen::RowVectorXd next_dist;
  int step = 0;    // committed tokens, |prefix| + |generated|
  int maxlen = 0;
  int adv_target = 0;
  bool no_generation = false;
  bool complete = false;
};

struct TraceEntry {
  int step = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double fused_entropy = 0.0;
  int token = -1;
};

struct GenerationOutcome {
  std::vector<int> tokens;  // prefix + generated
  std::string text;
  bool no_generation = false;
  std::vector<TraceEntry> trace;
  long forward_passes = 0;  // generator next-token distribution computations
  std::vector<std::string> warnings;
};

GenerationState init_state(const TokenizedExample &example, const LanguageModel &lm,
                           const AttackConfig &cfg);

// Eq.-style normalized ascent on every history tensor independently:
// h += alpha * g / (||g||^gamma + 1e-10). Non-finite gradients skip the
// tensor and record a warning.
void perturb_history(KvCache &history, const HistoryGrad &grad, const AttackConfig &cfg,
                     std::vector<std::string> *warnings = nullptr);

// Renormalized geometric interpolation p_orig^(1-lambda) * p_pert^lambda,
// computed in log space.
Eigen::RowVectorXd fuse_distributions(const Eigen::RowVectorXd &p_orig,
                                      const Eigen::RowVectorXd &p_pert, double lambda);

// Diagnostic value of the surrogate loss at the given history (no gradients,
// not counted as a generation forward pass).
double surrogate_history_loss(const SurrogateModel &model, const KvCache &cache,
                              int pending_token, int pos, int target);

// One adversarial decoding step; returns the sampled token id.
int step_token(GenerationState &state, const SurrogateModel &sur, const AttackConfig &cfg,
               std::mt19937_64 &rng, TraceEntry *trace = nullptr,
               std::vector<std::string> *warnings = nullptr);

GenerationOutcome generate_adversarial(const TokenizedExample &example,
                                       const SurrogateModel &sur, const AttackConfig &cfg);

unsigned long example_rng_seed(unsigned long base_seed, const std::string &example_id);

}  // namespace qfta
