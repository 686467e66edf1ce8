#pragma once

#include "qfta/genattack.hpp"
#include "qfta/metrics.hpp"
#include "qfta/victim.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qfta {

struct EvalSpec {
  long n_samples = 1000;
  unsigned long seed = 42;
  int query_budget = 10;
};

struct GeneratorSpec {
  std::string path;  // checkpoint; empty = pretrain on demand (cached)
  int epochs = 8;
  unsigned long seed = 42;
  std::string background;  // optional extra pretraining text file, one doc per line
  LmConfig arch;
};

struct SurrogateSpec {
  HeadTrainOptions train;
  std::string dataset;  // optional; must equal the task's cross pair when set
};

struct VictimSpec {
  std::string dataset;
  std::string arch = "boe";
  unsigned long seed = 42;
};

struct ExperimentConfig {
  TaskSpec task;
  std::string registry_path;
  VictimSpec victim;
  GeneratorSpec generator;
  SurrogateSpec surrogate;
  AttackConfig attack;
  EvalSpec eval;
  std::string out_dir = "runs";
  std::string cache_dir = ".qfta-cache";

  std::string surrogate_dataset() const;  // always the task's other dataset

  static ExperimentConfig from_file(const std::string &path);
  static ExperimentConfig from_json_text(const std::string &text);
  std::string to_json_text() const;  // canonical: parse -> serialize fixed point
  std::string digest() const;
  void validate() const;
};

// Resolved, trained/loaded artifacts for one experiment.
struct Pipeline {
  std::shared_ptr<LanguageModel> lm;
  SurrogateModel surrogate;
  VictimModel victim;
  DatasetSplit victim_data;
  DatasetSplit surrogate_data;
  std::string generator_digest;
};

Pipeline build_pipeline(const ExperimentConfig &cfg, bool verbose = false);

// Shared-artifact builders with content-digest caching under cfg.cache_dir.
std::shared_ptr<LanguageModel> get_generator(const ExperimentConfig &cfg,
                                             const DatasetSplit &surrogate_data,
                                             bool verbose = false);
VictimModel get_victim(const ExperimentConfig &cfg, const DatasetSplit &victim_data,
                       bool verbose = false);

struct ExperimentReport {
  ExperimentConfig cfg;
  std::string config_digest;
  std::vector<AttackResult> results;
  MetricsReport metrics;
  long n_sampled = 0;
  bool eval_set_clamped = false;
  double eval_label1_fraction = 0.0;
  long max_forward_passes = 0;
  std::string run_dir;       // where artifacts were persisted
  bool reused_cached = false;
  std::vector<std::string> warnings;
};

// Full pipeline: corpus -> surrogate -> generation -> victim adjudication ->
// metrics -> persistence. Re-running an identical config reuses the persisted
// result set and reproduces byte-identical metrics JSON.
ExperimentReport run_experiment(const ExperimentConfig &cfg, bool verbose = false);

// Abstract attacker for budget curves: produces an adjudicated result for one
// example under a per-example attack-loop query budget.
struct AttackerAdapter {
  virtual ~AttackerAdapter() = default;
  virtual std::string id() const = 0;
  virtual bool query_based() const = 0;
  virtual AttackResult run(const Example &example, const VictimModel &victim,
                           VictimSession &session, int budget) = 0;
};

// The surrogate-guided generator attack (spends no loop queries).
class GenerativeAttacker final : public AttackerAdapter {
 public:
  GenerativeAttacker(const SurrogateModel *sur, AttackConfig cfg)
      : sur_(sur), cfg_(std::move(cfg)) {}
  std::string id() const override { return "kv-steer"; }
  bool query_based() const override { return false; }
  AttackResult run(const Example &example, const VictimModel &victim,
                   VictimSession &session, int budget) override;

 private:
  const SurrogateModel *sur_;
  AttackConfig cfg_;
};

class RandomPerturbAttacker final : public AttackerAdapter {
 public:
  RandomPerturbAttacker(unsigned long seed, double prefix_ratio)
      : seed_(seed), prefix_ratio_(prefix_ratio) {}
  std::string id() const override { return "random-perturb"; }
  bool query_based() const override { return true; }
  AttackResult run(const Example &example, const VictimModel &victim,
                   VictimSession &session, int budget) override;

 private:
  unsigned long seed_;
  double prefix_ratio_;
};

// External attacker: adversarial texts precomputed elsewhere, supplied as a
// JSONL file of {"example_id":..., "adversarial":..., "queries": n} rows.
class FileAttacker final : public AttackerAdapter {
 public:
  FileAttacker(const std::string &path, std::string attacker_id);
  std::string id() const override { return id_; }
  bool query_based() const override { return true; }
  AttackResult run(const Example &example, const VictimModel &victim,
                   VictimSession &session, int budget) override;

 private:
  std::string id_;
  std::map<std::string, std::pair<std::string, long>> rows_;
};

struct SweepPoint {
  double lambda = 0.0;
  double ratio = 0.0;
  std::optional<double> asr;
  std::optional<double> use_mean;
  bool errored = false;
  std::string error;
  std::string run_digest;
};

// One full experiment per (lambda, ratio) grid point; shared eval set and
// seeds. Per-point failures are recorded and the sweep continues.
std::vector<SweepPoint> sweep_ablation(const ExperimentConfig &cfg,
                                       const std::vector<double> &lambdas,
                                       const std::vector<double> &ratios,
                                       bool verbose = false);

struct BudgetPoint {
  std::string attacker_id;
  int budget = 0;
  std::optional<double> asr;
  long n_eligible = 0;
};

std::vector<BudgetPoint> budget_curve(const ExperimentConfig &cfg,
                                      const std::vector<AttackerAdapter *> &attackers,
                                      const std::vector<int> &budgets,
                                      bool verbose = false);

struct TransferMatrix {
  std::string reference_id;
  std::vector<std::string> datasets;
  std::vector<std::string> model_ids;
  // cells[dataset][model] = (ASR_model - ASR_ref) / ASR_ref; empty when
  // ASR_ref is 0 or the cell errored.
  std::map<std::string, std::map<std::string, std::optional<double>>> cells;
  std::map<std::string, std::map<std::string, std::optional<double>>> asr;  // raw
};

// Same attack corpus evaluated against several victims per dataset. Victims
// are described as "arch:seed" strings; the reference must be among them.
TransferMatrix transfer_matrix(const ExperimentConfig &cfg,
                               const std::vector<std::string> &victim_specs,
                               const std::string &reference_spec, bool verbose = false);

// --- persistence ---

void write_results_jsonl(const std::vector<AttackResult> &results,
                         const std::string &path);
std::vector<AttackResult> load_results_jsonl(const std::string &path);

std::string metrics_json_text(const MetricsReport &m);

// Brute-force ASR/Query recount from a freshly re-parsed result file; throws
// RuntimeFailure on any mismatch with the in-memory report.
void self_check_results(const std::string &jsonl_path, const MetricsReport &expected);

// --- report emission (report.cpp) ---

void emit_report(const ExperimentReport &report, const std::string &dir);
void emit_sweep_report(const std::vector<SweepPoint> &points, const std::string &dir);
void emit_budget_report(const std::vector<BudgetPoint> &points, const std::string &dir);
void emit_transfer_report(const TransferMatrix &m, const std::string &dir);

}  // namespace qfta
