// Command-line front end: experiment orchestration over the attack toolkit.
#include "qfta/harness.hpp"
#include "qfta/synth.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace qfta;
namespace fs = std::filesystem;

namespace {

struct GlobalOpts {
  std::string config;
  std::optional<unsigned long> seed;
  std::string out;
  std::string cache_dir;
  bool verbose = false;
};

ExperimentConfig load_config(const GlobalOpts &g) {
  if (g.config.empty()) throw ConfigError("missing --config");
  ExperimentConfig cfg = ExperimentConfig::from_file(g.config);
  if (g.seed) {
    cfg.eval.seed = *g.seed;
    cfg.attack.seed = *g.seed;
  }
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (!g.cache_dir.empty()) cfg.cache_dir = g.cache_dir;
  cfg.validate();
  return cfg;
}

std::vector<double> parse_doubles(const std::string &csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::vector<int> parse_ints(const std::string &csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::vector<std::string> parse_strings(const std::string &csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(tok);
  return out;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Hard-black-box adversarial text generation toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "override attack/eval seeds");
  app.add_option("--out", g.out, "override output directory");
  app.add_option("--cache-dir", g.cache_dir, "override artifact cache directory");
  app.add_flag("-v,--verbose", g.verbose, "progress output on stderr");

  auto *synth = app.add_subcommand("synth", "generate the synthetic desk-scale task");
  std::string synth_dir = "data";
  unsigned long synth_seed = 1;
  int synth_train = 800, synth_test = 400, synth_bg = 1500;
  synth->add_option("--dir", synth_dir);
  synth->add_option("--task-seed", synth_seed);
  synth->add_option("--n-train", synth_train);
  synth->add_option("--n-test", synth_test);
  synth->add_option("--n-background", synth_bg);

  auto *pretrain = app.add_subcommand("pretrain-generator", "pretrain and cache the generator");
  std::string pretrain_save;
  pretrain->add_option("--save", pretrain_save, "also copy the checkpoint to this path");

  auto *tvictim = app.add_subcommand("train-victim", "train (or load cached) victim classifier");
  std::string victim_save;
  tvictim->add_option("--save", victim_save, "also write the checkpoint to this path");

  auto *tsur = app.add_subcommand("train-surrogate", "train the surrogate head on the cross dataset");

  auto *attack = app.add_subcommand("attack", "generate adversarial texts (no victim contact)");
  auto *evaluate = app.add_subcommand("evaluate", "full experiment: attack + adjudication + metrics");

  auto *sweep = app.add_subcommand("sweep", "lambda/prefix-ratio ablation grid");
  std::string sweep_lambdas = "0.97", sweep_ratios = "0.3,0.5,0.7";
  sweep->add_option("--lambdas", sweep_lambdas, "comma-separated fusion weights");
  sweep->add_option("--ratios", sweep_ratios, "comma-separated prefix ratios");

  auto *budget = app.add_subcommand("budget-curve", "ASR vs per-example query budget");
  std::string budget_list = "1,5,10,20", attacker_file;
  budget->add_option("--budgets", budget_list, "comma-separated budgets");
  budget->add_option("--attacker-file", attacker_file,
                     "JSONL of precomputed external attacker outputs");

  auto *transfer = app.add_subcommand("transfer", "ASR difference ratios across victims");
  std::string victims_csv = "boe:42,boe-wide:42,bow-logreg:42", reference = "boe:42";
  transfer->add_option("--victims", victims_csv, "comma-separated arch:seed victim specs");
  transfer->add_option("--reference", reference, "reference victim spec");

  auto *report = app.add_subcommand("report", "re-render reports from a persisted run");
  std::string run_dir;
  report->add_option("--run-dir", run_dir, "directory with results.jsonl + config.json")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      write_synth_task(synth_dir, synth_seed, synth_train, synth_test, synth_bg);
      std::printf("synthetic task written to %s\n", synth_dir.c_str());
      return 0;
    }

    ExperimentConfig cfg = load_config(g);

    if (*pretrain) {
      DatasetRegistry reg = DatasetRegistry::load(cfg.registry_path);
      const auto &se = reg.get(cfg.surrogate_dataset());
      auto data = load_dataset(se.path, se.format);
      auto lm = get_generator(cfg, data, g.verbose);
      if (!pretrain_save.empty()) lm->save(pretrain_save);
      std::printf("generator %s ready (vocab %d, %ld params, digest %s)\n",
                  lm->model_id.c_str(), lm->vocab_size(), lm->w.n_params(),
                  lm->w.digest().substr(0, 16).c_str());
    } else if (*tvictim) {
      DatasetRegistry reg = DatasetRegistry::load(cfg.registry_path);
      const auto &ve = reg.get(cfg.victim.dataset);
      auto data = load_dataset(ve.path, ve.format);
      VictimModel v = get_victim(cfg, data, g.verbose);
      if (!victim_save.empty()) v.save(victim_save);
      std::printf("victim %s on %s: clean accuracy %.3f%s\n", v.model_id.c_str(),
                  cfg.victim.dataset.c_str(), v.clean_accuracy,
                  v.low_accuracy_warning ? " (low-accuracy warning)" : "");
    } else if (*tsur) {
      Pipeline pl = build_pipeline(cfg, g.verbose);
      std::printf("surrogate head ready: %ld trainable params on top of frozen %s\n",
                  pl.surrogate.trainable_params(), pl.lm->model_id.c_str());
    } else if (*attack) {
      Pipeline pl = build_pipeline(cfg, g.verbose);
      EvalSample eval = sample_eval_set(pl.victim_data,
                                        static_cast<size_t>(cfg.eval.n_samples),
                                        cfg.eval.seed);
      fs::create_directories(cfg.out_dir);
      std::ofstream out(cfg.out_dir + "/attacks.jsonl");
      for (const auto &e : eval.examples) {
        TokenizedExample te{e.id, pl.lm->tokenizer.encode(e.text), e.label};
        nlohmann::json j;
        j["example_id"] = e.id;
        j["original"] = e.text;
        try {
          auto res = generate_adversarial(te, pl.surrogate, cfg.attack);
          j["adversarial"] = res.text;
          j["forward_passes"] = res.forward_passes;
        } catch (const std::exception &ex) {
          j["error"] = ex.what();
        }
        out << j.dump() << "\n";
      }
      std::printf("adversarial texts written to %s/attacks.jsonl\n", cfg.out_dir.c_str());
    } else if (*evaluate) {
      ExperimentReport rep = run_experiment(cfg, g.verbose);
      emit_report(rep, rep.run_dir);
      std::printf("%srun %s: ASR %s, mean query %s -> %s\n",
                  rep.reused_cached ? "(cached) " : "", rep.config_digest.substr(0, 16).c_str(),
                  rep.metrics.asr ? std::to_string(*rep.metrics.asr).c_str() : "n/a",
                  rep.metrics.mean_query ? std::to_string(*rep.metrics.mean_query).c_str()
                                         : "inf",
                  rep.run_dir.c_str());
    } else if (*sweep) {
      auto points = sweep_ablation(cfg, parse_doubles(sweep_lambdas),
                                   parse_doubles(sweep_ratios), g.verbose);
      emit_sweep_report(points, cfg.out_dir + "/sweep");
      std::printf("sweep report in %s/sweep\n", cfg.out_dir.c_str());
    } else if (*budget) {
      Pipeline pl = build_pipeline(cfg, g.verbose);
      GenerativeAttacker gen(&pl.surrogate, cfg.attack);
      RandomPerturbAttacker rnd(cfg.attack.seed, cfg.attack.prefix_ratio);
      std::vector<AttackerAdapter *> attackers = {&gen, &rnd};
      std::unique_ptr<FileAttacker> file;
      if (!attacker_file.empty()) {
        file = std::make_unique<FileAttacker>(attacker_file, "external");
        attackers.push_back(file.get());
      }
      auto points = budget_curve(cfg, attackers, parse_ints(budget_list), g.verbose);
      emit_budget_report(points, cfg.out_dir + "/budget");
      std::printf("budget report in %s/budget\n", cfg.out_dir.c_str());
    } else if (*transfer) {
      auto m = transfer_matrix(cfg, parse_strings(victims_csv), reference, g.verbose);
      emit_transfer_report(m, cfg.out_dir + "/transfer");
      std::printf("transfer report in %s/transfer\n", cfg.out_dir.c_str());
    } else if (*report) {
      ExperimentReport rep;
      rep.cfg = ExperimentConfig::from_file(run_dir + "/config.json");
      rep.config_digest = rep.cfg.digest();
      rep.results = load_results_jsonl(run_dir + "/results.jsonl");
      // Re-derive the aggregate numbers from the persisted per-example rows.
      NullEncoder enc;
      NullScorer scorer;
      NullChecker checker;
      rep.metrics = compute_report(rep.results, enc, scorer, checker);
      double use_sum = 0, ppl_sum = 0, di_sum = 0;
      for (const auto &r : rep.results) {
        if (!r.success || r.errored) continue;
        if (r.use_similarity) { use_sum += *r.use_similarity; ++rep.metrics.n_use; }
        if (r.perplexity) { ppl_sum += *r.perplexity; ++rep.metrics.n_ppl; }
        if (r.delta_i) { di_sum += *r.delta_i; ++rep.metrics.n_delta_i; }
      }
      if (rep.metrics.n_use) rep.metrics.use_mean = use_sum / rep.metrics.n_use;
      if (rep.metrics.n_ppl) rep.metrics.ppl_mean = ppl_sum / rep.metrics.n_ppl;
      if (rep.metrics.n_delta_i) rep.metrics.delta_i_mean = di_sum / rep.metrics.n_delta_i;
      rep.run_dir = run_dir;
      emit_report(rep, run_dir);
      std::printf("report re-rendered in %s\n", run_dir.c_str());
    }
    return 0;
  } catch (const ConfigError &e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError &e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 4;
  }
}
