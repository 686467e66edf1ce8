#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qfta/harness.hpp"
#include "qfta/synth.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace qfta;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string &path) {
  std::ifstream in(path);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small but complete on-disk task + config for end-to-end harness checks.
ExperimentConfig desk_config(const std::string &tag) {
  static std::string data_dir;
  if (data_dir.empty()) {
    data_dir = (fs::temp_directory_path() / "qfta_harness_data").string();
    write_synth_task(data_dir, 1, 120, 60, 200);
  }
  ExperimentConfig cfg;
  cfg.task = {"spam", "synthA", "synthB"};
  cfg.registry_path = data_dir + "/registry.json";
  cfg.victim = {"synthA", "boe", 42};
  cfg.generator.epochs = 2;
  cfg.generator.background = data_dir + "/background.txt";
  cfg.generator.arch = {1, 2, 8, 16, 64};
  cfg.attack.alpha = 0.5;
  cfg.attack.n_update_steps = 3;
  cfg.eval.n_samples = 12;
  cfg.out_dir = (fs::temp_directory_path() / ("qfta_runs_" + tag)).string();
  cfg.cache_dir = (fs::temp_directory_path() / "qfta_harness_cache").string();
  return cfg;
}

AttackResult mk(const std::string &id, bool eligible, bool success, long loop) {
  AttackResult r;
  r.example_id = id;
  r.original = "orig text";
  r.adversarial = "adv text";
  r.eligible = eligible;
  r.success = success;
  r.queries_attack_loop = loop;
  r.queries_total = loop + 2;
  r.attacker_id = "x";
  r.victim_id = "v";
  return r;
}

}  // namespace

TEST_CASE("config serialization is a fixed point and digests are stable") {
  ExperimentConfig cfg = desk_config("digest");
  const std::string text1 = cfg.to_json_text();
  ExperimentConfig back = ExperimentConfig::from_json_text(text1);
  CHECK(back.to_json_text() == text1);
  CHECK(back.digest() == cfg.digest());

  // output locations don't change the experiment identity
  ExperimentConfig moved = cfg;
  moved.out_dir = "/somewhere/else";
  moved.cache_dir = "/tmp/other";
  CHECK(moved.digest() == cfg.digest());

  ExperimentConfig changed = cfg;
  changed.attack.lambda_fusion = 0.5;
  CHECK(changed.digest() != cfg.digest());

  CHECK_THROWS_AS(ExperimentConfig::from_json_text("{broken"), ConfigError);
}

TEST_CASE("config validation enforces the cross-dataset protocol") {
  ExperimentConfig cfg = desk_config("validate");
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.surrogate_dataset() == "synthB");

  ExperimentConfig same = cfg;
  same.surrogate.dataset = same.victim.dataset;  // surrogate on the victim's own data
  CHECK_THROWS_AS(same.validate(), ConfigError);

  ExperimentConfig foreign = cfg;
  foreign.victim.dataset = "synthZ";
  CHECK_THROWS_AS(foreign.validate(), ConfigError);

  ExperimentConfig dup = cfg;
  dup.task.dataset_b = dup.task.dataset_a;
  CHECK_THROWS_AS(dup.validate(), ConfigError);

  ExperimentConfig bad_eval = cfg;
  bad_eval.eval.query_budget = 0;
  CHECK_THROWS_AS(bad_eval.validate(), ConfigError);
}

TEST_CASE("results persistence round trip and the self-check") {
  std::vector<AttackResult> rs{mk("a", true, true, 0), mk("b", true, false, 0),
                               mk("c", false, false, 0)};
  rs[0].use_similarity = 0.77;
  const std::string path = (fs::temp_directory_path() / "qfta_results.jsonl").string();
  write_results_jsonl(rs, path);
  auto back = load_results_jsonl(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].example_id == "a");
  CHECK(back[0].success);
  CHECK(back[0].use_similarity == 0.77);
  CHECK(!back[1].use_similarity.has_value());
  CHECK(!back[2].eligible);

  MetricsReport m;
  m.asr = 50.0;
  m.mean_query = 0.0;
  m.n_eligible = 2;
  m.n_success = 1;
  m.n_errored = 0;
  CHECK_NOTHROW(self_check_results(path, m));

  // a tampered result file no longer reproduces the report
  rs[1].success = true;
  write_results_jsonl(rs, path);
  CHECK_THROWS_AS(self_check_results(path, m), RuntimeFailure);
}

TEST_CASE("metrics serialization is deterministic") {
  MetricsReport m;
  m.asr = 33.25;
  m.n_total = 4;
  m.n_eligible = 3;
  CHECK(metrics_json_text(m) == metrics_json_text(m));
  CHECK(metrics_json_text(m).find("\"asr\": 33.25") != std::string::npos);
  CHECK(metrics_json_text(m).find("\"mean_query\": null") != std::string::npos);
}

TEST_CASE("experiment run: bookkeeping, persistence, and cached re-run") {
  ExperimentConfig cfg = desk_config("run");
  fs::remove_all(cfg.out_dir);

  ExperimentReport rep = run_experiment(cfg);
  CHECK(!rep.reused_cached);
  CHECK(rep.n_sampled == 12);
  CHECK(rep.metrics.n_eligible + rep.metrics.n_ineligible + rep.metrics.n_errored == 12);
  CHECK(fs::exists(rep.run_dir + "/results.jsonl"));
  CHECK(fs::exists(rep.run_dir + "/metrics.json"));
  CHECK(fs::exists(rep.run_dir + "/manifest.json"));
  CHECK(fs::exists(rep.run_dir + "/config.json"));
  for (const auto &r : rep.results) {
    CHECK(r.config_digest == rep.config_digest);
    CHECK(r.queries_attack_loop == 0);  // the attacker never queries in-loop
  }

  const std::string metrics_bytes = slurp(rep.run_dir + "/metrics.json");
  ExperimentReport again = run_experiment(cfg);
  CHECK(again.reused_cached);
  CHECK(slurp(again.run_dir + "/metrics.json") == metrics_bytes);
  CHECK(again.results.size() == rep.results.size());

  emit_report(rep, rep.run_dir);
  CHECK(fs::exists(rep.run_dir + "/report.md"));
  CHECK(fs::exists(rep.run_dir + "/results.csv"));
  CHECK(fs::exists(rep.run_dir + "/summary.csv"));
  // one (dataset, attacker) cell -> header plus exactly one row
  std::istringstream summary(slurp(rep.run_dir + "/summary.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(summary, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("degenerate sweep point equals the plain experiment") {
  ExperimentConfig cfg = desk_config("sweep");
  auto points = sweep_ablation(cfg, {cfg.attack.lambda_fusion}, {cfg.attack.prefix_ratio});
  REQUIRE(points.size() == 1);
  CHECK(!points[0].errored);
  ExperimentReport rep = run_experiment(cfg);
  CHECK(points[0].run_digest == rep.config_digest);
  CHECK(points[0].asr == rep.metrics.asr);
  CHECK_THROWS_AS(sweep_ablation(cfg, {}, {0.5}), ConfigError);
}

TEST_CASE("budget curve rejects a missing attacker class") {
  ExperimentConfig cfg = desk_config("budget");
  Pipeline pl = build_pipeline(cfg);
  GenerativeAttacker gen(&pl.surrogate, cfg.attack);
  RandomPerturbAttacker rnd(1, 0.5);
  std::vector<AttackerAdapter *> only_free = {&gen};
  CHECK_THROWS_AS(budget_curve(cfg, only_free, {1}), ConfigError);
  std::vector<AttackerAdapter *> only_based = {&rnd};
  CHECK_THROWS_AS(budget_curve(cfg, only_based, {1}), ConfigError);
}

TEST_CASE("file-based external attacker adapter") {
  ExperimentConfig cfg = desk_config("file");
  Pipeline pl = build_pipeline(cfg);
  Example known = pl.victim_data.test.front();

  const std::string path = (fs::temp_directory_path() / "qfta_ext.jsonl").string();
  std::ofstream(path) << "{\"example_id\": \"" << known.id
                      << "\", \"adversarial\": \"totally new text\", \"queries\": 3}\n";
  FileAttacker ext(path, "external");
  CHECK(ext.query_based());

  VictimSession s;
  auto r = ext.run(known, pl.victim, s, 10);
  CHECK(!r.errored);
  CHECK(r.queries_attack_loop == 3);

  Example unknown{"missing-id", "some text here", 0};
  auto r2 = ext.run(unknown, pl.victim, s, 10);
  CHECK(r2.errored);

  VictimSession s2;
  auto r3 = ext.run(known, pl.victim, s2, 2);  // spent 3 > budget 2
  CHECK(!r3.success);
  CHECK(r3.queries_attack_loop == 2);
  CHECK_THROWS_AS(FileAttacker("/nonexistent/ext.jsonl", "x"), ConfigError);
}

TEST_CASE("transfer matrix has a zero reference column") {
  ExperimentConfig cfg = desk_config("transfer");
  cfg.eval.n_samples = 8;
  auto m = transfer_matrix(cfg, {"boe:42", "boe:43"}, "boe:42");
  REQUIRE(m.datasets.size() == 2);
  for (const auto &ds : m.datasets) {
    REQUIRE(m.cells.at(ds).count("boe:42"));
    const auto ref = m.cells.at(ds).at("boe:42");
    if (m.asr.at(ds).at("boe:42") && *m.asr.at(ds).at("boe:42") > 0.0) {
      REQUIRE(ref.has_value());
      CHECK(*ref == 0.0);
    }
  }
  CHECK_THROWS_AS(transfer_matrix(cfg, {"boe:42"}, "boe:99"), ConfigError);
}
