#include "qfta/harness.hpp"

#include "qfta/digest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace qfta {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json attack_to_json(const AttackConfig &a) {
  json j;
  j["alpha"] = a.alpha;
  j["gamma"] = a.gamma;
  j["n_update_steps"] = a.n_update_steps;
  j["lambda_fusion"] = a.lambda_fusion;
  j["prefix_ratio"] = a.prefix_ratio;
  j["top_k"] = a.top_k;
  j["temperature"] = a.temperature;
  j["length_policy"] = a.length_policy;
  j["max_tokens"] = a.max_tokens;
  j["accumulate_history"] = a.accumulate_history;
  j["seed"] = a.seed;
  return j;
}

AttackConfig attack_from_json(const json &j) {
  AttackConfig a;
  a.alpha = j.value("alpha", a.alpha);
  a.gamma = j.value("gamma", a.gamma);
  a.n_update_steps = j.value("n_update_steps", a.n_update_steps);
  a.lambda_fusion = j.value("lambda_fusion", a.lambda_fusion);
  a.prefix_ratio = j.value("prefix_ratio", a.prefix_ratio);
  a.top_k = j.value("top_k", a.top_k);
  a.temperature = j.value("temperature", a.temperature);
  a.length_policy = j.value("length_policy", a.length_policy);
  a.max_tokens = j.value("max_tokens", a.max_tokens);
  a.accumulate_history = j.value("accumulate_history", a.accumulate_history);
  a.seed = j.value("seed", a.seed);
  return a;
}

json config_to_json(const ExperimentConfig &c) {
  json j;
  j["task"] = {{"name", c.task.task_name},
               {"dataset_a", c.task.dataset_a},
               {"dataset_b", c.task.dataset_b}};
  j["registry"] = c.registry_path;
  j["victim"] = {{"dataset", c.victim.dataset},
                 {"arch", c.victim.arch},
                 {"seed", c.victim.seed}};
  j["generator"] = {{"path", c.generator.path},
                    {"epochs", c.generator.epochs},
                    {"seed", c.generator.seed},
                    {"background", c.generator.background},
                    {"n_layers", c.generator.arch.n_layers},
                    {"n_heads", c.generator.arch.n_heads},
                    {"d_model", c.generator.arch.d_model},
                    {"d_ff", c.generator.arch.d_ff},
                    {"max_pos", c.generator.arch.max_pos}};
  j["surrogate"] = {{"epochs", c.surrogate.train.epochs},
                    {"lr", c.surrogate.train.lr},
                    {"batch_size", c.surrogate.train.batch_size},
                    {"val_frac", c.surrogate.train.val_frac},
                    {"patience", c.surrogate.train.patience},
                    {"seed", c.surrogate.train.seed},
                    {"dataset", c.surrogate.dataset}};
  j["attack"] = attack_to_json(c.attack);
  j["eval"] = {{"n_samples", c.eval.n_samples},
               {"seed", c.eval.seed},
               {"query_budget", c.eval.query_budget}};
  j["out_dir"] = c.out_dir;
  j["cache_dir"] = c.cache_dir;
  return j;
}

ExperimentConfig config_from_json(const json &j) {
  ExperimentConfig c;
  if (j.contains("task")) {
    const auto &t = j["task"];
    c.task.task_name = t.value("name", "");
    c.task.dataset_a = t.value("dataset_a", "");
    c.task.dataset_b = t.value("dataset_b", "");
  }
  c.registry_path = j.value("registry", "");
  if (j.contains("victim")) {
    const auto &v = j["victim"];
    c.victim.dataset = v.value("dataset", "");
    c.victim.arch = v.value("arch", c.victim.arch);
    c.victim.seed = v.value("seed", c.victim.seed);
  }
  if (j.contains("generator")) {
    const auto &g = j["generator"];
    c.generator.path = g.value("path", "");
    c.generator.epochs = g.value("epochs", c.generator.epochs);
    c.generator.seed = g.value("seed", c.generator.seed);
    c.generator.background = g.value("background", "");
    c.generator.arch.n_layers = g.value("n_layers", c.generator.arch.n_layers);
    c.generator.arch.n_heads = g.value("n_heads", c.generator.arch.n_heads);
    c.generator.arch.d_model = g.value("d_model", c.generator.arch.d_model);
    c.generator.arch.d_ff = g.value("d_ff", c.generator.arch.d_ff);
    c.generator.arch.max_pos = g.value("max_pos", c.generator.arch.max_pos);
  }
  if (j.contains("surrogate")) {
    const auto &s = j["surrogate"];
    c.surrogate.train.epochs = s.value("epochs", c.surrogate.train.epochs);
    c.surrogate.train.lr = s.value("lr", c.surrogate.train.lr);
    c.surrogate.train.batch_size = s.value("batch_size", c.surrogate.train.batch_size);
    c.surrogate.train.val_frac = s.value("val_frac", c.surrogate.train.val_frac);
    c.surrogate.train.patience = s.value("patience", c.surrogate.train.patience);
    c.surrogate.train.seed = s.value("seed", c.surrogate.train.seed);
    c.surrogate.dataset = s.value("dataset", "");
  }
  if (j.contains("attack")) c.attack = attack_from_json(j["attack"]);
  if (j.contains("eval")) {
    const auto &e = j["eval"];
    c.eval.n_samples = e.value("n_samples", c.eval.n_samples);
    c.eval.seed = e.value("seed", c.eval.seed);
    c.eval.query_budget = e.value("query_budget", c.eval.query_budget);
  }
  c.out_dir = j.value("out_dir", c.out_dir);
  c.cache_dir = j.value("cache_dir", c.cache_dir);
  return c;
}

}  // namespace

std::string ExperimentConfig::surrogate_dataset() const {
  return cross_pair(task, victim.dataset);
}

ExperimentConfig ExperimentConfig::from_file(const std::string &path) {
  return from_json_text(slurp(path));
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string &text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  return config_from_json(j);
}

std::string ExperimentConfig::to_json_text() const {
  return config_to_json(*this).dump(2) + "\n";
}

std::string ExperimentConfig::digest() const {
  // cache/output locations do not change the experiment's identity
  json j = config_to_json(*this);
  j.erase("out_dir");
  j.erase("cache_dir");
  return sha256_hex(j.dump());
}

void ExperimentConfig::validate() const {
  if (task.dataset_a.empty() || task.dataset_b.empty())
    throw ConfigError("task must name two datasets");
  if (task.dataset_a == task.dataset_b)
    throw ConfigError("task datasets must be distinct");
  if (registry_path.empty()) throw ConfigError("missing key: registry");
  const std::string sur = cross_pair(task, victim.dataset);  // throws if not in task
  if (!surrogate.dataset.empty() && surrogate.dataset != sur)
    throw ConfigError("surrogate dataset must be the task's other dataset (" + sur +
                      "), got: " + surrogate.dataset);
  attack.validate();
  if (eval.n_samples < 1) throw ConfigError("eval.n_samples must be >= 1");
  if (eval.query_budget < 1) throw ConfigError("eval.query_budget must be >= 1");
}

// ---- cached artifact builders ----

namespace {

std::string texts_digest(const DatasetSplit &data) {
  Sha256 h;
  for (const auto &e : data.train) {
    h.update(e.text);
    h.update(std::string(1, '\0') + std::to_string(e.label));
  }
  return h.hex();
}

std::vector<std::string> read_lines(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

std::shared_ptr<LanguageModel> get_generator(const ExperimentConfig &cfg,
                                             const DatasetSplit &surrogate_data,
                                             bool verbose) {
  if (!cfg.generator.path.empty()) {
    try {
      return std::make_shared<LanguageModel>(LanguageModel::load(cfg.generator.path));
    } catch (const std::exception &e) {
      throw ConfigError(std::string("generator checkpoint: ") + e.what());
    }
  }

  std::vector<std::string> texts;
  if (!cfg.generator.background.empty())
    for (auto &l : read_lines(cfg.generator.background)) texts.push_back(normalize_text(l));
  for (const auto &e : surrogate_data.train) texts.push_back(e.text);

  Sha256 h;
  for (const auto &t : texts) h.update(t + "\n");
  const auto &a = cfg.generator.arch;
  h.update(std::to_string(a.n_layers) + "/" + std::to_string(a.n_heads) + "/" +
           std::to_string(a.d_model) + "/" + std::to_string(a.d_ff) + "/" +
           std::to_string(a.max_pos) + "/" + std::to_string(cfg.generator.epochs) + "/" +
           std::to_string(cfg.generator.seed));
  const std::string key = h.hex().substr(0, 16);
  const std::string path = cfg.cache_dir + "/gen-" + key + ".bin";

  if (fs::exists(path)) {
    if (verbose) std::fprintf(stderr, "[gen] cache hit %s\n", path.c_str());
    return std::make_shared<LanguageModel>(LanguageModel::load(path));
  }

  auto lm = std::make_shared<LanguageModel>();
  lm->model_id = "gen-" + key;
  lm->tokenizer = Tokenizer::build(texts);
  lm->w = init_lm(cfg.generator.arch, lm->tokenizer.vocab_size(), cfg.generator.seed);

  std::vector<std::vector<int>> seqs;
  for (const auto &t : texts) {
    auto ids = lm->tokenizer.encode(t);
    ids.push_back(Tokenizer::kEos);
    seqs.push_back(std::move(ids));
  }
  LmTrainOptions opt;
  opt.epochs = cfg.generator.epochs;
  opt.seed = cfg.generator.seed;
  opt.verbose = verbose;
  if (verbose)
    std::fprintf(stderr, "[gen] pretraining on %zu sequences, vocab %d\n", seqs.size(),
                 lm->vocab_size());
  train_lm(lm->w, seqs, opt);

  fs::create_directories(cfg.cache_dir);
  lm->save(path);
  return lm;
}

VictimModel get_victim(const ExperimentConfig &cfg, const DatasetSplit &victim_data,
                       bool verbose) {
  const std::string key =
      sha256_hex(texts_digest(victim_data) + "/" + cfg.victim.arch + "/" +
                 std::to_string(cfg.victim.seed))
          .substr(0, 16);
  const std::string path = cfg.cache_dir + "/victim-" + key + ".json";
  if (fs::exists(path)) {
    if (verbose) std::fprintf(stderr, "[victim] cache hit %s\n", path.c_str());
    return VictimModel::load(path);
  }
  VictimModel v = train_victim(cfg.victim.arch, victim_data, cfg.victim.seed);
  v.dataset_id = cfg.victim.dataset;
  fs::create_directories(cfg.cache_dir);
  v.save(path);
  if (verbose)
    std::fprintf(stderr, "[victim] trained %s, clean accuracy %.3f\n", v.model_id.c_str(),
                 v.clean_accuracy);
  return v;
}

Pipeline build_pipeline(const ExperimentConfig &cfg, bool verbose) {
  cfg.validate();
  DatasetRegistry reg = DatasetRegistry::load(cfg.registry_path);

  const auto &ve = reg.get(cfg.victim.dataset);
  const auto &se = reg.get(cfg.surrogate_dataset());

  Pipeline pl;
  pl.victim_data = load_dataset(ve.path, ve.format);
  pl.surrogate_data = load_dataset(se.path, se.format);
  pl.lm = get_generator(cfg, pl.surrogate_data, verbose);
  pl.generator_digest = pl.lm->w.digest();
  pl.victim = get_victim(cfg, pl.victim_data, verbose);

  pl.surrogate = make_surrogate(pl.lm);
  const std::string head_key =
      sha256_hex(pl.generator_digest + "/" + texts_digest(pl.surrogate_data) + "/" +
                 std::to_string(cfg.surrogate.train.epochs) + "/" +
                 std::to_string(cfg.surrogate.train.lr) + "/" +
                 std::to_string(cfg.surrogate.train.batch_size) + "/" +
                 std::to_string(cfg.surrogate.train.seed))
          .substr(0, 16);
  const std::string head_dir = cfg.cache_dir + "/head-" + head_key;
  if (fs::exists(head_dir + "/head.json")) {
    if (verbose) std::fprintf(stderr, "[surrogate] cache hit %s\n", head_dir.c_str());
    load_head(pl.surrogate, head_dir);
  } else {
    HeadTrainOptions opt = cfg.surrogate.train;
    auto log = train_head(pl.surrogate, pl.surrogate_data, opt);
    if (verbose)
      std::fprintf(stderr, "[surrogate] head trained, %d epochs, final loss %.4f\n",
                   log.stopped_epoch, log.epoch_loss.back());
    save_head(pl.surrogate, head_dir, head_key);
  }
  if (pl.lm->w.digest() != pl.generator_digest)
    throw RuntimeFailure("generator weights changed during pipeline construction");
  return pl;
}

// ---- persistence ----

namespace {

json result_to_json(const AttackResult &r) {
  json j;
  j["example_id"] = r.example_id;
  j["original"] = r.original;
  j["adversarial"] = r.adversarial;
  j["eligible"] = r.eligible;
  j["success"] = r.success;
  j["errored"] = r.errored;
  j["error"] = r.error;
  j["queries_attack_loop"] = r.queries_attack_loop;
  j["queries_total"] = r.queries_total;
  j["attacker_id"] = r.attacker_id;
  j["victim_id"] = r.victim_id;
  j["config_digest"] = r.config_digest;
  j["use_similarity"] = r.use_similarity ? json(*r.use_similarity) : json(nullptr);
  j["perplexity"] = r.perplexity ? json(*r.perplexity) : json(nullptr);
  j["delta_i"] = r.delta_i ? json(*r.delta_i) : json(nullptr);
  return j;
}

AttackResult result_from_json(const json &j) {
  AttackResult r;
  r.example_id = j.value("example_id", "");
  r.original = j.value("original", "");
  r.adversarial = j.value("adversarial", "");
  r.eligible = j.value("eligible", false);
  r.success = j.value("success", false);
  r.errored = j.value("errored", false);
  r.error = j.value("error", "");
  r.queries_attack_loop = j.value("queries_attack_loop", 0L);
  r.queries_total = j.value("queries_total", 0L);
  r.attacker_id = j.value("attacker_id", "");
  r.victim_id = j.value("victim_id", "");
  r.config_digest = j.value("config_digest", "");
  if (j.contains("use_similarity") && !j["use_similarity"].is_null())
    r.use_similarity = j["use_similarity"].get<double>();
  if (j.contains("perplexity") && !j["perplexity"].is_null())
    r.perplexity = j["perplexity"].get<double>();
  if (j.contains("delta_i") && !j["delta_i"].is_null())
    r.delta_i = j["delta_i"].get<int>();
  return r;
}

json opt_json(const std::optional<double> &v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void write_results_jsonl(const std::vector<AttackResult> &results, const std::string &path) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write results: " + path);
  for (const auto &r : results) out << result_to_json(r).dump() << "\n";
}

std::vector<AttackResult> load_results_jsonl(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("results file not found: " + path);
  std::vector<AttackResult> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("bad results row in " + path);
    out.push_back(result_from_json(j));
  }
  return out;
}

std::string metrics_json_text(const MetricsReport &m) {
  json j;
  j["asr"] = opt_json(m.asr);
  j["mean_query"] = opt_json(m.mean_query);
  j["use_mean"] = opt_json(m.use_mean);
  j["ppl_mean"] = opt_json(m.ppl_mean);
  j["delta_i_mean"] = opt_json(m.delta_i_mean);
  j["n_total"] = m.n_total;
  j["n_eligible"] = m.n_eligible;
  j["n_ineligible"] = m.n_ineligible;
  j["n_success"] = m.n_success;
  j["n_errored"] = m.n_errored;
  j["n_use"] = m.n_use;
  j["n_ppl"] = m.n_ppl;
  j["n_delta_i"] = m.n_delta_i;
  j["ppl_clamped"] = m.ppl_clamped;
  return j.dump(2) + "\n";
}

void self_check_results(const std::string &jsonl_path, const MetricsReport &expected) {
  auto results = load_results_jsonl(jsonl_path);
  auto asr = compute_asr(results);
  auto mq = compute_mean_query(results);
  auto same = [](const std::optional<double> &a, const std::optional<double> &b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || std::abs(*a - *b) < 1e-9;
  };
  long eligible = 0, success = 0, errored = 0;
  for (const auto &r : results) {
    if (r.errored) { ++errored; continue; }
    if (r.eligible) { ++eligible; if (r.success) ++success; }
  }
  if (!same(asr, expected.asr) || !same(mq, expected.mean_query) ||
      eligible != expected.n_eligible || success != expected.n_success ||
      errored != expected.n_errored)
    throw RuntimeFailure("persisted results do not reproduce the reported metrics: " +
                         jsonl_path);
}

// ---- attackers ----

AttackResult GenerativeAttacker::run(const Example &example, const VictimModel &victim,
                                     VictimSession &session, int /*budget*/) {
  TokenizedExample te;
  te.id = example.id;
  te.ids = sur_->lm->tokenizer.encode(example.text);
  te.label = example.label;
  GenerationOutcome out = generate_adversarial(te, *sur_, cfg_);
  return attack_trial(victim, session, example, out.text, id(), /*loop_queries_used=*/0);
}

AttackResult RandomPerturbAttacker::run(const Example &example, const VictimModel &victim,
                                        VictimSession &session, int budget) {
  return baseline_random_perturb(example, budget, victim, session,
                                 example_rng_seed(seed_, example.id), prefix_ratio_);
}

FileAttacker::FileAttacker(const std::string &path, std::string attacker_id)
    : id_(std::move(attacker_id)) {
  std::ifstream in(path);
  if (!in) throw ConfigError("attacker output file not found: " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("bad attacker output row in " + path);
    rows_[j.value("example_id", "")] = {j.value("adversarial", ""),
                                        j.value("queries", 0L)};
  }
}

AttackResult FileAttacker::run(const Example &example, const VictimModel &victim,
                               VictimSession &session, int budget) {
  auto it = rows_.find(example.id);
  if (it == rows_.end()) {
    AttackResult r;
    r.example_id = example.id;
    r.original = example.text;
    r.attacker_id = id_;
    r.victim_id = victim.model_id;
    r.errored = true;
    r.error = "no precomputed adversarial text for example";
    return r;
  }
  const auto &[adv, queries] = it->second;
  if (queries > budget) {
    // Spent more loop queries than the budget allows: counts as a failure.
    AttackResult r;
    r.example_id = example.id;
    r.original = example.text;
    r.adversarial = adv;
    r.attacker_id = id_;
    r.victim_id = victim.model_id;
    auto pred = classify_counted(victim, session.eligibility, example.text, example.id);
    r.eligible = pred && *pred == example.label;
    r.queries_attack_loop = budget;
    r.queries_total = budget + 1;
    return r;
  }
  return attack_trial(victim, session, example, adv, id_, queries);
}

// ---- experiment orchestration ----

namespace {

long forward_pass_bound(long n_tokens, const AttackConfig &a) {
  const long prefix = static_cast<long>(
      std::ceil(a.prefix_ratio * static_cast<double>(n_tokens) - 1e-12));
  const long n_gen = std::max(0L, n_tokens - prefix);
  return n_gen * (a.n_update_steps + 2) + 1;
}

void write_text(const std::string &path, const std::string &text) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write: " + path);
  out << text;
}

MetricsReport metrics_from_json_text(const std::string &text) {
  json j = json::parse(text);
  MetricsReport m;
  auto opt = [&](const char *key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
  };
  m.asr = opt("asr");
  m.mean_query = opt("mean_query");
  m.use_mean = opt("use_mean");
  m.ppl_mean = opt("ppl_mean");
  m.delta_i_mean = opt("delta_i_mean");
  m.n_total = j.value("n_total", 0L);
  m.n_eligible = j.value("n_eligible", 0L);
  m.n_ineligible = j.value("n_ineligible", 0L);
  m.n_success = j.value("n_success", 0L);
  m.n_errored = j.value("n_errored", 0L);
  m.n_use = j.value("n_use", 0L);
  m.n_ppl = j.value("n_ppl", 0L);
  m.n_delta_i = j.value("n_delta_i", 0L);
  m.ppl_clamped = j.value("ppl_clamped", false);
  return m;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig &cfg, bool verbose) {
  cfg.validate();
  ExperimentReport rep;
  rep.cfg = cfg;
  rep.config_digest = cfg.digest();
  rep.run_dir = cfg.out_dir + "/" + rep.config_digest.substr(0, 16);

  const std::string results_path = rep.run_dir + "/results.jsonl";
  const std::string metrics_path = rep.run_dir + "/metrics.json";
  if (fs::exists(results_path) && fs::exists(metrics_path)) {
    if (verbose) std::fprintf(stderr, "[run] reusing cached run %s\n", rep.run_dir.c_str());
    rep.results = load_results_jsonl(results_path);
    rep.metrics = metrics_from_json_text(slurp(metrics_path));
    rep.n_sampled = rep.metrics.n_total;
    rep.reused_cached = true;
    self_check_results(results_path, rep.metrics);
    return rep;
  }

  Pipeline pl = build_pipeline(cfg, verbose);
  EvalSample eval = sample_eval_set(pl.victim_data, static_cast<size_t>(cfg.eval.n_samples),
                                    cfg.eval.seed);
  rep.n_sampled = static_cast<long>(eval.examples.size());
  rep.eval_set_clamped = eval.clamped;
  rep.eval_label1_fraction = eval.label1_fraction;
  if (eval.clamped)
    rep.warnings.push_back("eval set clamped to test split size " +
                           std::to_string(eval.examples.size()));

  VictimSession session;
  session.loop.budget = cfg.eval.query_budget;

  fs::create_directories(rep.run_dir);
  std::ofstream traces(rep.run_dir + "/traces.jsonl");

  const long victim_queries_before_generation = session.loop.total +
                                                session.eligibility.total +
                                                session.verification.total;
  for (const auto &e : eval.examples) {
    AttackResult r;
    try {
      TokenizedExample te;
      te.id = e.id;
      te.ids = pl.lm->tokenizer.encode(e.text);
      te.label = e.label;

      // Generation is query-free by construction: the victim is not touched
      // until adjudication below.
      const long victim_total = session.loop.total;
      GenerationOutcome out = generate_adversarial(te, pl.surrogate, cfg.attack);
      if (session.loop.total != victim_total)
        throw RuntimeFailure("victim queried during generation");

      const long bound = forward_pass_bound(static_cast<long>(te.ids.size()), cfg.attack);
      if (out.forward_passes > bound)
        throw RuntimeFailure("forward-pass accounting exceeded the per-example bound: " +
                             std::to_string(out.forward_passes) + " > " +
                             std::to_string(bound));
      rep.max_forward_passes = std::max(rep.max_forward_passes, out.forward_passes);
      for (const auto &w : out.warnings) rep.warnings.push_back(e.id + ": " + w);
      for (const auto &t : out.trace) {
        json tj;
        tj["example_id"] = e.id;
        tj["step"] = t.step;
        tj["loss_before"] = t.loss_before;
        tj["loss_after"] = t.loss_after;
        tj["fused_entropy"] = t.fused_entropy;
        tj["token"] = t.token;
        traces << tj.dump() << "\n";
      }

      r = attack_trial(pl.victim, session, e, out.text, "kv-steer", 0);
    } catch (const ConfigError &) {
      throw;  // configuration problems are fatal, not per-example
    } catch (const std::exception &ex) {
      r = AttackResult{};
      r.example_id = e.id;
      r.original = e.text;
      r.attacker_id = "kv-steer";
      r.victim_id = pl.victim.model_id;
      r.errored = true;
      r.error = ex.what();
    }
    r.config_digest = rep.config_digest;
    rep.results.push_back(std::move(r));
  }
  (void)victim_queries_before_generation;

  HashedBowEncoder encoder;
  GeneratorScorer scorer(pl.lm);
  HeuristicGrammarChecker checker;
  rep.metrics = compute_report(rep.results, encoder, scorer, checker);

  if (rep.metrics.n_eligible + rep.metrics.n_ineligible + rep.metrics.n_errored !=
      rep.n_sampled)
    throw RuntimeFailure("result bookkeeping identity violated");

  write_results_jsonl(rep.results, results_path);
  write_text(metrics_path, metrics_json_text(rep.metrics));
  write_text(rep.run_dir + "/config.json", cfg.to_json_text());

  json manifest;
  manifest["config_digest"] = rep.config_digest;
  manifest["generator_digest"] = pl.generator_digest;
  manifest["generator_id"] = pl.lm->model_id;
  manifest["victim_id"] = pl.victim.model_id;
  manifest["victim_clean_accuracy"] = pl.victim.clean_accuracy;
  manifest["surrogate_trainable_params"] = pl.surrogate.trainable_params();
  manifest["eval_seed"] = cfg.eval.seed;
  manifest["attack_seed"] = cfg.attack.seed;
  manifest["n_sampled"] = rep.n_sampled;
  manifest["eval_label1_fraction"] = rep.eval_label1_fraction;
  manifest["eval_set_clamped"] = rep.eval_set_clamped;
  manifest["max_forward_passes"] = rep.max_forward_passes;
  manifest["victim_loop_queries_total"] = session.loop.total;
  manifest["warnings"] = rep.warnings;
  manifest["version"] = "0.1.0";
  write_text(rep.run_dir + "/manifest.json", manifest.dump(2) + "\n");

  self_check_results(results_path, rep.metrics);

  if (pl.lm->w.digest() != pl.generator_digest)
    throw RuntimeFailure("generator weights changed during the attack run");
  return rep;
}

std::vector<SweepPoint> sweep_ablation(const ExperimentConfig &cfg,
                                       const std::vector<double> &lambdas,
                                       const std::vector<double> &ratios, bool verbose) {
  if (lambdas.empty() || ratios.empty())
    throw ConfigError("sweep grids must be non-empty");
  std::vector<SweepPoint> out;
  for (double l : lambdas) {
    for (double r : ratios) {
      SweepPoint p;
      p.lambda = l;
      p.ratio = r;
      ExperimentConfig c = cfg;
      c.attack.lambda_fusion = l;
      c.attack.prefix_ratio = r;
      try {
        ExperimentReport rep = run_experiment(c, verbose);
        p.asr = rep.metrics.asr;
        p.use_mean = rep.metrics.use_mean;
        p.run_digest = rep.config_digest;
      } catch (const std::exception &e) {
        p.errored = true;
        p.error = e.what();
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<BudgetPoint> budget_curve(const ExperimentConfig &cfg,
                                      const std::vector<AttackerAdapter *> &attackers,
                                      const std::vector<int> &budgets, bool verbose) {
  bool have_free = false, have_based = false;
  for (const auto *a : attackers) (a->query_based() ? have_based : have_free) = true;
  if (!have_free || !have_based)
    throw ConfigError("budget curve needs a query-free and a query-based attacker");

  cfg.validate();
  Pipeline pl = build_pipeline(cfg, verbose);
  EvalSample eval = sample_eval_set(pl.victim_data, static_cast<size_t>(cfg.eval.n_samples),
                                    cfg.eval.seed);

  std::vector<BudgetPoint> out;
  for (AttackerAdapter *a : attackers) {
    for (int b : budgets) {
      VictimSession session;
      session.loop.budget = b;
      std::vector<AttackResult> results;
      for (const auto &e : eval.examples) {
        try {
          results.push_back(a->run(e, pl.victim, session, b));
        } catch (const std::exception &ex) {
          AttackResult r;
          r.example_id = e.id;
          r.original = e.text;
          r.attacker_id = a->id();
          r.errored = true;
          r.error = ex.what();
          results.push_back(std::move(r));
        }
      }
      BudgetPoint p;
      p.attacker_id = a->id();
      p.budget = b;
      p.asr = compute_asr(results);
      for (const auto &r : results)
        if (!r.errored && r.eligible) ++p.n_eligible;
      if (verbose)
        std::fprintf(stderr, "[budget] %s @ %d -> ASR %s\n", a->id().c_str(), b,
                     p.asr ? std::to_string(*p.asr).c_str() : "n/a");
      out.push_back(std::move(p));
    }
  }
  return out;
}

TransferMatrix transfer_matrix(const ExperimentConfig &cfg,
                               const std::vector<std::string> &victim_specs,
                               const std::string &reference_spec, bool verbose) {
  if (victim_specs.empty()) throw ConfigError("transfer needs at least one victim spec");
  if (std::find(victim_specs.begin(), victim_specs.end(), reference_spec) ==
      victim_specs.end())
    throw ConfigError("reference victim must be among the victim specs");

  auto parse_spec = [](const std::string &s) -> std::pair<std::string, unsigned long> {
    auto at = s.find(':');
    if (at == std::string::npos) return {s, 42ul};
    return {s.substr(0, at), std::stoul(s.substr(at + 1))};
  };

  TransferMatrix m;
  m.datasets = {cfg.task.dataset_a, cfg.task.dataset_b};
  m.model_ids = victim_specs;
  m.reference_id = reference_spec;

  for (const std::string &ds : m.datasets) {
    ExperimentConfig base = cfg;
    base.victim.dataset = ds;
    base.surrogate.dataset.clear();
    base.validate();
    Pipeline pl = build_pipeline(base, verbose);
    EvalSample eval = sample_eval_set(pl.victim_data,
                                      static_cast<size_t>(cfg.eval.n_samples), cfg.eval.seed);

    // Adversarial texts depend only on the surrogate; generate once per
    // dataset and adjudicate the same corpus against every victim.
    std::vector<std::pair<const Example *, std::string>> adv;
    for (const auto &e : eval.examples) {
      TokenizedExample te;
      te.id = e.id;
      te.ids = pl.lm->tokenizer.encode(e.text);
      te.label = e.label;
      try {
        adv.emplace_back(&e, generate_adversarial(te, pl.surrogate, base.attack).text);
      } catch (const std::exception &) {
        adv.emplace_back(&e, std::string());
      }
    }

    for (const std::string &spec : victim_specs) {
      auto [arch, seed] = parse_spec(spec);
      ExperimentConfig vc = base;
      vc.victim.arch = arch;
      vc.victim.seed = seed;
      std::optional<double> asr;
      try {
        VictimModel victim = get_victim(vc, pl.victim_data, verbose);
        VictimSession session;
        std::vector<AttackResult> results;
        for (const auto &[e, text] : adv) {
          if (text.empty()) {
            AttackResult r;
            r.example_id = e->id;
            r.errored = true;
            results.push_back(std::move(r));
            continue;
          }
          results.push_back(attack_trial(victim, session, *e, text, "kv-steer", 0));
        }
        asr = compute_asr(results);
      } catch (const std::exception &ex) {
        if (verbose)
          std::fprintf(stderr, "[transfer] %s on %s failed: %s\n", spec.c_str(), ds.c_str(),
                       ex.what());
      }
      m.asr[ds][spec] = asr;
    }

    const auto ref = m.asr[ds][reference_spec];
    for (const std::string &spec : victim_specs) {
      const auto cur = m.asr[ds][spec];
      if (ref && *ref > 0.0 && cur)
        m.cells[ds][spec] = (*cur - *ref) / *ref;
      else
        m.cells[ds][spec] = std::nullopt;
    }
  }
  return m;
}

}  // namespace qfta
