#include "qfta/victim.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace qfta {

using nlohmann::json;

bool QueryCounter::exhausted(const std::string &example_id) const {
  return budget && for_example(example_id) >= *budget;
}

void QueryCounter::count(const std::string &example_id) {
  ++total;
  ++per_example[example_id];
}

long QueryCounter::for_example(const std::string &example_id) const {
  auto it = per_example.find(example_id);
  return it == per_example.end() ? 0 : it->second;
}

Eigen::RowVector2d VictimModel::logits(const std::string &text) const {
  auto ids = tokenizer.encode(text);
  if (ids.empty()) ids.push_back(Tokenizer::kUnk);
  Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(emb.cols());
  for (int id : ids) f += emb.row(id);
  f /= static_cast<double>(ids.size());
  return f * head_w + head_b.row(0);
}

ClassDistribution VictimModel::classify(const std::string &text) const {
  Eigen::RowVector2d z = logits(text);
  const double mx = z.maxCoeff();
  Eigen::RowVector2d e = (z.array() - mx).exp();
  return {e / e.sum()};
}

int VictimModel::predict(const std::string &text) const {
  Eigen::RowVector2d z = logits(text);
  return z(1) > z(0) ? 1 : 0;
}

namespace {
int arch_dim(const std::string &arch) {
  if (arch == "boe") return 16;
  if (arch == "boe-wide") return 48;
  if (arch == "bow-logreg") return 2;
  throw ConfigError("unknown victim architecture: " + arch);
}
}  // namespace

VictimModel train_victim(const std::string &arch, const DatasetSplit &data,
                         unsigned long seed, double accuracy_floor, double accuracy_warn) {
  if (data.train.empty()) throw DataError("victim training split is empty");
  if (!data.has_both_classes())
    throw DataError("victim training split must contain both classes");

  VictimModel m;
  m.arch = arch;
  const int de = arch_dim(arch);

  std::vector<std::string> texts;
  for (const auto &e : data.train) texts.push_back(e.text);
  m.tokenizer = Tokenizer::build(texts);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1);
  m.emb = Mat(m.tokenizer.vocab_size(), de);
  for (Eigen::Index i = 0; i < m.emb.rows(); ++i)
    for (int j = 0; j < de; ++j) m.emb(i, j) = dist(rng);
  m.head_w = Mat(de, 2);
  for (int i = 0; i < de; ++i)
    for (int j = 0; j < 2; ++j) m.head_w(i, j) = dist(rng);
  m.head_b = Mat::Zero(1, 2);

  std::vector<std::vector<int>> ids(data.train.size());
  for (size_t i = 0; i < data.train.size(); ++i) {
    ids[i] = m.tokenizer.encode(data.train[i].text);
    if (ids[i].empty()) ids[i].push_back(Tokenizer::kUnk);
  }

  const int epochs = 30;
  const double lr = 0.5;
  std::vector<size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t i : order) {
      Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(de);
      for (int id : ids[i]) f += m.emb.row(id);
      const double inv_n = 1.0 / static_cast<double>(ids[i].size());
      f *= inv_n;
      Eigen::RowVector2d z = f * m.head_w + m.head_b.row(0);
      const double mx = z.maxCoeff();
      Eigen::RowVector2d p = (z.array() - mx).exp();
      p /= p.sum();
      Eigen::RowVector2d dz = p;
      dz(data.train[i].label) -= 1.0;
      Eigen::RowVectorXd df = dz * m.head_w.transpose();
      m.head_w -= lr * f.transpose() * dz;
      m.head_b.row(0) -= lr * dz;
      for (int id : ids[i]) m.emb.row(id) -= lr * inv_n * df;
    }
  }

  long correct = 0;
  for (const auto &e : data.test) correct += m.predict(e.text) == e.label ? 1 : 0;
  m.clean_accuracy =
      data.test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.test.size());
  if (m.clean_accuracy < accuracy_floor)
    throw DataError("victim clean accuracy " + std::to_string(m.clean_accuracy) +
                    " below floor; refusing to register");
  m.low_accuracy_warning = m.clean_accuracy < accuracy_warn;
  m.model_id = arch + "-s" + std::to_string(seed);
  return m;
}

void VictimModel::save(const std::string &path) const {
  json j;
  j["model_id"] = model_id;
  j["arch"] = arch;
  j["dataset_id"] = dataset_id;
  j["clean_accuracy"] = clean_accuracy;
  j["low_accuracy_warning"] = low_accuracy_warning;
  j["vocab"] = tokenizer.words();
  auto dump_mat = [](const Mat &m) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r(static_cast<size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) r[static_cast<size_t>(c)] = m(i, c);
      rows.push_back(std::move(r));
    }
    return rows;
  };
  j["emb"] = dump_mat(emb);
  j["head_w"] = dump_mat(head_w);
  j["head_b"] = dump_mat(head_b);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write victim checkpoint: " + path);
  out << j.dump() << "\n";
}

VictimModel VictimModel::load(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("victim checkpoint not found: " + path);
  json j;
  in >> j;
  VictimModel m;
  m.model_id = j.value("model_id", "");
  m.arch = j.value("arch", "boe");
  m.dataset_id = j.value("dataset_id", "");
  m.clean_accuracy = j.value("clean_accuracy", 0.0);
  m.low_accuracy_warning = j.value("low_accuracy_warning", false);
  m.tokenizer.set_words(j.at("vocab").get<std::vector<std::string>>());
  auto load_mat = [](const json &rows) {
    Mat m(rows.size(), rows.empty() ? 0 : rows.at(0).size());
    for (size_t i = 0; i < rows.size(); ++i)
      for (size_t c = 0; c < rows.at(i).size(); ++c)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
            rows.at(i).at(c).get<double>();
    return m;
  };
  m.emb = load_mat(j.at("emb"));
  m.head_w = load_mat(j.at("head_w"));
  m.head_b = load_mat(j.at("head_b"));
  return m;
}

std::optional<int> classify_counted(const VictimModel &victim, QueryCounter &counter,
                                    const std::string &text, const std::string &example_id) {
  if (counter.exhausted(example_id)) return std::nullopt;
  counter.count(example_id);
  return victim.predict(text);
}

AttackResult attack_trial(const VictimModel &victim, VictimSession &session,
                          const Example &example, const std::string &adversarial_text,
                          const std::string &attacker_id, long loop_queries_used) {
  AttackResult r;
  r.example_id = example.id;
  r.original = example.text;
  r.adversarial = adversarial_text;
  r.attacker_id = attacker_id;
  r.victim_id = victim.model_id;
  r.queries_attack_loop = loop_queries_used;

  auto orig_pred = classify_counted(victim, session.eligibility, example.text, example.id);
  if (!orig_pred) throw RuntimeFailure("eligibility counter unexpectedly capped");
  if (*orig_pred != example.label) {
    r.eligible = false;
    r.queries_total = loop_queries_used + 1;
    return r;
  }
  r.eligible = true;

  auto adv_pred =
      classify_counted(victim, session.verification, adversarial_text, example.id);
  if (!adv_pred) throw RuntimeFailure("verification counter unexpectedly capped");
  r.success = *adv_pred != example.label;
  r.queries_total = loop_queries_used + 2;
  return r;
}

AttackResult baseline_random_perturb(const Example &example, int budget,
                                     const VictimModel &victim, VictimSession &session,
                                     unsigned long seed, double prefix_ratio) {
  AttackResult r;
  r.example_id = example.id;
  r.original = example.text;
  r.attacker_id = "random-perturb";
  r.victim_id = victim.model_id;

  auto orig_pred = classify_counted(victim, session.eligibility, example.text, example.id);
  if (!orig_pred) throw RuntimeFailure("eligibility counter unexpectedly capped");
  r.queries_total = 1;
  if (*orig_pred != example.label) {
    r.eligible = false;
    r.adversarial = example.text;
    return r;
  }
  r.eligible = true;

  std::mt19937_64 rng(seed);
  auto words = split_words(example.text);
  const size_t prefix_len = static_cast<size_t>(
      std::ceil(prefix_ratio * static_cast<double>(words.size()) - 1e-12));
  r.adversarial = example.text;
  if (budget < 1 || prefix_len >= words.size()) {
    r.queries_attack_loop = 0;
    return r;  // nothing perturbable: immediate failure
  }

  for (int round = 1; round <= budget; ++round) {
    const size_t at =
        std::uniform_int_distribution<size_t>(prefix_len, words.size() - 1)(rng);
    std::string &w = words[at];
    if (!w.empty()) {
      const size_t ci = std::uniform_int_distribution<size_t>(0, w.size() - 1)(rng);
      if (w.size() >= 2 && std::uniform_int_distribution<int>(0, 1)(rng) == 0) {
        const size_t cj = ci + 1 < w.size() ? ci + 1 : ci - 1;
        std::swap(w[ci], w[cj]);
      } else {
        w.erase(ci, 1);
      }
    }
    std::string cand;
    for (const auto &ww : words) {
      if (!cand.empty()) cand.push_back(' ');
      cand += ww;
    }
    auto pred = classify_counted(victim, session.loop, cand, example.id);
    if (!pred) {  // budget gate on the loop counter fired
      r.queries_attack_loop = session.loop.for_example(example.id);
      r.queries_total = r.queries_attack_loop + 1;
      return r;
    }
    if (*pred != example.label) {
      r.success = true;
      r.adversarial = cand;
      r.queries_attack_loop = round;
      r.queries_total = static_cast<long>(round) + 1;
      return r;
    }
    r.adversarial = cand;
  }
  r.queries_attack_loop = budget;
  r.queries_total = static_cast<long>(budget) + 1;
  return r;
}

}  // namespace qfta
