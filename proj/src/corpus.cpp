#include "qfta/corpus.hpp"

#include "qfta/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace qfta {

using nlohmann::json;

FileFormat parse_format(const std::string &name) {
  if (name == "tsv") return FileFormat::kTsv;
  if (name == "csv") return FileFormat::kCsv;
  if (name == "jsonl") return FileFormat::kJsonl;
  throw ConfigError("unknown dataset format: " + name);
}

namespace {

// Minimal RFC-4180-ish row splitter; handles quoted fields with embedded
// separators and doubled quotes.
std::vector<std::string> split_row(const std::string &line, char sep) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == sep) {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

struct RawRecord {
  std::string id, text, split;
  int label = -1;
};

std::vector<RawRecord> read_records(const std::string &path, FileFormat format) {
  std::ifstream in(path);
  if (!in) throw ConfigError("dataset file not found: " + path);
  std::vector<RawRecord> records;
  std::string line;

  if (format == FileFormat::kJsonl) {
    long row = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw DataError("bad jsonl row in " + path);
      RawRecord r;
      r.text = j.value("text", "");
      if (j.contains("label") && j["label"].is_number_integer())
        r.label = j["label"].get<int>();
      r.id = j.value("id", "row" + std::to_string(row));
      r.split = j.value("split", "");
      records.push_back(std::move(r));
      ++row;
    }
    return records;
  }

  const char sep = format == FileFormat::kTsv ? '\t' : ',';
  if (!std::getline(in, line)) return records;
  auto header = split_row(line, sep);
  int text_col = -1, label_col = -1, id_col = -1, split_col = -1;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "text") text_col = static_cast<int>(i);
    if (header[i] == "label") label_col = static_cast<int>(i);
    if (header[i] == "id") id_col = static_cast<int>(i);
    if (header[i] == "split") split_col = static_cast<int>(i);
  }
  if (text_col < 0 || label_col < 0)
    throw DataError("dataset header must contain text,label columns: " + path);
  long row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_row(line, sep);
    RawRecord r;
    if (static_cast<size_t>(text_col) < fields.size()) r.text = fields[static_cast<size_t>(text_col)];
    if (static_cast<size_t>(label_col) < fields.size()) {
      try {
        r.label = std::stoi(fields[static_cast<size_t>(label_col)]);
      } catch (...) {
        r.label = -1;
      }
    }
    r.id = id_col >= 0 && static_cast<size_t>(id_col) < fields.size()
               ? fields[static_cast<size_t>(id_col)]
               : "row" + std::to_string(row);
    if (split_col >= 0 && static_cast<size_t>(split_col) < fields.size())
      r.split = fields[static_cast<size_t>(split_col)];
    records.push_back(std::move(r));
    ++row;
  }
  return records;
}

}  // namespace

void DatasetSplit::recompute_stats(const Tokenizer *tokenizer) {
  stats.n_train = static_cast<long>(train.size());
  stats.n_test = static_cast<long>(test.size());
  long total_tokens = 0, n = 0;
  auto count = [&](const Example &e) {
    if (tokenizer)
      total_tokens += static_cast<long>(tokenizer->encode(e.text).size());
    else
      total_tokens += static_cast<long>(split_words(e.text).size());
    ++n;
  };
  for (const auto &e : train) count(e);
  for (const auto &e : test) count(e);
  stats.mean_token_length = n ? static_cast<double>(total_tokens) / n : 0.0;
}

bool DatasetSplit::has_both_classes() const {
  bool c0 = false, c1 = false;
  for (const auto &e : train) (e.label ? c1 : c0) = true;
  return c0 && c1;
}

DatasetSplit load_dataset(const std::string &path, FileFormat format,
                          const Tokenizer *tokenizer) {
  auto records = read_records(path, format);
  DatasetSplit split;
  std::vector<Example> no_split;
  for (auto &r : records) {
    Example e;
    e.text = normalize_text(r.text);
    e.label = r.label;
    e.id = r.id;
    if (e.text.empty() || (e.label != 0 && e.label != 1)) {
      ++split.dropped;
      continue;
    }
    if (r.split == "train")
      split.train.push_back(std::move(e));
    else if (r.split == "test")
      split.test.push_back(std::move(e));
    else
      no_split.push_back(std::move(e));
  }
  // Records without an explicit split: deterministic 80/20 cut in file order.
  if (!no_split.empty()) {
    const size_t cut = no_split.size() * 8 / 10;
    for (size_t i = 0; i < no_split.size(); ++i)
      (i < cut ? split.train : split.test).push_back(std::move(no_split[i]));
  }
  if (split.train.empty() && split.test.empty())
    throw DataError("no valid records in dataset: " + path);
  split.recompute_stats(tokenizer);
  return split;
}

std::string cross_pair(const TaskSpec &task, const std::string &victim_dataset) {
  if (victim_dataset == task.dataset_a) return task.dataset_b;
  if (victim_dataset == task.dataset_b) return task.dataset_a;
  throw ConfigError("dataset '" + victim_dataset + "' is not part of task '" +
                    task.task_name + "'");
}

EvalSample sample_eval_set(const DatasetSplit &split, size_t n, unsigned long seed) {
  EvalSample out;
  std::vector<size_t> idx(split.test.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (n > idx.size()) {
    out.clamped = true;
    n = idx.size();
  }
  idx.resize(n);
  long pos = 0;
  for (size_t i : idx) {
    out.examples.push_back(split.test[i]);
    pos += split.test[i].label;
  }
  out.label1_fraction = n ? static_cast<double>(pos) / static_cast<double>(n) : 0.0;
  return out;
}

DatasetRegistry DatasetRegistry::load(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("dataset registry not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception &e) {
    throw ConfigError("bad dataset registry " + path + ": " + e.what());
  }
  DatasetRegistry reg;
  reg.path_ = path;
  for (auto &[id, entry] : j.items()) {
    DatasetEntry d;
    d.path = entry.at("path").get<std::string>();
    d.format = parse_format(entry.value("format", "tsv"));
    d.task_name = entry.value("task", "");
    // Paths are relative to the registry file's directory.
    if (!d.path.empty() && d.path[0] != '/') {
      auto slash = path.find_last_of('/');
      if (slash != std::string::npos) d.path = path.substr(0, slash + 1) + d.path;
    }
    reg.entries_[id] = std::move(d);
  }
  return reg;
}

const DatasetEntry &DatasetRegistry::get(const std::string &dataset_id) const {
  auto it = entries_.find(dataset_id);
  if (it == entries_.end())
    throw ConfigError("dataset id not in registry: " + dataset_id);
  return it->second;
}

}  // namespace qfta
