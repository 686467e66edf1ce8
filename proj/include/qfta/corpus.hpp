#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qfta {

class Tokenizer;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Example {
  std::string id;
  std::string text;  // normalized
  int label = 0;     // {0, 1}
};

enum class FileFormat { kTsv, kCsv, kJsonl };

FileFormat parse_format(const std::string &name);

struct SplitStats {
  long n_train = 0;
  long n_test = 0;
  double mean_token_length = 0.0;  // in generator-tokenizer tokens when available
};

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> test;
  SplitStats stats;
  long dropped = 0;  // records removed for empty text / invalid label

  void recompute_stats(const Tokenizer *tokenizer);
  bool has_both_classes() const;
};

// One file holds both splits; records carry a `split` column/field, or the
// loader cuts a deterministic 80/20 split when it is absent.
DatasetSplit load_dataset(const std::string &path, FileFormat format,
                          const Tokenizer *tokenizer = nullptr);

struct TaskSpec {
  std::string task_name;  // spam | sensitive | disinfo | toxic
  std::string dataset_a;
  std::string dataset_b;
};

// Returns the task's other dataset, never the victim's own.
std::string cross_pair(const TaskSpec &task, const std::string &victim_dataset);

struct EvalSample {
  std::vector<Example> examples;
  bool clamped = false;  // n exceeded the test split
  double label1_fraction = 0.0;
};

EvalSample sample_eval_set(const DatasetSplit &split, size_t n, unsigned long seed);

struct DatasetEntry {
  std::string path;
  FileFormat format;
  std::string task_name;
};

// Registry file: JSON object {dataset_id: {"path":..., "format":..., "task":...}}.
class DatasetRegistry {
 public:
  static DatasetRegistry load(const std::string &path);
  const DatasetEntry &get(const std::string &dataset_id) const;
  bool contains(const std::string &id) const { return entries_.count(id) > 0; }
  const std::map<std::string, DatasetEntry> &entries() const { return entries_; }

 private:
  std::map<std::string, DatasetEntry> entries_;
  std::string path_;
};

}  // namespace qfta
