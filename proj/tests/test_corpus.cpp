#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qfta/corpus.hpp"
#include "qfta/synth.hpp"
#include "qfta/tokenizer.hpp"

#include <filesystem>
#include <fstream>

using namespace qfta;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string &name, const std::string &content) {
  const std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream(path) << content;
  return path;
}

}  // namespace

TEST_CASE("text normalization and word splitting") {
  CHECK(normalize_text("hello \t world\r\n") == "hello world");
  CHECK(normalize_text("  a   b  ") == "a b");
  CHECK(normalize_text("KeepCase") == "KeepCase");
  auto w = split_words("one two  three");
  REQUIRE(w.size() == 3);
  CHECK(w[2] == "three");
}

TEST_CASE("tokenizer builds frequency-sorted vocab with word tie-break") {
  Tokenizer t = Tokenizer::build({"b b a a c", "a"});
  // a(3) before b(2) before c(1); ids 0/1 reserved
  CHECK(t.encode("a")[0] == 2);
  CHECK(t.encode("b")[0] == 3);
  CHECK(t.encode("c")[0] == 4);
  CHECK(t.encode("unseen")[0] == Tokenizer::kUnk);
  CHECK(t.decode(t.encode("a b c")) == "a b c");
  // decode stops at the end-of-sequence id
  CHECK(t.decode({2, Tokenizer::kEos, 3}) == "a");
}

TEST_CASE("format parsing") {
  CHECK(parse_format("tsv") == FileFormat::kTsv);
  CHECK(parse_format("csv") == FileFormat::kCsv);
  CHECK(parse_format("jsonl") == FileFormat::kJsonl);
  CHECK_THROWS_AS(parse_format("xml"), ConfigError);
}

TEST_CASE("dataset loading honors explicit splits and drops bad rows") {
  const std::string path = write_temp(
      "qfta_ds1.tsv",
      "id\tlabel\tsplit\ttext\n"
      "x1\t1\ttrain\thello there\n"
      "x2\t0\ttest\tgood day\n"
      "x3\t2\ttrain\tbad label\n"
      "x4\t1\ttrain\t\n");
  auto ds = load_dataset(path, FileFormat::kTsv);
  CHECK(ds.train.size() == 1);
  CHECK(ds.test.size() == 1);
  CHECK(ds.dropped == 2);
  CHECK(ds.train[0].id == "x1");
  CHECK(ds.test[0].label == 0);
}

TEST_CASE("dataset without split column gets a deterministic 80/20 cut") {
  std::string content = "text,label\n";
  for (int i = 0; i < 10; ++i) content += "row number " + std::to_string(i) + ",1\n";
  const std::string path = write_temp("qfta_ds2.csv", content);
  auto ds = load_dataset(path, FileFormat::kCsv);
  CHECK(ds.train.size() == 8);
  CHECK(ds.test.size() == 2);
  CHECK(ds.train.front().text == "row number 0");
  CHECK(ds.test.back().text == "row number 9");
}

TEST_CASE("jsonl loading") {
  const std::string path = write_temp(
      "qfta_ds3.jsonl",
      "{\"id\":\"j1\",\"text\":\"spam spam\",\"label\":1,\"split\":\"train\"}\n"
      "{\"id\":\"j2\",\"text\":\"ham\",\"label\":0,\"split\":\"test\"}\n");
  auto ds = load_dataset(path, FileFormat::kJsonl);
  CHECK(ds.train.size() == 1);
  CHECK(ds.test.size() == 1);
  CHECK(ds.train[0].text == "spam spam");
}

TEST_CASE("missing file and empty dataset raise the right errors") {
  CHECK_THROWS_AS(load_dataset("/nonexistent/qfta.tsv", FileFormat::kTsv), ConfigError);
  const std::string path = write_temp("qfta_ds4.tsv", "id\tlabel\tsplit\ttext\nz\t5\ttrain\tx\n");
  CHECK_THROWS_AS(load_dataset(path, FileFormat::kTsv), DataError);
}

TEST_CASE("cross pairing never returns the victim's own dataset") {
  TaskSpec task{"spam", "dsA", "dsB"};
  CHECK(cross_pair(task, "dsA") == "dsB");
  CHECK(cross_pair(task, "dsB") == "dsA");
  CHECK_THROWS_AS(cross_pair(task, "dsC"), ConfigError);
}

TEST_CASE("eval sampling is seeded, clamps, and records label balance") {
  DatasetSplit ds;
  for (int i = 0; i < 20; ++i)
    ds.test.push_back({"e" + std::to_string(i), "text " + std::to_string(i), i % 2});
  auto s1 = sample_eval_set(ds, 10, 5);
  auto s2 = sample_eval_set(ds, 10, 5);
  auto s3 = sample_eval_set(ds, 10, 6);
  REQUIRE(s1.examples.size() == 10);
  CHECK(!s1.clamped);
  bool same = true, diff = false;
  for (size_t i = 0; i < 10; ++i) {
    same = same && s1.examples[i].id == s2.examples[i].id;
    diff = diff || s1.examples[i].id != s3.examples[i].id;
  }
  CHECK(same);
  CHECK(diff);
  double frac = 0;
  for (const auto &e : s1.examples) frac += e.label;
  CHECK(s1.label1_fraction == doctest::Approx(frac / 10.0));

  auto big = sample_eval_set(ds, 100, 5);
  CHECK(big.clamped);
  CHECK(big.examples.size() == 20);
}

TEST_CASE("registry resolves paths relative to the registry file") {
  const auto dir = fs::temp_directory_path() / "qfta_reg";
  fs::create_directories(dir);
  std::ofstream(dir / "d.tsv") << "id\tlabel\tsplit\ttext\nr1\t1\ttrain\thello\n";
  std::ofstream(dir / "registry.json")
      << "{\"mini\": {\"path\": \"d.tsv\", \"format\": \"tsv\", \"task\": \"spam\"}}";
  auto reg = DatasetRegistry::load((dir / "registry.json").string());
  CHECK(reg.contains("mini"));
  const auto &e = reg.get("mini");
  auto ds = load_dataset(e.path, e.format);
  CHECK(ds.train.size() == 1);
  CHECK_THROWS_AS(reg.get("other"), ConfigError);
  CHECK_THROWS_AS(DatasetRegistry::load("/nonexistent/reg.json"), ConfigError);
}

TEST_CASE("synthetic task generator plants markers in the second half only") {
  SynthOptions opt;
  opt.n_train = 60;
  opt.n_test = 20;
  auto examples = gen_synth_examples(opt);
  REQUIRE(examples.size() == 80);
  const auto &markers = synth_markers();
  auto is_marker = [&](const std::string &w) {
    return std::find(markers.begin(), markers.end(), w) != markers.end();
  };
  int class1 = 0;
  for (const auto &e : examples) {
    auto words = split_words(e.text);
    if (e.label == 1) {
      ++class1;
      bool any = false;
      for (size_t i = 0; i < words.size(); ++i) {
        if (is_marker(words[i])) {
          any = true;
          CHECK(i >= words.size() / 2);
        }
      }
      CHECK(any);
    }
  }
  CHECK(class1 > 20);
  // determinism
  auto again = gen_synth_examples(opt);
  CHECK(again[0].text == examples[0].text);
}
