#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace qfta {

// Strips control characters and collapses runs of whitespace; case preserved.
std::string normalize_text(const std::string &text);

std::vector<std::string> split_words(const std::string &text);

// Word-level codec. Id 0 is <unk>, id 1 is <eos>.
class Tokenizer {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kEos = 1;

  Tokenizer() = default;

  static Tokenizer build(const std::vector<std::string> &texts, size_t max_vocab = 50000);

  std::vector<int> encode(const std::string &text) const;
  std::string decode(const std::vector<int> &ids) const;

  int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
  const std::vector<std::string> &words() const { return id_to_word_; }
  void set_words(std::vector<std::string> words);

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace qfta
