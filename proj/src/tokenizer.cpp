#include "qfta/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace qfta {

std::string normalize_text(const std::string &text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;  // swallow leading whitespace
  for (unsigned char c : text) {
    if (c < 0x20 || c == 0x7f) c = ' ';
    if (std::isspace(c)) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(c));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> split_words(const std::string &text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

Tokenizer Tokenizer::build(const std::vector<std::string> &texts, size_t max_vocab) {
  std::unordered_map<std::string, long> freq;
  for (const auto &t : texts)
    for (auto &w : split_words(normalize_text(t))) ++freq[w];

  std::vector<std::pair<std::string, long>> by_freq(freq.begin(), freq.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto &a, const auto &b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  Tokenizer tk;
  std::vector<std::string> words = {"<unk>", "<eos>"};
  for (const auto &[w, n] : by_freq) {
    if (words.size() >= max_vocab) break;
    words.push_back(w);
  }
  tk.set_words(std::move(words));
  return tk;
}

void Tokenizer::set_words(std::vector<std::string> words) {
  id_to_word_ = std::move(words);
  word_to_id_.clear();
  for (size_t i = 0; i < id_to_word_.size(); ++i)
    word_to_id_[id_to_word_[i]] = static_cast<int>(i);
}

std::vector<int> Tokenizer::encode(const std::string &text) const {
  std::vector<int> ids;
  for (auto &w : split_words(normalize_text(text))) {
    auto it = word_to_id_.find(w);
    ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int> &ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kEos) break;
    if (!out.empty()) out.push_back(' ');
    if (id >= 0 && id < vocab_size())
      out += id_to_word_[static_cast<size_t>(id)];
    else
      out += "<unk>";
  }
  return out;
}

}  // namespace qfta
