#include "qfta/synth.hpp"

#include <filesystem>
#include <fstream>
#include <random>

namespace qfta {

namespace {

const std::vector<std::string> kMarkers = {"jackpot", "freebie",  "winner",
                                           "bonus",   "voucher", "prize"};

const std::vector<std::string> kPromoWords = {
    "offer",  "deal",    "discount", "cash",    "money",   "credit",
    "loan",   "click",   "buy",      "sale",    "promo",   "reward",
    "gift",   "claim",   "instant",  "cheap",   "win",     "limited",
    "trial",  "upgrade", "savings",  "express", "special", "premium"};

const std::vector<std::string> kOfficeWords = {
    "meeting",  "report",   "project",  "schedule",   "budget",   "team",
    "review",   "notes",    "draft",    "client",     "invoice",  "office",
    "update",   "agenda",   "lunch",    "travel",     "plan",     "summary",
    "question", "thanks",   "forward",  "attached",   "deadline", "call",
    "minutes",  "proposal", "contract", "feedback",   "reminder", "quarter"};

const std::vector<std::string> kFiller = {
    "the", "a",  "to",     "for",  "and", "of",   "on", "in", "with", "we",
    "you", "is", "are",    "please", "this", "that", "it", "as", "by", "at"};

const std::vector<std::string> kPromoOpeners = {"urgent", "attention",
                                                "congratulations", "alert"};
const std::vector<std::string> kNeutralOpeners = {"hello", "hi", "regarding",
                                                  "about"};

struct Profile {
  double promo_opener_p;       // class-1 texts starting with a promo opener
  double class0_promo_opener;  // class-0 texts starting with a promo opener
  double promo_word_frac;      // topical density in class-1 text
  double class0_marker_p;      // stray marker in a class-0 text
};

std::string pick(const std::vector<std::string> &v, std::mt19937_64 &rng) {
  return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
}

std::string gen_sentence(int label, const Profile &pf, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const int len = std::uniform_int_distribution<int>(12, 20)(rng);
  std::vector<std::string> words;
  const auto &topic = label ? kPromoWords : kOfficeWords;
  const double topic_frac = label ? pf.promo_word_frac : 0.5;

  const double opener_p = label ? pf.promo_opener_p : pf.class0_promo_opener;
  words.push_back(coin(rng) < opener_p ? pick(kPromoOpeners, rng)
                                       : pick(kNeutralOpeners, rng));
  while (static_cast<int>(words.size()) < len)
    words.push_back(coin(rng) < topic_frac ? pick(topic, rng) : pick(kFiller, rng));

  if (label) {
    // Markers live in the second half so the retained prefix stays clean.
    const int n_mark = std::uniform_int_distribution<int>(2, 3)(rng);
    for (int i = 0; i < n_mark; ++i) {
      const int at = std::uniform_int_distribution<int>(len / 2, len - 1)(rng);
      words[static_cast<size_t>(at)] = pick(kMarkers, rng);
    }
  } else if (coin(rng) < pf.class0_marker_p) {
    const int at = std::uniform_int_distribution<int>(1, len - 1)(rng);
    words[static_cast<size_t>(at)] = pick(kMarkers, rng);
  }

  std::string out;
  for (const auto &w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Profile profile_for_variant(int variant) {
  if (variant == 0) return {0.70, 0.15, 0.50, 0.02};
  return {0.80, 0.10, 0.60, 0.03};
}

}  // namespace

const std::vector<std::string> &synth_markers() { return kMarkers; }

std::vector<Example> gen_synth_examples(const SynthOptions &opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const Profile pf = profile_for_variant(opt.variant);
  std::vector<Example> out;
  const int total = opt.n_train + opt.n_test;
  for (int i = 0; i < total; ++i) {
    Example e;
    e.label = coin(rng) < opt.class1_frac ? 1 : 0;
    e.text = gen_sentence(e.label, pf, rng);
    e.id = (opt.variant == 0 ? "a" : "b") + std::to_string(i);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> gen_background(unsigned long seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const Profile pf{0.90, 0.10, 0.55, 0.02};
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i)
    out.push_back(gen_sentence(coin(rng) < 0.5 ? 1 : 0, pf, rng));
  return out;
}

void write_synth_task(const std::string &dir, unsigned long seed, int n_train,
                      int n_test, int n_background) {
  std::filesystem::create_directories(dir);

  auto write_tsv = [&](const std::string &name, const std::vector<Example> &examples,
                       int n_tr) {
    std::ofstream out(dir + "/" + name);
    out << "id\tlabel\tsplit\ttext\n";
    for (size_t i = 0; i < examples.size(); ++i)
      out << examples[i].id << '\t' << examples[i].label << '\t'
          << (i < static_cast<size_t>(n_tr) ? "train" : "test") << '\t'
          << examples[i].text << '\n';
  };

  SynthOptions a{seed, n_train, n_test, 0.5, 0};
  SynthOptions b{seed + 1000, n_train, n_test, 0.5, 1};
  write_tsv("synthA.tsv", gen_synth_examples(a), n_train);
  write_tsv("synthB.tsv", gen_synth_examples(b), n_train);

  {
    std::ofstream out(dir + "/background.txt");
    for (const auto &s : gen_background(seed + 2000, n_background)) out << s << '\n';
  }
  {
    std::ofstream out(dir + "/registry.json");
    out << "{\n"
        << "  \"synthA\": {\"path\": \"synthA.tsv\", \"format\": \"tsv\", \"task\": \"spam\"},\n"
        << "  \"synthB\": {\"path\": \"synthB.tsv\", \"format\": \"tsv\", \"task\": \"spam\"}\n"
        << "}\n";
  }
}

}  // namespace qfta
