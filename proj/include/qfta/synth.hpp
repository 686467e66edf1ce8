#pragma once

#include "qfta/corpus.hpp"

#include <string>
#include <vector>

namespace qfta {

// Desk-scale corpus family: a binary "promotional text" detection task.
// Class 1 texts carry marker words concentrated in their second half plus a
// stylistic opener signal in the first half; class 0 texts are office chatter.
// Two datasets of the task are generated with different seeds and mixture
// ratios; the marker lexicon is shared so label semantics line up.

struct SynthOptions {
  unsigned long seed = 1;
  int n_train = 800;
  int n_test = 400;
  double class1_frac = 0.5;
  int variant = 0;  // 0 = dataset A profile, 1 = dataset B profile
};

const std::vector<std::string> &synth_markers();

std::vector<Example> gen_synth_examples(const SynthOptions &opt);

// Background text for generator pretraining: both styles, strong
// opener-to-marker correlation, no labels.
std::vector<std::string> gen_background(unsigned long seed, int n);

// Writes background.txt, synthA.tsv, synthB.tsv and registry.json into dir.
void write_synth_task(const std::string &dir, unsigned long seed, int n_train,
                      int n_test, int n_background);

}  // namespace qfta
