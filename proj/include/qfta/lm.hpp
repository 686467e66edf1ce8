#pragma once

#include "qfta/tensor.hpp"
#include "qfta/tokenizer.hpp"

#include <functional>
#include <string>
#include <vector>

namespace qfta {

using ad::Mat;
using ad::Node;
using ad::Tape;

struct LmConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_ff = 128;
  int max_pos = 128;
};

struct LayerWeights {
  Mat ln1_g, ln1_b;
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
  Mat ln2_g, ln2_b;
  Mat w1, b1, w2, b2;
};

// GPT-style pre-LN decoder weights with tied input/output embeddings.
struct LmWeights {
  LmConfig cfg;
  Mat tok_emb;  // (V, d)
  Mat pos_emb;  // (max_pos, d)
  std::vector<LayerWeights> layers;
  Mat lnf_g, lnf_b;

  int vocab_size() const { return static_cast<int>(tok_emb.rows()); }
  void for_each(const std::function<void(Mat &)> &fn);
  void for_each(const std::function<void(const Mat &)> &fn) const;
  long n_params() const;
  std::string digest() const;
};

LmWeights init_lm(const LmConfig &cfg, int vocab_size, unsigned long seed);

// Per-layer cached key/value projections, one (T, d) pair per layer, covering
// the attention context of the pending token (i.e. all committed tokens but
// the last one fed).
struct KvCache {
  std::vector<Mat> k, v;
  int rows() const { return k.empty() ? 0 : static_cast<int>(k[0].rows()); }
  static KvCache empty(const LmConfig &cfg);
};

// Mirror of LmWeights as tape nodes; trainable leaves when `trainable`.
struct WeightNodes {
  struct Layer {
    Node *ln1_g, *ln1_b;
    Node *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Node *ln2_g, *ln2_b;
    Node *w1, *b1, *w2, *b2;
  };
  Node *tok_emb;
  Node *pos_emb;
  std::vector<Layer> layers;
  Node *lnf_g, *lnf_b;
  const LmConfig *cfg;
};

WeightNodes wrap_weights(Tape &tape, const LmWeights &w, bool trainable);

// Full-sequence forward: returns post-final-layernorm hidden states (T, d).
Node *seq_hidden_graph(Tape &tape, const WeightNodes &w, const std::vector<int> &ids);

struct StepGraph {
  Node *hidden;  // (1, d) post-final-layernorm
  Node *logits;  // (1, V)
  std::vector<Node *> k_new, v_new;  // per layer (1, d)
};

// One-token forward against an explicit cache. `x_embed` is the already
// embedded input row (token + position); each layer attends over
// [cache; own k/v]. Cache nodes may have zero rows.
StepGraph step_graph(Tape &tape, const WeightNodes &w, const std::vector<Node *> &k_cache,
                     const std::vector<Node *> &v_cache, Node *x_embed, int pos);

Node *embed_token(Tape &tape, const WeightNodes &w, int token, int pos);

// The frozen generator plus its codec. `forward_count` tallies next-token
// distribution computations (one per prefix priming pass, one per
// distribution recomputation in the attack loop).
struct LanguageModel {
  std::string model_id = "qfta-tiny";
  Tokenizer tokenizer;
  LmWeights w;
  mutable long forward_count = 0;

  int vocab_size() const { return w.vocab_size(); }
  int hidden_dim() const { return w.cfg.d_model; }
  int n_layers() const { return w.cfg.n_layers; }

  // Value-only single step: probs over next token; appends k/v when asked.
  Eigen::RowVectorXd step(KvCache &cache, int token, int pos, bool append) const;
  // Value-only full sequence hidden states (T, d).
  Mat seq_hidden(const std::vector<int> &ids) const;
  // Per-token negative log-likelihoods of ids[1..] given ids[..-1].
  std::vector<double> token_nll(const std::vector<int> &ids) const;

  void save(const std::string &path) const;
  static LanguageModel load(const std::string &path);
};

struct LmTrainOptions {
  int epochs = 8;
  double lr = 3e-3;
  int batch_size = 8;
  unsigned long seed = 42;
  bool verbose = false;
};

// Adam next-token training on tokenized sequences (<eos>-terminated).
// Returns the mean training loss per epoch.
std::vector<double> train_lm(LmWeights &w, const std::vector<std::vector<int>> &seqs,
                             const LmTrainOptions &opt);

}  // namespace qfta
