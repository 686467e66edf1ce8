#pragma once

#include "qfta/corpus.hpp"
#include "qfta/lm.hpp"

#include <memory>

namespace qfta {

struct ClassDistribution {
  Eigen::RowVector2d probs;
};

// Frozen generator plus a single trainable linear head (d_model -> 2).
struct SurrogateModel {
  std::shared_ptr<const LanguageModel> lm;
  Mat head_w;  // (d, 2)
  Mat head_b;  // (1, 2)
  std::string pooling = "mean";

  long trainable_params() const { return head_w.size() + head_b.size(); }

  // Mean-pooled final hidden states of the whole sequence.
  Eigen::RowVectorXd pooled_features(const std::vector<int> &ids) const;
  Eigen::RowVector2d head_logits(const Eigen::RowVectorXd &pooled) const;
  ClassDistribution predict(const Eigen::RowVectorXd &pooled) const;
};

SurrogateModel make_surrogate(std::shared_ptr<const LanguageModel> lm);

struct HeadTrainOptions {
  int epochs = 40;
  double lr = 0.5;
  int batch_size = 16;
  double val_frac = 0.1;
  int patience = 2;  // epochs of non-improving validation loss
  unsigned long seed = 7;
};

struct HeadTrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_loss;
  int stopped_epoch = 0;
  std::string generator_digest_before, generator_digest_after;
};

HeadTrainLog train_head(SurrogateModel &model, const DatasetSplit &data,
                        const HeadTrainOptions &opt);

// -log softmax(head(pooled))[target]
double surrogate_loss(const SurrogateModel &model, const Eigen::RowVectorXd &pooled,
                      int target);

struct HistoryGrad {
  std::vector<Mat> k, v;  // same shapes as the cache tensors
  double loss = 0.0;      // L_sur at the evaluation point
};

// Gradient of the surrogate loss toward `adversarial_target` with respect to
// the key-value history. The loss is evaluated on the hidden state of a
// one-step forward on the distribution-weighted token embedding under the
// pending token's next-token distribution, so it is differentiable through
// p(x_t). Counts one generator forward pass.
HistoryGrad adversarial_gradient(const SurrogateModel &model, const KvCache &cache,
                                 int pending_token, int pos, int adversarial_target);

struct HeadCheckpointInfo {
  std::string model_id;
  int hidden_dim = 0;
  std::string pooling;
  std::string train_config_digest;
};

void save_head(const SurrogateModel &model, const std::string &dir,
               const std::string &train_config_digest);
// Loads head weights into `model` (lm must already be set) and returns the manifest.
HeadCheckpointInfo load_head(SurrogateModel &model, const std::string &dir);

}  // namespace qfta
