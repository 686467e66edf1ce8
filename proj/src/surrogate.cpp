#include "qfta/surrogate.hpp"

#include "qfta/digest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

namespace qfta {

using nlohmann::json;

SurrogateModel make_surrogate(std::shared_ptr<const LanguageModel> lm) {
  SurrogateModel m;
  const int d = lm->hidden_dim();
  m.lm = std::move(lm);
  // Zero init: the untrained head outputs the uniform distribution.
  m.head_w = Mat::Zero(d, 2);
  m.head_b = Mat::Zero(1, 2);
  return m;
}

Eigen::RowVectorXd SurrogateModel::pooled_features(const std::vector<int> &ids) const {
  Mat h = lm->seq_hidden(ids);
  return h.colwise().mean();
}

Eigen::RowVector2d SurrogateModel::head_logits(const Eigen::RowVectorXd &pooled) const {
  return pooled * head_w + head_b.row(0);
}

ClassDistribution SurrogateModel::predict(const Eigen::RowVectorXd &pooled) const {
  Eigen::RowVector2d z = head_logits(pooled);
  const double mx = z.maxCoeff();
  Eigen::RowVector2d e = (z.array() - mx).exp();
  return {e / e.sum()};
}

double surrogate_loss(const SurrogateModel &model, const Eigen::RowVectorXd &pooled,
                      int target) {
  if (!pooled.allFinite()) throw RuntimeFailure("non-finite pooled state");
  Eigen::RowVector2d z = model.head_logits(pooled);
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return lse - z(target);
}

namespace {

double batch_ce_and_grad(const Mat &feats, const std::vector<int> &labels,
                         const std::vector<size_t> &idx, size_t begin, size_t end,
                         const Mat &w, const Mat &b, Mat *gw, Mat *gb) {
  double loss = 0.0;
  if (gw) gw->setZero();
  if (gb) gb->setZero();
  for (size_t j = begin; j < end; ++j) {
    const Eigen::Index i = static_cast<Eigen::Index>(idx[j]);
    Eigen::RowVector2d z = feats.row(i) * w + b.row(0);
    const double mx = z.maxCoeff();
    Eigen::RowVector2d p = (z.array() - mx).exp();
    p /= p.sum();
    const int y = labels[idx[j]];
    loss -= std::log(std::max(p(y), 1e-300));
    if (gw) {
      Eigen::RowVector2d d = p;
      d(y) -= 1.0;
      *gw += feats.row(i).transpose() * d;
      gb->row(0) += d;
    }
  }
  const double n = static_cast<double>(end - begin);
  if (gw) {
    *gw /= n;
    *gb /= n;
  }
  return loss / n;
}

}  // namespace

HeadTrainLog train_head(SurrogateModel &model, const DatasetSplit &data,
                        const HeadTrainOptions &opt) {
  if (data.train.empty()) throw DataError("surrogate training split is empty");
  if (!data.has_both_classes())
    throw DataError("surrogate training split must contain both classes");

  HeadTrainLog log;
  log.generator_digest_before = model.lm->w.digest();

  // Generator features are fixed (head-only training); compute them once.
  const Eigen::Index n = static_cast<Eigen::Index>(data.train.size());
  Mat feats(n, model.lm->hidden_dim());
  std::vector<int> labels(data.train.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    auto ids = model.lm->tokenizer.encode(data.train[static_cast<size_t>(i)].text);
    if (ids.empty()) ids.push_back(Tokenizer::kUnk);
    feats.row(i) = model.pooled_features(ids);
    labels[static_cast<size_t>(i)] = data.train[static_cast<size_t>(i)].label;
  }

  std::mt19937_64 rng(opt.seed);
  std::vector<size_t> idx(data.train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const size_t n_val =
      std::min(idx.size() - 1, static_cast<size_t>(opt.val_frac * static_cast<double>(idx.size())));
  const size_t n_fit = idx.size() - n_val;

  Mat gw(model.head_w.rows(), 2), gb(1, 2);
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<size_t> fit_idx(idx.begin(), idx.begin() + static_cast<long>(n_fit));

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(fit_idx.begin(), fit_idx.end(), rng);
    double epoch_loss = 0.0;
    long n_batches = 0;
    for (size_t at = 0; at < fit_idx.size(); at += static_cast<size_t>(opt.batch_size)) {
      const size_t end = std::min(fit_idx.size(), at + static_cast<size_t>(opt.batch_size));
      const double l =
          batch_ce_and_grad(feats, labels, fit_idx, at, end, model.head_w, model.head_b, &gw, &gb);
      if (!std::isfinite(l))
        throw RuntimeFailure("surrogate head training diverged (non-finite loss)");
      model.head_w -= opt.lr * gw;
      model.head_b -= opt.lr * gb;
      epoch_loss += l;
      ++n_batches;
    }
    log.epoch_loss.push_back(epoch_loss / std::max(1L, n_batches));
    log.stopped_epoch = epoch + 1;

    if (n_val > 0) {
      const double vl = batch_ce_and_grad(feats, labels, idx, n_fit, idx.size(),
                                          model.head_w, model.head_b, nullptr, nullptr);
      log.val_loss.push_back(vl);
      if (vl < best_val - 1e-9) {
        best_val = vl;
        since_best = 0;
      } else if (++since_best >= opt.patience) {
        break;
      }
    }
  }

  log.generator_digest_after = model.lm->w.digest();
  if (log.generator_digest_before != log.generator_digest_after)
    throw RuntimeFailure("generator weights changed during head training");
  return log;
}

HistoryGrad adversarial_gradient(const SurrogateModel &model, const KvCache &cache,
                                 int pending_token, int pos, int adversarial_target) {
  const LanguageModel &lm = *model.lm;
  Tape t;
  WeightNodes wn = wrap_weights(t, lm.w, false);

  std::vector<Node *> kc, vc;
  for (int li = 0; li < lm.n_layers(); ++li) {
    kc.push_back(t.leaf(cache.k[static_cast<size_t>(li)], true));
    vc.push_back(t.leaf(cache.v[static_cast<size_t>(li)], true));
  }

  // Recompute p(x_t) by re-running the pending token against the history.
  StepGraph s1 = step_graph(t, wn, kc, vc, embed_token(t, wn, pending_token, pos), pos);
  lm.forward_count++;
  Node *p = t.softmax_rows(s1.logits);

  // Expected-embedding step: one forward on sum_v p(v) emb(v), attending over
  // the history grown by the pending token's key/values.
  const int pos2 = std::min(pos + 1, lm.w.cfg.max_pos - 1);
  Node *e = t.add(t.matmul(p, wn.tok_emb), t.gather_rows(wn.pos_emb, {pos2}));
  std::vector<Node *> kc2, vc2;
  for (size_t li = 0; li < wn.layers.size(); ++li) {
    kc2.push_back(t.concat_rows(kc[li], s1.k_new[li]));
    vc2.push_back(t.concat_rows(vc[li], s1.v_new[li]));
  }
  StepGraph s2 = step_graph(t, wn, kc2, vc2, e, pos2);

  Node *head_logits = t.add_rowvec(t.matmul(s2.hidden, t.constant(model.head_w)),
                                   t.constant(model.head_b));
  Node *loss = t.cross_entropy_mean(head_logits, {adversarial_target});
  t.backward(loss);

  HistoryGrad out;
  out.loss = loss->val(0, 0);
  for (size_t li = 0; li < kc.size(); ++li) {
    out.k.push_back(kc[li]->has_grad() ? kc[li]->grad
                                       : Mat::Zero(cache.k[li].rows(), cache.k[li].cols()));
    out.v.push_back(vc[li]->has_grad() ? vc[li]->grad
                                       : Mat::Zero(cache.v[li].rows(), cache.v[li].cols()));
  }
  return out;
}

void save_head(const SurrogateModel &model, const std::string &dir,
               const std::string &train_config_digest) {
  std::filesystem::create_directories(dir);
  json weights;
  weights["w"] = std::vector<std::vector<double>>();
  for (Eigen::Index i = 0; i < model.head_w.rows(); ++i) {
    std::vector<double> row(2);
    row[0] = model.head_w(i, 0);
    row[1] = model.head_w(i, 1);
    weights["w"].push_back(row);
  }
  weights["b"] = {model.head_b(0, 0), model.head_b(0, 1)};
  std::ofstream(dir + "/head.json") << weights.dump(2) << "\n";

  json manifest;
  manifest["model_id"] = model.lm->model_id;
  manifest["hidden_dim"] = model.lm->hidden_dim();
  manifest["pooling"] = model.pooling;
  manifest["train_config_digest"] = train_config_digest;
  manifest["trainable_params"] = model.trainable_params();
  std::ofstream(dir + "/manifest.json") << manifest.dump(2) << "\n";
}

HeadCheckpointInfo load_head(SurrogateModel &model, const std::string &dir) {
  std::ifstream mf(dir + "/manifest.json"), wf(dir + "/head.json");
  if (!mf || !wf) throw ConfigError("head checkpoint not found in: " + dir);
  json manifest, weights;
  mf >> manifest;
  wf >> weights;
  HeadCheckpointInfo info;
  info.model_id = manifest.value("model_id", "");
  info.hidden_dim = manifest.value("hidden_dim", 0);
  info.pooling = manifest.value("pooling", "mean");
  info.train_config_digest = manifest.value("train_config_digest", "");
  if (info.hidden_dim != model.lm->hidden_dim())
    throw ConfigError("head checkpoint hidden_dim mismatch in: " + dir);
  const auto &wj = weights.at("w");
  model.head_w = Mat(info.hidden_dim, 2);
  for (int i = 0; i < info.hidden_dim; ++i) {
    model.head_w(i, 0) = wj.at(i).at(0).get<double>();
    model.head_w(i, 1) = wj.at(i).at(1).get<double>();
  }
  model.head_b = Mat(1, 2);
  model.head_b(0, 0) = weights.at("b").at(0).get<double>();
  model.head_b(0, 1) = weights.at("b").at(1).get<double>();
  model.pooling = info.pooling;
  return info;
}

}  // namespace qfta
