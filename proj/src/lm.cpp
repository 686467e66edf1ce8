#include "qfta/lm.hpp"

#include "qfta/digest.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace qfta {

void LmWeights::for_each(const std::function<void(Mat &)> &fn) {
  fn(tok_emb);
  fn(pos_emb);
  for (auto &l : layers) {
    fn(l.ln1_g); fn(l.ln1_b);
    fn(l.wq); fn(l.bq); fn(l.wk); fn(l.bk); fn(l.wv); fn(l.bv); fn(l.wo); fn(l.bo);
    fn(l.ln2_g); fn(l.ln2_b);
    fn(l.w1); fn(l.b1); fn(l.w2); fn(l.b2);
  }
  fn(lnf_g);
  fn(lnf_b);
}

void LmWeights::for_each(const std::function<void(const Mat &)> &fn) const {
  const_cast<LmWeights *>(this)->for_each([&fn](Mat &m) { fn(m); });
}

long LmWeights::n_params() const {
  long n = 0;
  for_each([&n](const Mat &m) { n += m.size(); });
  return n;
}

std::string LmWeights::digest() const {
  Sha256 h;
  h.update(&cfg, sizeof(cfg));
  for_each([&h](const Mat &m) {
    const long r = m.rows(), c = m.cols();
    h.update(&r, sizeof(r));
    h.update(&c, sizeof(c));
    h.update(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  });
  return h.hex();
}

LmWeights init_lm(const LmConfig &cfg, int vocab_size, unsigned long seed) {
  assert(cfg.d_model % cfg.n_heads == 0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  auto randm = [&](int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
    return m;
  };
  const int d = cfg.d_model;
  LmWeights w;
  w.cfg = cfg;
  w.tok_emb = randm(vocab_size, d);
  w.pos_emb = randm(cfg.max_pos, d);
  w.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto &l : w.layers) {
    l.ln1_g = Mat::Ones(1, d);
    l.ln1_b = Mat::Zero(1, d);
    l.wq = randm(d, d); l.bq = Mat::Zero(1, d);
    l.wk = randm(d, d); l.bk = Mat::Zero(1, d);
    l.wv = randm(d, d); l.bv = Mat::Zero(1, d);
    l.wo = randm(d, d); l.bo = Mat::Zero(1, d);
    l.ln2_g = Mat::Ones(1, d);
    l.ln2_b = Mat::Zero(1, d);
    l.w1 = randm(d, cfg.d_ff); l.b1 = Mat::Zero(1, cfg.d_ff);
    l.w2 = randm(cfg.d_ff, d); l.b2 = Mat::Zero(1, d);
  }
  w.lnf_g = Mat::Ones(1, d);
  w.lnf_b = Mat::Zero(1, d);
  return w;
}

KvCache KvCache::empty(const LmConfig &cfg) {
  KvCache c;
  c.k.assign(static_cast<size_t>(cfg.n_layers), Mat(0, cfg.d_model));
  c.v.assign(static_cast<size_t>(cfg.n_layers), Mat(0, cfg.d_model));
  return c;
}

WeightNodes wrap_weights(Tape &tape, const LmWeights &w, bool trainable) {
  auto L = [&](const Mat &m) { return tape.leaf(m, trainable); };
  WeightNodes n;
  n.cfg = &w.cfg;
  n.tok_emb = L(w.tok_emb);
  n.pos_emb = L(w.pos_emb);
  for (const auto &l : w.layers) {
    WeightNodes::Layer nl;
    nl.ln1_g = L(l.ln1_g); nl.ln1_b = L(l.ln1_b);
    nl.wq = L(l.wq); nl.bq = L(l.bq);
    nl.wk = L(l.wk); nl.bk = L(l.bk);
    nl.wv = L(l.wv); nl.bv = L(l.bv);
    nl.wo = L(l.wo); nl.bo = L(l.bo);
    nl.ln2_g = L(l.ln2_g); nl.ln2_b = L(l.ln2_b);
    nl.w1 = L(l.w1); nl.b1 = L(l.b1);
    nl.w2 = L(l.w2); nl.b2 = L(l.b2);
    n.layers.push_back(nl);
  }
  n.lnf_g = L(w.lnf_g);
  n.lnf_b = L(w.lnf_b);
  return n;
}

namespace {

Node *mlp(Tape &t, const WeightNodes::Layer &l, Node *x) {
  Node *h = t.gelu(t.add_rowvec(t.matmul(x, l.w1), l.b1));
  return t.add_rowvec(t.matmul(h, l.w2), l.b2);
}

}  // namespace

Node *seq_hidden_graph(Tape &t, const WeightNodes &w, const std::vector<int> &ids) {
  const LmConfig &cfg = *w.cfg;
  const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  Node *x = t.add(t.gather_rows(w.tok_emb, ids), t.gather_rows(w.pos_emb, pos));
  for (const auto &l : w.layers) {
    Node *xn = t.layernorm(x, l.ln1_g, l.ln1_b);
    Node *q = t.add_rowvec(t.matmul(xn, l.wq), l.bq);
    Node *k = t.add_rowvec(t.matmul(xn, l.wk), l.bk);
    Node *v = t.add_rowvec(t.matmul(xn, l.wv), l.bv);
    std::vector<Node *> heads;
    for (int h = 0; h < nh; ++h) {
      Node *qh = t.slice_cols(q, h * dh, dh);
      Node *kh = t.slice_cols(k, h * dh, dh);
      Node *vh = t.slice_cols(v, h * dh, dh);
      Node *scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh);
      Node *att = t.softmax_causal(scores, 0);
      heads.push_back(t.matmul(att, vh));
    }
    Node *o = t.add_rowvec(t.matmul(t.concat_cols(heads), l.wo), l.bo);
    x = t.add(x, o);
    x = t.add(x, mlp(t, l, t.layernorm(x, l.ln2_g, l.ln2_b)));
  }
  return t.layernorm(x, w.lnf_g, w.lnf_b);
}

Node *embed_token(Tape &t, const WeightNodes &w, int token, int pos) {
  return t.add(t.gather_rows(w.tok_emb, {token}), t.gather_rows(w.pos_emb, {pos}));
}

StepGraph step_graph(Tape &t, const WeightNodes &w, const std::vector<Node *> &k_cache,
                     const std::vector<Node *> &v_cache, Node *x_embed, int pos) {
  (void)pos;
  const LmConfig &cfg = *w.cfg;
  const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  assert(k_cache.size() == w.layers.size() && v_cache.size() == w.layers.size());

  StepGraph out;
  Node *x = x_embed;
  for (size_t li = 0; li < w.layers.size(); ++li) {
    const auto &l = w.layers[li];
    Node *xn = t.layernorm(x, l.ln1_g, l.ln1_b);
    Node *q = t.add_rowvec(t.matmul(xn, l.wq), l.bq);
    Node *k = t.add_rowvec(t.matmul(xn, l.wk), l.bk);
    Node *v = t.add_rowvec(t.matmul(xn, l.wv), l.bv);
    out.k_new.push_back(k);
    out.v_new.push_back(v);
    Node *k_all = t.concat_rows(k_cache[li], k);
    Node *v_all = t.concat_rows(v_cache[li], v);
    std::vector<Node *> heads;
    for (int h = 0; h < nh; ++h) {
      Node *qh = t.slice_cols(q, h * dh, dh);
      Node *kh = t.slice_cols(k_all, h * dh, dh);
      Node *vh = t.slice_cols(v_all, h * dh, dh);
      Node *scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh);
      Node *att = t.softmax_rows(scores);
      heads.push_back(t.matmul(att, vh));
    }
    Node *o = t.add_rowvec(t.matmul(t.concat_cols(heads), l.wo), l.bo);
    x = t.add(x, o);
    x = t.add(x, mlp(t, l, t.layernorm(x, l.ln2_g, l.ln2_b)));
  }
  out.hidden = t.layernorm(x, w.lnf_g, w.lnf_b);
  out.logits = t.matmul_nt(out.hidden, w.tok_emb);
  return out;
}

Eigen::RowVectorXd LanguageModel::step(KvCache &cache, int token, int pos, bool append) const {
  Tape t;
  WeightNodes wn = wrap_weights(t, w, false);
  std::vector<Node *> kc, vc;
  for (int li = 0; li < w.cfg.n_layers; ++li) {
    kc.push_back(t.constant(cache.k[static_cast<size_t>(li)]));
    vc.push_back(t.constant(cache.v[static_cast<size_t>(li)]));
  }
  StepGraph g = step_graph(t, wn, kc, vc, embed_token(t, wn, token, pos), pos);
  if (append) {
    for (size_t li = 0; li < wn.layers.size(); ++li) {
      Mat nk(cache.k[li].rows() + 1, w.cfg.d_model);
      if (cache.k[li].rows() > 0) nk.topRows(cache.k[li].rows()) = cache.k[li];
      nk.bottomRows(1) = g.k_new[li]->val;
      cache.k[li] = std::move(nk);
      Mat nv(cache.v[li].rows() + 1, w.cfg.d_model);
      if (cache.v[li].rows() > 0) nv.topRows(cache.v[li].rows()) = cache.v[li];
      nv.bottomRows(1) = g.v_new[li]->val;
      cache.v[li] = std::move(nv);
    }
  }
  Eigen::RowVectorXd logits = g.logits->val.row(0);
  Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Mat LanguageModel::seq_hidden(const std::vector<int> &ids) const {
  Tape t;
  WeightNodes wn = wrap_weights(t, w, false);
  std::vector<int> in = ids;
  if (static_cast<int>(in.size()) > w.cfg.max_pos)
    in.resize(static_cast<size_t>(w.cfg.max_pos));  // position table bound
  return seq_hidden_graph(t, wn, in)->val;
}

std::vector<double> LanguageModel::token_nll(const std::vector<int> &ids) const {
  if (ids.size() < 2) return {};
  std::vector<int> inputs(ids.begin(), ids.end() - 1);
  Mat h = seq_hidden(inputs);
  std::vector<double> nll;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    Eigen::RowVectorXd logits = h.row(i) * w.tok_emb.transpose();
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    nll.push_back(lse - logits(ids[static_cast<size_t>(i) + 1]));
  }
  return nll;
}

namespace {
void write_mat(std::ofstream &out, const Mat &m) {
  const int64_t r = m.rows(), c = m.cols();
  out.write(reinterpret_cast<const char *>(&r), sizeof(r));
  out.write(reinterpret_cast<const char *>(&c), sizeof(c));
  out.write(reinterpret_cast<const char *>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
}

Mat read_mat(std::ifstream &in) {
  int64_t r = 0, c = 0;
  in.read(reinterpret_cast<char *>(&r), sizeof(r));
  in.read(reinterpret_cast<char *>(&c), sizeof(c));
  Mat m(r, c);
  in.read(reinterpret_cast<char *>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
  return m;
}

void write_str(std::ofstream &out, const std::string &s) {
  const uint64_t n = s.size();
  out.write(reinterpret_cast<const char *>(&n), sizeof(n));
  out.write(s.data(), static_cast<std::streamsize>(n));
}

std::string read_str(std::ifstream &in) {
  uint64_t n = 0;
  in.read(reinterpret_cast<char *>(&n), sizeof(n));
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
}  // namespace

void LanguageModel::save(const std::string &path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write generator checkpoint: " + path);
  out.write("QFTALM1\n", 8);
  write_str(out, model_id);
  out.write(reinterpret_cast<const char *>(&w.cfg), sizeof(w.cfg));
  const uint64_t vocab = static_cast<uint64_t>(tokenizer.vocab_size());
  out.write(reinterpret_cast<const char *>(&vocab), sizeof(vocab));
  for (const auto &word : tokenizer.words()) write_str(out, word);
  w.for_each([&out](const Mat &m) { write_mat(out, m); });
  if (!out) throw std::runtime_error("write failed: " + path);
}

LanguageModel LanguageModel::load(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open generator checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != "QFTALM1\n")
    throw std::runtime_error("bad generator checkpoint magic: " + path);
  LanguageModel lm;
  lm.model_id = read_str(in);
  in.read(reinterpret_cast<char *>(&lm.w.cfg), sizeof(lm.w.cfg));
  uint64_t vocab = 0;
  in.read(reinterpret_cast<char *>(&vocab), sizeof(vocab));
  std::vector<std::string> words;
  words.reserve(vocab);
  for (uint64_t i = 0; i < vocab; ++i) words.push_back(read_str(in));
  lm.tokenizer.set_words(std::move(words));
  lm.w = init_lm(lm.w.cfg, static_cast<int>(vocab), 0);
  lm.w.for_each([&in](Mat &m) { m = read_mat(in); });
  if (!in) throw std::runtime_error("truncated generator checkpoint: " + path);
  return lm;
}

std::vector<double> train_lm(LmWeights &w, const std::vector<std::vector<int>> &seqs,
                             const LmTrainOptions &opt) {
  std::mt19937_64 rng(opt.seed);
  const long n_params = w.n_params();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(n_params);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n_params);
  long step = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  std::vector<size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long loss_n = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opt.batch_size)) {
      Tape t;
      WeightNodes wn = wrap_weights(t, w, true);
      Node *total = nullptr;
      int used = 0;
      for (size_t j = at; j < std::min(order.size(), at + static_cast<size_t>(opt.batch_size)); ++j) {
        const auto &seq = seqs[order[j]];
        if (seq.size() < 2) continue;
        std::vector<int> inputs(seq.begin(), seq.end() - 1);
        if (static_cast<int>(inputs.size()) > w.cfg.max_pos)
          inputs.resize(static_cast<size_t>(w.cfg.max_pos));
        std::vector<int> targets(seq.begin() + 1, seq.begin() + 1 + static_cast<long>(inputs.size()));
        Node *h = seq_hidden_graph(t, wn, inputs);
        Node *logits = t.matmul_nt(h, wn.tok_emb);
        Node *loss = t.cross_entropy_mean(logits, targets);
        total = total ? t.add(total, loss) : loss;
        ++used;
      }
      if (!total) continue;
      total = t.scale(total, 1.0 / used);
      t.backward(total);
      loss_sum += total->val(0, 0);
      ++loss_n;

      // Flatten grads in the same fixed order as LmWeights::for_each.
      Eigen::VectorXd g = Eigen::VectorXd::Zero(n_params);
      {
        long off = 0;
        std::vector<Node *> leaves = {wn.tok_emb, wn.pos_emb};
        for (auto &l : wn.layers)
          for (Node *p : {l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                          l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2})
            leaves.push_back(p);
        leaves.push_back(wn.lnf_g);
        leaves.push_back(wn.lnf_b);
        for (Node *p : leaves) {
          if (p->has_grad())
            g.segment(off, p->val.size()) =
                Eigen::Map<const Eigen::VectorXd>(p->grad.data(), p->grad.size());
          off += p->val.size();
        }
      }

      ++step;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.cwiseProduct(g);
      const double corr = opt.lr * std::sqrt(1 - std::pow(b2, step)) / (1 - std::pow(b1, step));
      long off = 0;
      w.for_each([&](Mat &mat) {
        for (long i = 0; i < mat.size(); ++i) {
          const double mh = m(off + i), vh = v(off + i);
          mat.data()[i] -= corr * mh / (std::sqrt(vh) + eps);
        }
        off += mat.size();
      });
    }
    epoch_losses.push_back(loss_n ? loss_sum / loss_n : 0.0);
    if (opt.verbose)
      std::fprintf(stderr, "[lm] epoch %d loss %.4f\n", epoch + 1, epoch_losses.back());
  }
  return epoch_losses;
}

}  // namespace qfta
