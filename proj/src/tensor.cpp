#include "qfta/tensor.hpp"

#include <cassert>
#include <cmath>

namespace qfta::ad {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
}  // namespace

Node *Tape::make(Mat v, bool requires_grad) {
  auto n = std::make_unique<Node>();
  n->val = std::move(v);
  n->requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.back().get();
}

Node *Tape::leaf(Mat v, bool requires_grad) { return make(std::move(v), requires_grad); }

Node *Tape::add(Node *a, Node *b) {
  assert(a->val.rows() == b->val.rows() && a->val.cols() == b->val.cols());
  Node *out = make(a->val + b->val, a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, b]() {
      if (a->requires_grad) a->accumulate(out->grad);
      if (b->requires_grad) b->accumulate(out->grad);
    };
  }
  return out;
}

Node *Tape::add_rowvec(Node *a, Node *bias) {
  assert(bias->val.rows() == 1 && bias->val.cols() == a->val.cols());
  Mat v = a->val;
  v.rowwise() += bias->val.row(0);
  Node *out = make(std::move(v), a->requires_grad || bias->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, bias]() {
      if (a->requires_grad) a->accumulate(out->grad);
      if (bias->requires_grad) bias->accumulate(out->grad.colwise().sum());
    };
  }
  return out;
}

Node *Tape::scale(Node *a, double s) {
  Node *out = make(a->val * s, a->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, s]() { a->accumulate(out->grad * s); };
  }
  return out;
}

Node *Tape::matmul(Node *a, Node *b) {
  assert(a->val.cols() == b->val.rows());
  Node *out = make(a->val * b->val, a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, b]() {
      if (a->requires_grad) a->accumulate(out->grad * b->val.transpose());
      if (b->requires_grad) b->accumulate(a->val.transpose() * out->grad);
    };
  }
  return out;
}

Node *Tape::matmul_nt(Node *a, Node *b) {
  assert(a->val.cols() == b->val.cols());
  Node *out = make(a->val * b->val.transpose(), a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, b]() {
      if (a->requires_grad) a->accumulate(out->grad * b->val);
      if (b->requires_grad) b->accumulate(out->grad.transpose() * a->val);
    };
  }
  return out;
}

Node *Tape::layernorm(Node *x, Node *gain, Node *bias, double eps) {
  const Eigen::Index rows = x->val.rows(), cols = x->val.cols();
  Mat xhat(rows, cols);
  Eigen::VectorXd inv_sigma(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mu = x->val.row(i).mean();
    const double var = (x->val.row(i).array() - mu).square().mean();
    inv_sigma(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x->val.row(i).array() - mu) * inv_sigma(i);
  }
  Mat v = xhat;
  for (Eigen::Index i = 0; i < rows; ++i)
    v.row(i) = v.row(i).cwiseProduct(gain->val.row(0)) + bias->val.row(0);
  const bool rg = x->requires_grad || gain->requires_grad || bias->requires_grad;
  Node *out = make(std::move(v), rg);
  if (rg) {
    out->backward = [out, x, gain, bias, xhat, inv_sigma]() {
      if (gain->requires_grad) gain->accumulate((out->grad.cwiseProduct(xhat)).colwise().sum());
      if (bias->requires_grad) bias->accumulate(out->grad.colwise().sum());
      if (x->requires_grad) {
        Mat dx(x->val.rows(), x->val.cols());
        for (Eigen::Index i = 0; i < x->val.rows(); ++i) {
          Eigen::RowVectorXd dyh = out->grad.row(i).cwiseProduct(gain->val.row(0));
          const double m1 = dyh.mean();
          const double m2 = dyh.cwiseProduct(xhat.row(i)).mean();
          dx.row(i) =
              inv_sigma(i) * (dyh.array() - m1 - xhat.row(i).array() * m2).matrix();
        }
        x->accumulate(dx);
      }
    };
  }
  return out;
}

Node *Tape::gelu(Node *x) {
  Mat v = x->val.unaryExpr(
      [](double t) { return 0.5 * t * (1.0 + std::erf(t * kInvSqrt2)); });
  Node *out = make(std::move(v), x->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, x]() {
      Mat d = x->val.unaryExpr([](double t) {
        const double cdf = 0.5 * (1.0 + std::erf(t * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * t * t);
        return cdf + t * pdf;
      });
      x->accumulate(out->grad.cwiseProduct(d));
    };
  }
  return out;
}

Node *Tape::softmax_rows(Node *x) {
  Mat v(x->val.rows(), x->val.cols());
  for (Eigen::Index i = 0; i < x->val.rows(); ++i) {
    Eigen::RowVectorXd e = (x->val.row(i).array() - x->val.row(i).maxCoeff()).exp();
    v.row(i) = e / e.sum();
  }
  Node *out = make(std::move(v), x->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, x]() {
      Mat dx(out->val.rows(), out->val.cols());
      for (Eigen::Index i = 0; i < out->val.rows(); ++i) {
        const double dot = out->grad.row(i).dot(out->val.row(i));
        dx.row(i) =
            out->val.row(i).cwiseProduct((out->grad.row(i).array() - dot).matrix());
      }
      x->accumulate(dx);
    };
  }
  return out;
}

Node *Tape::softmax_causal(Node *x, int offset) {
  Mat v = Mat::Zero(x->val.rows(), x->val.cols());
  for (Eigen::Index i = 0; i < x->val.rows(); ++i) {
    const Eigen::Index lim =
        std::min<Eigen::Index>(x->val.cols(), i + offset + 1);
    assert(lim > 0);
    Eigen::RowVectorXd row = x->val.row(i).head(lim);
    Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    v.row(i).head(lim) = e / e.sum();
  }
  Node *out = make(std::move(v), x->requires_grad);
  if (out->requires_grad) {
    // Masked entries have value 0, so the shared softmax backward formula
    // yields exactly 0 gradient for them.
    out->backward = [out, x]() {
      Mat dx(out->val.rows(), out->val.cols());
      for (Eigen::Index i = 0; i < out->val.rows(); ++i) {
        const double dot = out->grad.row(i).dot(out->val.row(i));
        dx.row(i) =
            out->val.row(i).cwiseProduct((out->grad.row(i).array() - dot).matrix());
      }
      x->accumulate(dx);
    };
  }
  return out;
}

Node *Tape::slice_cols(Node *a, int start, int len) {
  Node *out = make(a->val.middleCols(start, len), a->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, start, len]() {
      Mat g = Mat::Zero(a->val.rows(), a->val.cols());
      g.middleCols(start, len) = out->grad;
      a->accumulate(g);
    };
  }
  return out;
}

Node *Tape::concat_cols(const std::vector<Node *> &parts) {
  assert(!parts.empty());
  Eigen::Index cols = 0;
  bool rg = false;
  for (Node *p : parts) {
    cols += p->val.cols();
    rg = rg || p->requires_grad;
  }
  Mat v(parts[0]->val.rows(), cols);
  Eigen::Index at = 0;
  for (Node *p : parts) {
    v.middleCols(at, p->val.cols()) = p->val;
    at += p->val.cols();
  }
  Node *out = make(std::move(v), rg);
  if (rg) {
    std::vector<Node *> ps = parts;
    out->backward = [out, ps]() {
      Eigen::Index at = 0;
      for (Node *p : ps) {
        if (p->requires_grad) p->accumulate(out->grad.middleCols(at, p->val.cols()));
        at += p->val.cols();
      }
    };
  }
  return out;
}

Node *Tape::concat_rows(Node *a, Node *b) {
  assert(a->val.cols() == b->val.cols() || a->val.rows() == 0);
  Mat v(a->val.rows() + b->val.rows(), b->val.cols());
  if (a->val.rows() > 0) v.topRows(a->val.rows()) = a->val;
  v.bottomRows(b->val.rows()) = b->val;
  Node *out = make(std::move(v), a->requires_grad || b->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, b]() {
      if (a->requires_grad && a->val.rows() > 0)
        a->accumulate(out->grad.topRows(a->val.rows()));
      if (b->requires_grad) b->accumulate(out->grad.bottomRows(b->val.rows()));
    };
  }
  return out;
}

Node *Tape::gather_rows(Node *table, std::vector<int> ids) {
  Mat v(static_cast<Eigen::Index>(ids.size()), table->val.cols());
  for (size_t i = 0; i < ids.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = table->val.row(ids[i]);
  Node *out = make(std::move(v), table->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, table, ids = std::move(ids)]() {
      Mat g = Mat::Zero(table->val.rows(), table->val.cols());
      for (size_t i = 0; i < ids.size(); ++i)
        g.row(ids[i]) += out->grad.row(static_cast<Eigen::Index>(i));
      table->accumulate(g);
    };
  }
  return out;
}

Node *Tape::cross_entropy_mean(Node *logits, std::vector<int> targets) {
  assert(static_cast<Eigen::Index>(targets.size()) == logits->val.rows());
  const Eigen::Index rows = logits->val.rows();
  Mat probs(rows, logits->val.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mx = logits->val.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits->val.row(i).array() - mx).exp();
    const double z = e.sum();
    probs.row(i) = e / z;
    loss -= logits->val(i, targets[static_cast<size_t>(i)]) - mx - std::log(z);
  }
  loss /= static_cast<double>(rows);
  Node *out = make(Mat::Constant(1, 1, loss), logits->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, logits, probs, targets = std::move(targets)]() {
      const double up = out->grad(0, 0) / static_cast<double>(logits->val.rows());
      Mat g = probs * up;
      for (Eigen::Index i = 0; i < logits->val.rows(); ++i)
        g(i, targets[static_cast<size_t>(i)]) -= up;
      logits->accumulate(g);
    };
  }
  return out;
}

Node *Tape::mean_rows(Node *a) {
  const double inv = 1.0 / static_cast<double>(a->val.rows());
  Node *out = make(a->val.colwise().sum() * inv, a->requires_grad);
  if (out->requires_grad) {
    out->backward = [out, a, inv]() {
      Mat g(a->val.rows(), a->val.cols());
      for (Eigen::Index i = 0; i < a->val.rows(); ++i) g.row(i) = out->grad.row(0) * inv;
      a->accumulate(g);
    };
  }
  return out;
}

void Tape::backward(Node *loss) {
  assert(loss->val.rows() == 1 && loss->val.cols() == 1);
  loss->grad = Mat::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node *n = it->get();
    if (n->backward && n->has_grad()) n->backward();
  }
}

}  // namespace qfta::ad
