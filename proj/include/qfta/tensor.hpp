#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace qfta::ad {

using Mat = Eigen::MatrixXd;

// A node in the computation tape. Values are dense double matrices; row
// vectors are 1xN matrices and scalars are 1x1.
struct Node {
  Mat val;
  Mat grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::function<void()> backward;  // propagates this->grad into parents

  void accumulate(const Mat &g) {
    if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    grad += g;
  }
  bool has_grad() const { return grad.size() != 0; }
};

// Reverse-mode tape. Nodes are created in topological order; backward()
// walks them in reverse. The tape owns every node it creates.
class Tape {
 public:
  Node *leaf(Mat v, bool requires_grad);
  Node *constant(Mat v) { return leaf(std::move(v), false); }

  Node *add(Node *a, Node *b);                  // same shape
  Node *add_rowvec(Node *a, Node *bias);        // bias 1xN broadcast over rows
  Node *scale(Node *a, double s);
  Node *matmul(Node *a, Node *b);               // (m,k)x(k,n)
  Node *matmul_nt(Node *a, Node *b);            // a * b^T
  Node *layernorm(Node *x, Node *gain, Node *bias, double eps = 1e-5);
  Node *gelu(Node *x);
  Node *softmax_rows(Node *x);
  // Row i of the output is a softmax over columns 0..i+offset; the rest is 0.
  Node *softmax_causal(Node *x, int offset);
  Node *slice_cols(Node *a, int start, int len);
  Node *concat_cols(const std::vector<Node *> &parts);
  Node *concat_rows(Node *a, Node *b);
  Node *gather_rows(Node *table, std::vector<int> ids);
  // Mean cross-entropy of row i of `logits` against targets[i]; scalar output.
  Node *cross_entropy_mean(Node *logits, std::vector<int> targets);
  Node *mean_rows(Node *a);                     // (m,n) -> (1,n)

  void backward(Node *loss);
  size_t size() const { return nodes_.size(); }

 private:
  Node *make(Mat v, bool requires_grad);
  std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace qfta::ad
