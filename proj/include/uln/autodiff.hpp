#pragma once

// Minimal tape-based reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass. Parameters enter as
// leaves bound to an external gradient buffer; backward() replays the tape in
// reverse and accumulates into those buffers. Constants never receive
// gradients and operations whose inputs are all constant are not recorded for
// the backward sweep.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace uln::ad {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  // `grad_sink` may be null, in which case the leaf behaves like a constant.
  Var leaf(const Mat& value, Mat* grad_sink);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates to the sinks.
  void backward(Var loss);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  Mat& grad(int id);
  std::size_t size() const { return nodes_.size(); }

  // Registers the result of an operation. `backward` receives the output
  // gradient and is only invoked when some input requires a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs,
             std::function<void(Tape&, const Mat&)> backward);
  Var record(Mat value, std::span<const Var> inputs,
             std::function<void(Tape&, const Mat&)> backward);

  // Accumulates `g` into the gradient of `v` if it participates in backward.
  void accumulate(Var v, const Mat& g);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    Mat* sink = nullptr;
    std::function<void(Tape&, const Mat&)> backward;
  };
  std::deque<Node> nodes_;  // stable references across record()
};

// Elementwise and linear-algebra building blocks. Shapes follow Eigen rules;
// "row broadcast" means a 1 x n operand applied to every row.
Var matmul(Var a, Var b);
Var matmul_t(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_row(Var a, Var row);  // a + broadcast(row)
Var mul(Var a, Var b);        // Hadamard
Var mul_row(Var a, Var row);  // a .* broadcast(row)
Var scale(Var a, double s);
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);
Var vstack(std::span<const Var> parts);
Var hstack(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var table, std::span<const int> indices);
Var mean_rows(Var a);  // column-wise mean -> 1 x n
Var sum_all(Var a);    // -> 1 x 1
Var transpose(Var a);

// Scaled dot-product attention with `heads` column blocks. q: n x d,
// k, v: m x d. Returns concat_h softmax(q_h k_h^T * scale) v_h (n x d); the
// per-head probability matrices are copied into `probs` when non-null.
Var attention(Var q, Var k, Var v, int heads, double scale, std::vector<Mat>* probs = nullptr);

// Cross-entropy of a 1 x k (or k x 1) logit vector against a class index.
Var cross_entropy(Var logits, int target);
// Binary cross-entropy on a 1x1 pre-sigmoid logit.
Var bce_with_logits(Var logit, double label);
// Sum over rows of weights[i] * BCE(logits[i], labels[i]); logits are n x 1.
Var weighted_bce_with_logits(Var logits, const Eigen::VectorXd& labels, const Eigen::VectorXd& weights);

// Helper for the gradient-check tests: relative error with an absolute floor.
double relative_error(double analytic, double numeric, double floor = 1e-8);

}  // namespace uln::ad
