#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tak/tensor.hpp"

namespace tak {

// Tape-based reverse-mode autodiff over Tensor. Graphs are dynamic: ops build
// nodes whose backward closures scatter into their inputs' grads. One owner
// thread builds and differentiates a graph; leaves (parameters) persist
// across steps and accumulate grads until zeroed.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void()> backward_fn;  // null for leaves

  Tensor& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
    return grad;
  }
  void zero_grad() {
    if (grad.shape == value.shape)
      std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }
};

Var make_leaf(Tensor value, bool requires_grad);
Var make_constant(Tensor value);

// Grad recording is on by default; disable for teacher/inference passes.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse pass from a scalar root (numel == 1). Accumulates into leaf grads.
void backward(const Var& root);

namespace ops {

// Elementwise (same shape).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var tanh_(const Var& a);

// Reductions.
Var sum(const Var& a);   // -> shape {1}
Var mean(const Var& a);  // -> shape {1}
// sum(a * w) with a constant weight tensor -> shape {1}
Var weighted_sum(const Var& a, const Tensor& w);

// Shape ops (copy semantics; backward scatters).
Var reshape(const Var& a, std::vector<int> shape);
Var concat(const std::vector<Var>& parts, int dim);  // dim 0 or 1, rank <= 2 for dim 1
Var concat_channels(const std::vector<Var>& parts);  // rank-4 (C,D,H,W) along C
Var narrow(const Var& a, int64_t start, int64_t len);  // flat 1-D slice

// Linear algebra. Row-major (m,k) x (k,n) -> (m,n).
Var matmul(const Var& a, const Var& b);
// y = x @ W^T + b with x:(n,din), W:(dout,din), b:(dout) -> (n,dout)
Var linear(const Var& x, const Var& w, const Var& b);
// A:(m,n) + b:(m) broadcast over columns.
Var add_bias_rows(const Var& a, const Var& b);
// Gram matrix S = (B B^T) * inv_scale, B:(n,c) -> (n,n)
Var gram(const Var& b, double inv_scale);
// Per-row L2 normalization of (n,c); norm = sqrt(sum x^2 + eps).
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// Convolution over a single sample (C,D,H,W); weight (Cout,Cin,k,k,k).
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// Transposed conv, kernel 2 stride 2; weight (Cin,Cout,2,2,2). Doubles dims.
Var conv_transpose3d_k2s2(const Var& x, const Var& w, const Var& b);
// Per-channel instance normalization; gamma/beta length C.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// (C,D,H,W) -> (C) spatial mean.
Var global_mean_pool(const Var& x);

// Softmax over dim 0 of (C, ...).
Var softmax_channels(const Var& x);

// Mean over voxels of -log softmax(logits)[label]; logits (C,D,H,W).
Var cross_entropy_with_labels(const Var& logits, const IntGrid& labels);
// Mean over voxels of -log probs[label]; probs (C,D,H,W) already normalized.
Var nll_with_labels(const Var& probs, const IntGrid& labels);
// Soft Dice loss on probabilities (C,D,H,W): 1 - mean_c dice_c.
Var soft_dice_loss(const Var& probs, const IntGrid& labels, double eps);

// Rows (n, C) picked from x (C,D,H,W) at flat spatial indices.
Var gather_voxels(const Var& x, const std::vector<int64_t>& spatial_indices);

// For each (row, cols) pair: logsumexp of S[row, c] over c in cols -> (n_pairs).
struct RowSubset {
  int row = 0;
  std::vector<int> cols;
};
Var gather_logsumexp(const Var& s, const std::vector<RowSubset>& subsets);

}  // namespace ops

// Central-difference gradient of f with respect to entry i of leaf.
// Used by tests as the independent oracle.
double central_difference(const std::function<double()>& f, Var leaf, int64_t i, double h);

}  // namespace tak
