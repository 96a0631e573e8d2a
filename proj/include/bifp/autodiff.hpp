#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "bifp/tensor.hpp"

namespace bifp {

// Reverse-mode autodiff over Tensor values. Graphs are built define-by-run;
// nodes are created strictly after their parents, so creation order is a
// valid topological order for the backward sweep.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand
  bool requires_grad = false;
  int64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  Tensor& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor(value.shape);
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

Var make_const(Tensor v);
Var make_param(Tensor v);

// Seeds d(root)/d(root) = 1 (root must be scalar) and sweeps the graph.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& x, double scale, double shift);  // scale*x + shift
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh_op(const Var& x);

// ---- dense ----
// x [B,I], w [O,I], optional b [O] -> [B,O]
Var linear(const Var& x, const Var& w, const Var& b);

// ---- conv stack; activations are [B,C,T,H,W] ----
Var conv3d(const Var& x, const Var& w, const Var& b, std::array<int, 3> stride,
           std::array<int, 3> pad);
Var maxpool3d(const Var& x, std::array<int, 3> kernel, std::array<int, 3> stride,
              std::array<int, 3> pad);
// Per-channel batch normalization. Training mode normalizes with batch
// statistics and updates the running buffers in place; eval mode uses the
// buffers. gamma/beta are [C]; running_* are plain value holders.
Var batchnorm3d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                Tensor& running_var, bool training, double momentum = 0.1,
                double eps = 1e-5);

// [B,C,T,H,W] -> [B,C], mean over T,H,W
Var global_avg_pool(const Var& x);
// [B,C,T,H,W] -> [B*gh*gw, C]: mean over T, spatial average-binned to gh x gw.
// Rows are ordered (b, cell) with cell = gy*gw + gx. Spatial dims must split
// evenly into the grid.
Var grid_avg_pool(const Var& x, int gh, int gw);

// ---- row plumbing over [R,d] matrices ----
Var gather_rows(const Var& x, std::vector<int64_t> idx);
Var concat_rows(const Var& a, const Var& b);
// [G*S,d] -> [G,d], mean over each group of S consecutive rows
Var mean_rows_grouped(const Var& x, int64_t group_size);

// ---- losses ----
// logits [B,K], labels in [0,K); mean cross-entropy with max-subtracted
// log-softmax.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

double fd_gradient(const std::function<double()>& f, double* slot, double h = 1e-5);

}  // namespace bifp
