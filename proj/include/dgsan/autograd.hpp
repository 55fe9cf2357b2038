#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dgsan/tensor.hpp"

// Reverse-mode autodiff over Tensor. Each op builds a Node holding the
// forward value and a closure that routes the incoming gradient to the
// parents. Graphs are throwaway: parameters are long-lived leaf nodes whose
// grad buffers accumulate across backward() calls until cleared.
namespace dgsan::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  DataVec grad;  // allocated lazily, matches value.numel()
  bool requires_grad = false;
  std::string name;  // nonempty for parameters
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), 0.0);
  }
  // Allocation-only variant for backward passes that overwrite the whole
  // buffer: returns true when this call allocated it, in which case the
  // caller must assign (not accumulate) and must cover every element.
  // An allocated buffer is always initialized, so later contributors that
  // see `false` (or use ensure_grad) accumulate safely.
  bool grad_uninit() {
    if (grad.size() == value.data.size()) return false;
    grad.resize(value.data.size());
    return true;
  }
  void zero_grad() { grad.assign(value.data.size(), 0.0); }
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad, std::string name = {});

// Backpropagates from a scalar (1-element) root. `seed` is the gradient of
// the overall objective w.r.t. the root; batch accumulation passes 1/batch.
void backward(const Var& root, double seed = 1.0);

// ---- elementwise / matrix ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_rowvec(const Var& x, const Var& b);  // x:[m,n] + b:[1,n] or [n]
Var matmul(const Var& a, const Var& b);      // [m,k]x[k,n]
Var transpose(const Var& a);                 // [m,n]->[n,m]
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var gelu(const Var& x);  // erf form (high-accuracy rational approximation)
Var softmax_rows(const Var& x);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

inline Var linear(const Var& x, const Var& w, const Var& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- structure ----
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
Var slice_rows(const Var& x, int r0, int r1);
Var slice_cols(const Var& x, int c0, int c1);
Var gather_rows(const Var& x, std::vector<int> idx);
Var reshape(const Var& x, Shape s);
Var mean_rows(const Var& x);  // [m,n] -> [1,n]
Var mean_all(const Var& x);   // -> [1]
Var diag(const Var& v);       // [1,n] -> [n,n] with v on the diagonal
Var outer_add(const Var& u, const Var& v);  // u:[m,1], v:[n,1] -> [m,n], u_i+v_j
Var weighted_sum(const Var& x, const Tensor& w);  // -> [1]

// ---- 3D feature maps, layout [C, D, H, W] ----
Var conv3d(const Var& x, const Var& w, const Var& b, const int stride[3], const int pad[3]);
// Same convolution applied to two equally-shaped inputs with shared weights;
// the two patch matrices ride through one GEMM per pass so the kernel is
// streamed from memory once. Falls back to two conv3d calls when pointwise.
std::pair<Var, Var> conv3d_pair(const Var& x0, const Var& x1, const Var& w, const Var& b,
                                const int stride[3], const int pad[3]);
Var depthwise_conv3d(const Var& x, const Var& w, const Var& b);  // 3x3x3, stride 1, pad 1
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var global_avg_pool(const Var& x);            // -> [1,C]
Var avg_pool_halve(const Var& x);             // kernel/stride 2 per axis (1 where dim==1)
Var scale_channels(const Var& x, const Var& gate);  // gate:[1,C]
Var channel_concat(const std::vector<Var>& xs);

// Fused per-window scaled-dot-product attention. q/k/v are [n, dim] with
// rows already grouped as n_windows contiguous blocks of equal length.
// masks, when given, holds one additive [len,len] tensor per window (empty
// tensors mean unmasked). attn_out receives the row-stochastic matrix of
// every (window, head) pair.
Var windowed_mha(const Var& q, const Var& k, const Var& v, int n_windows, int heads,
                 const std::vector<Tensor>* masks = nullptr,
                 std::vector<Tensor>* attn_out = nullptr);

// ---- token/volume bridges ----
// Volume [D,H,W] -> [n_tokens, pd*ph*pw] with token order lexicographic in
// the (d,h,w) patch grid and voxel order (d,h,w) within a patch.
Var extract_patches(const Var& vol, int pd, int ph, int pw);
Var map_to_tokens(const Var& x);                       // [C,D,H,W] -> [D*H*W, C]
Var tokens_to_map(const Var& t, int d, int h, int w);  // inverse

// ---- loss ----
Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels);

}  // namespace dgsan::ag
