#include "dgsan/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dgsan::ag {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

using ERowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const ERowMat, Eigen::Unaligned, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<ERowMat, Eigen::Unaligned, Eigen::OuterStride<>>;

// C = alpha*op(A)*op(B) + beta*C, row-major with explicit leading dimensions.
void gemm_ld(bool ta, bool tb, int m, int n, int k, double alpha, const double* A, int lda,
             const double* B, int ldb, double beta, double* C, int ldc) {
  MutMap Cm(C, m, n, Eigen::OuterStride<>(ldc));
  ConstMap Am(A, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(lda));
  ConstMap Bm(B, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(ldb));
  auto run = [&](const auto& prod) {
    if (beta == 0.0)
      Cm.noalias() = alpha * prod;
    else if (beta == 1.0)
      Cm.noalias() += alpha * prod;
    else {
      Cm *= beta;
      Cm.noalias() += alpha * prod;
    }
  };
  if (!ta && !tb)
    run(Am * Bm);
  else if (!ta && tb)
    run(Am * Bm.transpose());
  else if (ta && !tb)
    run(Am.transpose() * Bm);
  else
    run(Am.transpose() * Bm.transpose());
}

// C = op(A)*op(B) + beta*C, row-major; A stored [ra,ca], B stored [rb,cb].
void gemm(bool ta, bool tb, const double* A, int ra, int ca, const double* B, int rb, int cb,
          double* C, double beta) {
  const int m = ta ? ca : ra;
  const int k = ta ? ra : ca;
  const int kb = tb ? cb : rb;
  const int n = tb ? rb : cb;
  if (k != kb) throw std::invalid_argument("gemm: inner dimensions disagree");
  gemm_ld(ta, tb, m, n, k, 1.0, A, ca, B, cb, beta, C, n);
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

void require_2d(const Var& x, const char* what) {
  if (x->value.ndim() != 2) throw std::invalid_argument(std::string(what) + ": expected 2-d tensor");
}

void require_map(const Var& x, const char* what) {
  if (x->value.ndim() != 4) throw std::invalid_argument(std::string(what) + ": expected [C,D,H,W]");
}

}  // namespace

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var leaf(Tensor v, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

void backward(const Var& root, double seed) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;
  // Iterative post-order DFS for topological order.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += seed;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    if (a->requires_grad) {
      const bool fresh = a->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> da(a->grad.data(), len);
      if (fresh)
        da = g;
      else
        da += g;
    }
    if (b->requires_grad) {
      const bool fresh = b->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> db(b->grad.data(), len);
      if (fresh)
        db = g;
      else
        db += g;
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    if (a->requires_grad) {
      const bool fresh = a->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> da(a->grad.data(), len);
      if (fresh)
        da = g;
      else
        da += g;
    }
    if (b->requires_grad) {
      const bool fresh = b->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> db(b->grad.data(), len);
      if (fresh)
        db = -g;
      else
        db -= g;
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    Eigen::Map<const Eigen::ArrayXd> av(a->value.data.data(), len);
    Eigen::Map<const Eigen::ArrayXd> bv(b->value.data.data(), len);
    if (a->requires_grad) {
      const bool fresh = a->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> da(a->grad.data(), len);
      if (fresh)
        da = g * bv;
      else
        da += g * bv;
    }
    if (b->requires_grad) {
      const bool fresh = b->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> db(b->grad.data(), len);
      if (fresh)
        db = g * av;
      else
        db += g * av;
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= s;
  return make_node(std::move(out), {a}, [a, s](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    const bool fresh = a->grad_uninit();
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    Eigen::Map<Eigen::ArrayXd> da(a->grad.data(), len);
    if (fresh)
      da = g * s;
    else
      da += g * s;
  });
}

Var add_rowvec(const Var& x, const Var& b) {
  require_2d(x, "add_rowvec");
  const int m = x->value.dim(0), nn = x->value.dim(1);
  if (b->value.numel() != nn) throw std::invalid_argument("add_rowvec: width mismatch");
  using RowArr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Array<double, 1, Eigen::Dynamic>;
  Tensor out = Tensor::uninit(x->value.shape);
  {
    Eigen::Map<RowArr> O(out.data.data(), m, nn);
    O = Eigen::Map<const RowArr>(x->value.data.data(), m, nn);
    O.rowwise() += Eigen::Map<const RowVec>(b->value.data.data(), nn);
  }
  return make_node(std::move(out), {x, b}, [x, b, m, nn](Node& n) {
    if (x->requires_grad) {
      const bool fresh = x->grad_uninit();
      Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), x->grad.size());
      Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), n.grad.size());
      if (fresh)
        dx = g;
      else
        dx += g;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      Eigen::Map<RowVec>(b->grad.data(), nn) +=
          Eigen::Map<const RowArr>(n.grad.data(), m, nn).colwise().sum();
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a->value.dim(0), k = a->value.dim(1), n2 = b->value.dim(1);
  if (b->value.dim(0) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out = Tensor::uninit({m, n2});
  gemm(false, false, a->value.data.data(), m, k, b->value.data.data(), k, n2, out.data.data(), 0.0);
  return make_node(std::move(out), {a, b}, [a, b, m, k, n2](Node& n) {
    if (a->requires_grad) {
      const double beta = a->grad_uninit() ? 0.0 : 1.0;
      gemm(false, true, n.grad.data(), m, n2, b->value.data.data(), k, n2, a->grad.data(), beta);
    }
    if (b->requires_grad) {
      const double beta = b->grad_uninit() ? 0.0 : 1.0;
      gemm(true, false, a->value.data.data(), m, k, n.grad.data(), m, n2, b->grad.data(), beta);
    }
  });
}

Var transpose(const Var& a) {
  require_2d(a, "transpose");
  const int m = a->value.dim(0), n2 = a->value.dim(1);
  Tensor out = Tensor::uninit({n2, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) out[j * m + i] = a->value[i * n2 + j];
  return make_node(std::move(out), {a}, [a, m, n2](Node& n) {
    a->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n2; ++j) a->grad[i * n2 + j] += n.grad[j * m + i];
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [x](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    const bool fresh = x->grad_uninit();
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    Eigen::Map<const Eigen::ArrayXd> xv(x->value.data.data(), len);
    Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), len);
    if (fresh)
      dx = (xv > 0.0).select(g, 0.0);
    else
      dx += (xv > 0.0).select(g, 0.0);
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out = x->value;
  for (auto& v : out.data) v = v > 0.0 ? v : slope * v;
  return make_node(std::move(out), {x}, [x, slope](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    const bool fresh = x->grad_uninit();
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    Eigen::Map<const Eigen::ArrayXd> xv(x->value.data.data(), len);
    Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), len);
    if (fresh)
      dx = (xv > 0.0).select(g, g * slope);
    else
      dx += (xv > 0.0).select(g, g * slope);
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  auto saved = std::make_shared<Tensor>(out);
  return make_node(std::move(out), {x}, [x, saved](Node& n) {
    const auto len = static_cast<Eigen::Index>(n.grad.size());
    const bool fresh = x->grad_uninit();
    Eigen::Map<const Eigen::ArrayXd> g(n.grad.data(), len);
    Eigen::Map<const Eigen::ArrayXd> sv(saved->data.data(), len);
    Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), len);
    if (fresh)
      dx = g * sv * (1.0 - sv);
    else
      dx += g * sv * (1.0 - sv);
  });
}

Var gelu(const Var& x) {
  const auto len = static_cast<Eigen::Index>(x->value.numel());
  Tensor out = Tensor::uninit(x->value.shape);
  auto cdf = std::make_shared<DataVec>(static_cast<size_t>(len));
  auto pdf = std::make_shared<DataVec>(static_cast<size_t>(len));
  {
    Eigen::Map<const Eigen::ArrayXd> xv(x->value.data.data(), len);
    Eigen::Map<Eigen::ArrayXd> cv(cdf->data(), len);
    Eigen::Map<Eigen::ArrayXd> pv(pdf->data(), len);
    Eigen::Map<Eigen::ArrayXd> ov(out.data.data(), len);
    // Normal CDF via the Abramowitz & Stegun 7.1.26 rational approximation of
    // erf (|error| < 1.5e-7), evaluated on |z| and reflected for z < 0. The
    // stored "pdf" is the exact derivative of this approximation (an even
    // function of x), so the backward pass differentiates what was computed.
    constexpr double p = 0.3275911;
    // Blocked so the intermediate arrays stay in L1; on large activations the
    // unblocked form is dominated by round trips through full-size temporaries.
    constexpr Eigen::Index kBlock = 1024;
    using Blk = Eigen::Array<double, Eigen::Dynamic, 1, 0, kBlock, 1>;
    for (Eigen::Index i0 = 0; i0 < len; i0 += kBlock) {
      const Eigen::Index w = std::min(kBlock, len - i0);
      const auto xb = xv.segment(i0, w);
      const Blk z = xb.abs() * kInvSqrt2;
      const Blk t = 1.0 / (1.0 + p * z);
      const Blk poly =
          t * (0.254829592 +
               t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
      const Blk dpoly = 0.254829592 + t * (2 * -0.284496736 +
                                           t * (3 * 1.421413741 +
                                                t * (4 * -1.453152027 + t * 5 * 1.061405429)));
      const Blk ez = (-z.square()).exp();
      const Blk half_erfc = 0.5 * poly * ez;
      cv.segment(i0, w) = (xb >= 0.0).select(1.0 - half_erfc, half_erfc);
      pv.segment(i0, w) = (0.5 * kInvSqrt2) * ez * (2.0 * z * poly + p * t.square() * dpoly);
      ov.segment(i0, w) = xb * cv.segment(i0, w);
    }
  }
  return make_node(std::move(out), {x}, [x, cdf, pdf, len](Node& nd) {
    const bool fresh = x->grad_uninit();
    Eigen::Map<const Eigen::ArrayXd> xv(x->value.data.data(), len);
    Eigen::Map<const Eigen::ArrayXd> cv(cdf->data(), len);
    Eigen::Map<const Eigen::ArrayXd> pv(pdf->data(), len);
    Eigen::Map<const Eigen::ArrayXd> gv(nd.grad.data(), len);
    Eigen::Map<Eigen::ArrayXd> dxv(x->grad.data(), len);
    if (fresh)
      dxv = gv * (cv + xv * pv);
    else
      dxv += gv * (cv + xv * pv);
  });
}

Var softmax_rows(const Var& x) {
  require_2d(x, "softmax_rows");
  const int m = x->value.dim(0), n2 = x->value.dim(1);
  Tensor out = x->value;
  for (int i = 0; i < m; ++i) {
    double mx = out[i * n2];
    for (int j = 1; j < n2; ++j) mx = std::max(mx, out[i * n2 + j]);
    double sum = 0.0;
    for (int j = 0; j < n2; ++j) {
      out[i * n2 + j] = std::exp(out[i * n2 + j] - mx);
      sum += out[i * n2 + j];
    }
    for (int j = 0; j < n2; ++j) out[i * n2 + j] /= sum;
  }
  auto saved = std::make_shared<Tensor>(out);
  return make_node(std::move(out), {x}, [x, saved, m, n2](Node& n) {
    x->ensure_grad();
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n2; ++j) dot += n.grad[i * n2 + j] * saved->data[i * n2 + j];
      for (int j = 0; j < n2; ++j)
        x->grad[i * n2 + j] += saved->data[i * n2 + j] * (n.grad[i * n2 + j] - dot);
    }
  });
}

namespace {

// Shared normalization core: treats x as `groups` groups of `width` strided
// values and normalizes each group. Rows: stride 1. Channels: stride = spatial.
struct NormPlan {
  int groups, width;
  int64_t group_stride, elem_stride;
};

// Two layouts share the same math. "rows": each group is a contiguous row of
// `width` values (elem_stride 1). "channels": groups are spatial positions and
// the normalized axis is the channel axis, so the data forms a [width, groups]
// row-major matrix and every per-channel slice is contiguous. Both paths work
// on contiguous spans so the elementwise kernels vectorize.
Var layer_norm_impl(const Var& x, const Var& gamma, const Var& beta, double eps, NormPlan pl,
                    const char* what) {
  if (gamma->value.numel() != pl.width || beta->value.numel() != pl.width)
    throw std::invalid_argument(std::string(what) + ": gamma/beta width mismatch");
  const bool rows = pl.elem_stride == 1;
  Tensor out = Tensor::uninit(x->value.shape);
  auto stats = std::make_shared<Tensor>(Shape{pl.groups, 2});  // mean, inv_std per group
  using CMap = Eigen::Map<const Eigen::ArrayXd>;
  using MMap = Eigen::Map<Eigen::ArrayXd>;
  const double* xp = x->value.data.data();
  if (rows) {
    const int w = pl.width;
    CMap ga(gamma->value.data.data(), w), be(beta->value.data.data(), w);
    for (int g = 0; g < pl.groups; ++g) {
      CMap xr(xp + g * pl.group_stride, w);
      MMap orow(out.data.data() + g * pl.group_stride, w);
      const double mean = xr.mean();
      orow = xr - mean;
      const double inv_std = 1.0 / std::sqrt(orow.square().mean() + eps);
      (*stats)[g * 2] = mean;
      (*stats)[g * 2 + 1] = inv_std;
      orow = ga * (orow * inv_std) + be;
    }
  } else {
    const int C = pl.width;
    const int64_t P = pl.groups;
    Eigen::ArrayXd mu = Eigen::ArrayXd::Zero(P), var = Eigen::ArrayXd::Zero(P);
    for (int c = 0; c < C; ++c) mu += CMap(xp + c * P, P);
    mu /= C;
    for (int c = 0; c < C; ++c) var += (CMap(xp + c * P, P) - mu).square();
    const Eigen::ArrayXd inv = 1.0 / (var / C + eps).sqrt();
    for (int64_t g = 0; g < P; ++g) {
      (*stats)[g * 2] = mu[g];
      (*stats)[g * 2 + 1] = inv[g];
    }
    for (int c = 0; c < C; ++c)
      MMap(out.data.data() + c * P, P) =
          gamma->value[c] * ((CMap(xp + c * P, P) - mu) * inv) + beta->value[c];
  }
  return make_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, pl, rows](Node& n) {
    using CMap = Eigen::Map<const Eigen::ArrayXd>;
    using MMap = Eigen::Map<Eigen::ArrayXd>;
    const double* xp = x->value.data.data();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    // Every element of x->grad is written exactly once below, so a fresh
    // buffer takes plain assignment.
    const bool fresh = x->requires_grad && x->grad_uninit();
    if (rows) {
      const int w = pl.width;
      CMap ga(gamma->value.data.data(), w);
      Eigen::ArrayXd xh(w), dxh(w);
      for (int g = 0; g < pl.groups; ++g) {
        const int64_t base = g * pl.group_stride;
        const double mean = (*stats)[g * 2], inv_std = (*stats)[g * 2 + 1];
        CMap xr(xp + base, w), gr(n.grad.data() + base, w);
        xh = (xr - mean) * inv_std;
        dxh = gr * ga;
        if (gamma->requires_grad) MMap(gamma->grad.data(), w) += gr * xh;
        if (beta->requires_grad) MMap(beta->grad.data(), w) += gr;
        if (x->requires_grad) {
          const double s1 = dxh.mean(), s2 = (dxh * xh).mean();
          MMap dx(x->grad.data() + base, w);
          if (fresh)
            dx = inv_std * (dxh - s1 - xh * s2);
          else
            dx += inv_std * (dxh - s1 - xh * s2);
        }
      }
    } else {
      const int C = pl.width;
      const int64_t P = pl.groups;
      Eigen::ArrayXd mu(P), inv(P);
      for (int64_t g = 0; g < P; ++g) {
        mu[g] = (*stats)[g * 2];
        inv[g] = (*stats)[g * 2 + 1];
      }
      Eigen::ArrayXd s1 = Eigen::ArrayXd::Zero(P), s2 = Eigen::ArrayXd::Zero(P);
      Eigen::ArrayXd xh(P), dxh(P);
      for (int c = 0; c < C; ++c) {
        CMap xr(xp + c * P, P), gr(n.grad.data() + c * P, P);
        xh = (xr - mu) * inv;
        dxh = gr * gamma->value[c];
        s1 += dxh;
        s2 += dxh * xh;
        if (gamma->requires_grad) gamma->grad[c] += (gr * xh).sum();
        if (beta->requires_grad) beta->grad[c] += gr.sum();
      }
      if (x->requires_grad) {
        s1 /= C;
        s2 /= C;
        for (int c = 0; c < C; ++c) {
          CMap xr(xp + c * P, P), gr(n.grad.data() + c * P, P);
          MMap dx(x->grad.data() + c * P, P);
          if (fresh)
            dx = inv * (gr * gamma->value[c] - s1 - ((xr - mu) * inv) * s2);
          else
            dx += inv * (gr * gamma->value[c] - s1 - ((xr - mu) * inv) * s2);
        }
      }
    }
  });
}

}  // namespace

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_2d(x, "layer_norm_rows");
  NormPlan pl{x->value.dim(0), x->value.dim(1), x->value.dim(1), 1};
  return layer_norm_impl(x, gamma, beta, eps, pl, "layer_norm_rows");
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_map(x, "layer_norm_channels");
  const int C = x->value.dim(0);
  const int P = static_cast<int>(x->value.numel() / C);
  NormPlan pl{P, C, 1, P};
  return layer_norm_impl(x, gamma, beta, eps, pl, "layer_norm_channels");
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int n2 = xs[0]->value.dim(1);
  int m = 0;
  for (const auto& x : xs) {
    require_2d(x, "concat_rows");
    if (x->value.dim(1) != n2) throw std::invalid_argument("concat_rows: width mismatch");
    m += x->value.dim(0);
  }
  Tensor out = Tensor::uninit({m, n2});
  int64_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + off);
    off += x->value.numel();
  }
  return make_node(std::move(out), xs, [xs](Node& n) {
    int64_t off = 0;
    for (const auto& x : xs) {
      const auto len = x->value.numel();
      if (x->requires_grad) {
        const bool fresh = x->grad_uninit();
        Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), len);
        Eigen::Map<const Eigen::ArrayXd> g(n.grad.data() + off, len);
        if (fresh)
          dx = g;
        else
          dx += g;
      }
      off += len;
    }
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = xs[0]->value.dim(0);
  int n2 = 0;
  for (const auto& x : xs) {
    require_2d(x, "concat_cols");
    if (x->value.dim(0) != m) throw std::invalid_argument("concat_cols: height mismatch");
    n2 += x->value.dim(1);
  }
  Tensor out = Tensor::uninit({m, n2});
  int coff = 0;
  for (const auto& x : xs) {
    const int w = x->value.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out[i * n2 + coff + j] = x->value[i * w + j];
    coff += w;
  }
  return make_node(std::move(out), xs, [xs, m, n2](Node& n) {
    int coff = 0;
    for (const auto& x : xs) {
      const int w = x->value.dim(1);
      if (x->requires_grad) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) x->grad[i * w + j] += n.grad[i * n2 + coff + j];
      }
      coff += w;
    }
  });
}

Var slice_rows(const Var& x, int r0, int r1) {
  require_2d(x, "slice_rows");
  const int m = x->value.dim(0), n2 = x->value.dim(1);
  if (r0 < 0 || r1 > m || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out = Tensor::uninit({r1 - r0, n2});
  std::copy(x->value.data.begin() + static_cast<int64_t>(r0) * n2,
            x->value.data.begin() + static_cast<int64_t>(r1) * n2, out.data.begin());
  return make_node(std::move(out), {x}, [x, r0, n2](Node& n) {
    x->ensure_grad();
    const int64_t off = static_cast<int64_t>(r0) * n2;
    for (size_t i = 0; i < n.grad.size(); ++i) x->grad[off + i] += n.grad[i];
  });
}

Var slice_cols(const Var& x, int c0, int c1) {
  require_2d(x, "slice_cols");
  const int m = x->value.dim(0), n2 = x->value.dim(1);
  if (c0 < 0 || c1 > n2 || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  const int w = c1 - c0;
  Tensor out = Tensor::uninit({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out[i * w + j] = x->value[i * n2 + c0 + j];
  return make_node(std::move(out), {x}, [x, c0, w, m, n2](Node& n) {
    x->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) x->grad[i * n2 + c0 + j] += n.grad[i * w + j];
  });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
  require_2d(x, "gather_rows");
  const int m = x->value.dim(0), n2 = x->value.dim(1);
  Tensor out = Tensor::uninit({static_cast<int>(idx.size()), n2});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= m) throw std::invalid_argument("gather_rows: index out of range");
    std::copy(x->value.data.begin() + static_cast<int64_t>(idx[i]) * n2,
              x->value.data.begin() + static_cast<int64_t>(idx[i] + 1) * n2,
              out.data.begin() + static_cast<int64_t>(i) * n2);
  }
  auto ids = std::make_shared<std::vector<int>>(std::move(idx));
  return make_node(std::move(out), {x}, [x, ids, n2](Node& n) {
    x->ensure_grad();
    for (size_t i = 0; i < ids->size(); ++i) {
      const int64_t src = static_cast<int64_t>(i) * n2;
      const int64_t dst = static_cast<int64_t>((*ids)[i]) * n2;
      for (int j = 0; j < n2; ++j) x->grad[dst + j] += n.grad[src + j];
    }
  });
}

Var reshape(const Var& x, Shape s) {
  if (shape_numel(s) != x->value.numel()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor out;
  out.shape = std::move(s);
  out.data = x->value.data;
  return make_node(std::move(out), {x}, [x](Node& n) {
    x->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) x->grad[i] += n.grad[i];
  });
}

Var mean_rows(const Var& x) {
  require_2d(x, "mean_rows");
  const int m = x->value.dim(0), n2 = x->value.dim(1);
  Tensor out({1, n2});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) out[j] += x->value[i * n2 + j];
  for (int j = 0; j < n2; ++j) out[j] /= m;
  return make_node(std::move(out), {x}, [x, m, n2](Node& n) {
    x->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n2; ++j) x->grad[i * n2 + j] += n.grad[j] / m;
  });
}

Var mean_all(const Var& x) {
  const int64_t cnt = x->value.numel();
  Tensor out({1});
  for (const auto& v : x->value.data) out[0] += v;
  out[0] /= static_cast<double>(cnt);
  return make_node(std::move(out), {x}, [x, cnt](Node& n) {
    x->ensure_grad();
    const double g = n.grad[0] / static_cast<double>(cnt);
    for (int64_t i = 0; i < cnt; ++i) x->grad[i] += g;
  });
}

Var diag(const Var& v) {
  const int n2 = static_cast<int>(v->value.numel());
  Tensor out({n2, n2});
  for (int i = 0; i < n2; ++i) out[i * n2 + i] = v->value[i];
  return make_node(std::move(out), {v}, [v, n2](Node& n) {
    v->ensure_grad();
    for (int i = 0; i < n2; ++i) v->grad[i] += n.grad[i * n2 + i];
  });
}

Var outer_add(const Var& u, const Var& v) {
  const int m = static_cast<int>(u->value.numel());
  const int n2 = static_cast<int>(v->value.numel());
  Tensor out = Tensor::uninit({m, n2});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) out[i * n2 + j] = u->value[i] + v->value[j];
  return make_node(std::move(out), {u, v}, [u, v, m, n2](Node& n) {
    if (u->requires_grad) {
      u->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) u->grad[i] += n.grad[i * n2 + j];
    }
    if (v->requires_grad) {
      v->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) v->grad[j] += n.grad[i * n2 + j];
    }
  });
}

Var weighted_sum(const Var& x, const Tensor& w) {
  if (!x->value.same_shape(w)) throw std::invalid_argument("weighted_sum: shape mismatch");
  Tensor out({1});
  for (int64_t i = 0; i < x->value.numel(); ++i) out[0] += x->value[i] * w[i];
  auto wp = std::make_shared<Tensor>(w);
  return make_node(std::move(out), {x}, [x, wp](Node& n) {
    x->ensure_grad();
    for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += n.grad[0] * wp->data[i];
  });
}

// ---- convolutions ----

namespace {

struct ConvDims {
  int Ci, D, H, W, Co, kd, kh, kw;
  int sd, sh, sw, pd, ph, pw;
  int OD, OH, OW;
  int64_t P() const { return static_cast<int64_t>(OD) * OH * OW; }
  int64_t K() const { return static_cast<int64_t>(Ci) * kd * kh * kw; }
};

// col is [K, P] when transposed == false, [P, K] otherwise. The transposed
// layout is used when P is tiny (deep stages): it lets every GEMM around the
// conv put the long K axis where the kernel can stream it.
void im2col(const double* x, const ConvDims& c, double* col, bool transposed) {
  const int64_t P = c.P(), K = c.K();
  const int64_t rs = transposed ? 1 : P;   // row stride
  const int64_t ps = transposed ? K : 1;   // position stride
  int64_t row = 0;
  for (int ci = 0; ci < c.Ci; ++ci)
    for (int zd = 0; zd < c.kd; ++zd)
      for (int zh = 0; zh < c.kh; ++zh)
        for (int zw = 0; zw < c.kw; ++zw, ++row) {
          double* dst = col + row * rs;
          int64_t p = 0;
          for (int od = 0; od < c.OD; ++od) {
            const int id = od * c.sd - c.pd + zd;
            for (int oh = 0; oh < c.OH; ++oh) {
              const int ih = oh * c.sh - c.ph + zh;
              const bool ok_dh = id >= 0 && id < c.D && ih >= 0 && ih < c.H;
              for (int ow = 0; ow < c.OW; ++ow, ++p) {
                const int iw = ow * c.sw - c.pw + zw;
                dst[p * ps] = (ok_dh && iw >= 0 && iw < c.W)
                                  ? x[((static_cast<int64_t>(ci) * c.D + id) * c.H + ih) * c.W + iw]
                                  : 0.0;
              }
            }
          }
        }
}

void col2im_add(const double* col, const ConvDims& c, double* dx, bool transposed) {
  const int64_t P = c.P(), K = c.K();
  const int64_t rs = transposed ? 1 : P;
  const int64_t ps = transposed ? K : 1;
  int64_t row = 0;
  for (int ci = 0; ci < c.Ci; ++ci)
    for (int zd = 0; zd < c.kd; ++zd)
      for (int zh = 0; zh < c.kh; ++zh)
        for (int zw = 0; zw < c.kw; ++zw, ++row) {
          const double* src = col + row * rs;
          int64_t p = 0;
          for (int od = 0; od < c.OD; ++od) {
            const int id = od * c.sd - c.pd + zd;
            for (int oh = 0; oh < c.OH; ++oh) {
              const int ih = oh * c.sh - c.ph + zh;
              const bool ok_dh = id >= 0 && id < c.D && ih >= 0 && ih < c.H;
              for (int ow = 0; ow < c.OW; ++ow, ++p) {
                const int iw = ow * c.sw - c.pw + zw;
                if (ok_dh && iw >= 0 && iw < c.W)
                  dx[((static_cast<int64_t>(ci) * c.D + id) * c.H + ih) * c.W + iw] += src[p * ps];
              }
            }
          }
        }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, const int stride[3], const int pad[3]) {
  require_map(x, "conv3d");
  if (w->value.ndim() != 5) throw std::invalid_argument("conv3d: weight must be [Co,Ci,kd,kh,kw]");
  ConvDims c;
  c.Ci = x->value.dim(0);
  c.D = x->value.dim(1);
  c.H = x->value.dim(2);
  c.W = x->value.dim(3);
  c.Co = w->value.dim(0);
  c.kd = w->value.dim(2);
  c.kh = w->value.dim(3);
  c.kw = w->value.dim(4);
  if (w->value.dim(1) != c.Ci) throw std::invalid_argument("conv3d: channel mismatch");
  c.sd = stride[0];
  c.sh = stride[1];
  c.sw = stride[2];
  c.pd = pad[0];
  c.ph = pad[1];
  c.pw = pad[2];
  c.OD = (c.D + 2 * c.pd - c.kd) / c.sd + 1;
  c.OH = (c.H + 2 * c.ph - c.kh) / c.sh + 1;
  c.OW = (c.W + 2 * c.pw - c.kw) / c.sw + 1;
  if (b->value.numel() != c.Co) throw std::invalid_argument("conv3d: bias size mismatch");

  const bool pointwise = c.kd == 1 && c.kh == 1 && c.kw == 1 && c.sd == 1 && c.sh == 1 &&
                         c.sw == 1 && c.pd == 0 && c.ph == 0 && c.pw == 0;
  const int64_t P = c.P(), K = c.K();
  // With only a handful of output positions, keep the patch matrix as [P, K]
  // so every GEMM touching it has a wide trailing dimension.
  const bool tcol = !pointwise && P <= 8;
  Tensor out = Tensor::uninit({c.Co, c.OD, c.OH, c.OW});
  std::shared_ptr<DataVec> col;
  const double* col_ptr;
  if (pointwise) {
    col_ptr = x->value.data.data();
  } else {
    col = std::make_shared<DataVec>();
    col->resize(static_cast<size_t>(K * P));
    im2col(x->value.data.data(), c, col->data(), tcol);
    col_ptr = col->data();
  }
  if (tcol) {
    DataVec outT(static_cast<size_t>(P) * c.Co);  // [P, Co]
    gemm_ld(false, true, static_cast<int>(P), c.Co, static_cast<int>(K), 1.0, col_ptr,
            static_cast<int>(K), w->value.data.data(), static_cast<int>(K), 0.0, outT.data(), c.Co);
    for (int co = 0; co < c.Co; ++co)
      for (int64_t p = 0; p < P; ++p) out[co * P + p] = outT[p * c.Co + co] + b->value[co];
  } else {
    gemm(false, false, w->value.data.data(), c.Co, static_cast<int>(K), col_ptr,
         static_cast<int>(K), static_cast<int>(P), out.data.data(), 0.0);
    for (int co = 0; co < c.Co; ++co)
      for (int64_t p = 0; p < P; ++p) out[co * P + p] += b->value[co];
  }

  return make_node(std::move(out), {x, w, b}, [x, w, b, c, col, pointwise, tcol](Node& n) {
    const int64_t P = c.P(), K = c.K();
    const double* col_ptr = pointwise ? x->value.data.data() : col->data();
    if (w->requires_grad) {
      const double bw = w->grad_uninit() ? 0.0 : 1.0;
      if (tcol)
        gemm_ld(false, false, c.Co, static_cast<int>(K), static_cast<int>(P), 1.0, n.grad.data(),
                static_cast<int>(P), col_ptr, static_cast<int>(K), bw, w->grad.data(),
                static_cast<int>(K));
      else
        gemm(false, true, n.grad.data(), c.Co, static_cast<int>(P), col_ptr, static_cast<int>(K),
             static_cast<int>(P), w->grad.data(), bw);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int co = 0; co < c.Co; ++co)
        for (int64_t p = 0; p < P; ++p) b->grad[co] += n.grad[co * P + p];
    }
    if (x->requires_grad) {
      if (pointwise) {
        const double bx = x->grad_uninit() ? 0.0 : 1.0;
        gemm(true, false, w->value.data.data(), c.Co, static_cast<int>(K), n.grad.data(), c.Co,
             static_cast<int>(P), x->grad.data(), bx);
      } else {
        x->ensure_grad();
        DataVec dcol(static_cast<size_t>(K * P));
        if (tcol)
          gemm_ld(true, false, static_cast<int>(P), static_cast<int>(K), c.Co, 1.0, n.grad.data(),
                  static_cast<int>(P), w->value.data.data(), static_cast<int>(K), 0.0, dcol.data(),
                  static_cast<int>(K));
        else
          gemm(true, false, w->value.data.data(), c.Co, static_cast<int>(K), n.grad.data(), c.Co,
               static_cast<int>(P), dcol.data(), 0.0);
        col2im_add(dcol.data(), c, x->grad.data(), tcol);
      }
    }
  });
}

std::pair<Var, Var> conv3d_pair(const Var& x0, const Var& x1, const Var& w, const Var& b,
                                const int stride[3], const int pad[3]) {
  require_map(x0, "conv3d_pair");
  if (!x0->value.same_shape(x1->value))
    throw std::invalid_argument("conv3d_pair: input shapes differ");
  if (w->value.ndim() != 5)
    throw std::invalid_argument("conv3d_pair: weight must be [Co,Ci,kd,kh,kw]");
  ConvDims c;
  c.Ci = x0->value.dim(0);
  c.D = x0->value.dim(1);
  c.H = x0->value.dim(2);
  c.W = x0->value.dim(3);
  c.Co = w->value.dim(0);
  c.kd = w->value.dim(2);
  c.kh = w->value.dim(3);
  c.kw = w->value.dim(4);
  if (w->value.dim(1) != c.Ci) throw std::invalid_argument("conv3d_pair: channel mismatch");
  c.sd = stride[0];
  c.sh = stride[1];
  c.sw = stride[2];
  c.pd = pad[0];
  c.ph = pad[1];
  c.pw = pad[2];
  c.OD = (c.D + 2 * c.pd - c.kd) / c.sd + 1;
  c.OH = (c.H + 2 * c.ph - c.kh) / c.sh + 1;
  c.OW = (c.W + 2 * c.pw - c.kw) / c.sw + 1;
  if (b->value.numel() != c.Co) throw std::invalid_argument("conv3d_pair: bias size mismatch");

  const bool pointwise = c.kd == 1 && c.kh == 1 && c.kw == 1 && c.sd == 1 && c.sh == 1 &&
                         c.sw == 1 && c.pd == 0 && c.ph == 0 && c.pw == 0;
  if (pointwise) return {conv3d(x0, w, b, stride, pad), conv3d(x1, w, b, stride, pad)};

  // Both inputs share one [2P, K] patch matrix so each weight pass (forward,
  // input gradient, weight gradient) streams the kernel once instead of twice.
  const int64_t P = c.P(), K = c.K();
  auto col = std::make_shared<DataVec>(static_cast<size_t>(2 * P * K));
  im2col(x0->value.data.data(), c, col->data(), true);
  im2col(x1->value.data.data(), c, col->data() + P * K, true);
  DataVec outT(static_cast<size_t>(2 * P) * c.Co);  // [2P, Co]
  gemm_ld(false, true, static_cast<int>(2 * P), c.Co, static_cast<int>(K), 1.0, col->data(),
          static_cast<int>(K), w->value.data.data(), static_cast<int>(K), 0.0, outT.data(), c.Co);
  Tensor out = Tensor::uninit({2, c.Co, c.OD, c.OH, c.OW});
  for (int v = 0; v < 2; ++v)
    for (int co = 0; co < c.Co; ++co)
      for (int64_t p = 0; p < P; ++p)
        out[(v * c.Co + co) * P + p] = outT[(v * P + p) * c.Co + co] + b->value[co];

  Var both = make_node(std::move(out), {x0, x1, w, b}, [x0, x1, w, b, c, col](Node& n) {
    const int64_t P = c.P(), K = c.K();
    // Incoming gradient rearranged to the [2P, Co] layout of the patch GEMMs.
    DataVec gT(static_cast<size_t>(2 * P) * c.Co);
    for (int v = 0; v < 2; ++v)
      for (int co = 0; co < c.Co; ++co)
        for (int64_t p = 0; p < P; ++p)
          gT[(v * P + p) * c.Co + co] = n.grad[(v * c.Co + co) * P + p];
    if (w->requires_grad) {
      const double bw = w->grad_uninit() ? 0.0 : 1.0;
      gemm_ld(true, false, c.Co, static_cast<int>(K), static_cast<int>(2 * P), 1.0, gT.data(),
              c.Co, col->data(), static_cast<int>(K), bw, w->grad.data(), static_cast<int>(K));
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int v = 0; v < 2; ++v)
        for (int co = 0; co < c.Co; ++co)
          for (int64_t p = 0; p < P; ++p) b->grad[co] += n.grad[(v * c.Co + co) * P + p];
    }
    if (x0->requires_grad || x1->requires_grad) {
      DataVec dcol(static_cast<size_t>(2 * P * K));
      gemm_ld(false, false, static_cast<int>(2 * P), static_cast<int>(K), c.Co, 1.0, gT.data(),
              c.Co, w->value.data.data(), static_cast<int>(K), 0.0, dcol.data(),
              static_cast<int>(K));
      if (x0->requires_grad) {
        x0->ensure_grad();
        col2im_add(dcol.data(), c, x0->grad.data(), true);
      }
      if (x1->requires_grad) {
        x1->ensure_grad();
        col2im_add(dcol.data() + P * K, c, x1->grad.data(), true);
      }
    }
  });

  const int64_t half = static_cast<int64_t>(c.Co) * P;
  auto take = [&](int v) {
    Tensor t = Tensor::uninit({c.Co, c.OD, c.OH, c.OW});
    std::copy(both->value.data.begin() + v * half, both->value.data.begin() + (v + 1) * half,
              t.data.begin());
    return make_node(std::move(t), {both}, [both, v, half](Node& nd) {
      both->ensure_grad();
      Eigen::Map<Eigen::ArrayXd>(both->grad.data() + v * half, half) +=
          Eigen::Map<const Eigen::ArrayXd>(nd.grad.data(), half);
    });
  };
  return {take(0), take(1)};
}

Var depthwise_conv3d(const Var& x, const Var& w, const Var& b) {
  require_map(x, "depthwise_conv3d");
  const int C = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  check_shape(w->value, {C, 3, 3, 3}, "depthwise_conv3d weight");
  if (b->value.numel() != C) throw std::invalid_argument("depthwise_conv3d: bias size mismatch");
  Tensor out = Tensor::uninit({C, D, H, W});
  // One pass per kernel offset with a contiguous inner span; dst accumulates.
  auto apply = [D, H, W](const double* src, double* dst, const double* ker, bool flip) {
    for (int zd = -1; zd <= 1; ++zd)
      for (int zh = -1; zh <= 1; ++zh)
        for (int zw = -1; zw <= 1; ++zw) {
          const double kv = ker[flip ? (1 - zd) * 9 + (1 - zh) * 3 + (1 - zw)
                                     : (zd + 1) * 9 + (zh + 1) * 3 + (zw + 1)];
          const int d0 = std::max(0, -zd), d1 = std::min(D, D - zd);
          const int h0 = std::max(0, -zh), h1 = std::min(H, H - zh);
          const int w0 = std::max(0, -zw), w1 = std::min(W, W - zw);
          for (int d = d0; d < d1; ++d)
            for (int h = h0; h < h1; ++h) {
              double* drow = dst + (static_cast<int64_t>(d) * H + h) * W;
              const double* srow =
                  src + (static_cast<int64_t>(d + zd) * H + (h + zh)) * W + zw;
              for (int iw = w0; iw < w1; ++iw) drow[iw] += kv * srow[iw];
            }
        }
  };
  const int64_t S = static_cast<int64_t>(D) * H * W;
  for (int ci = 0; ci < C; ++ci) {
    for (int64_t p = 0; p < S; ++p) out[ci * S + p] = b->value[ci];
    apply(x->value.data.data() + ci * S, out.data.data() + ci * S, w->value.data.data() + ci * 27,
          false);
  }
  return make_node(std::move(out), {x, w, b}, [x, w, b, C, D, H, W, S, apply](Node& n) {
    if (b->requires_grad) {
      b->ensure_grad();
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) b->grad[ci] += n.grad[ci * S + p];
    }
    if (x->requires_grad) {
      x->ensure_grad();
      // correlation backward = convolution with flipped kernel
      for (int ci = 0; ci < C; ++ci)
        apply(n.grad.data() + ci * S, x->grad.data() + ci * S, w->value.data.data() + ci * 27,
              true);
    }
    if (w->requires_grad) {
      w->ensure_grad();
      for (int ci = 0; ci < C; ++ci) {
        const double* xs = x->value.data.data() + ci * S;
        const double* gs = n.grad.data() + ci * S;
        double* ws = w->grad.data() + ci * 27;
        for (int zd = -1; zd <= 1; ++zd)
          for (int zh = -1; zh <= 1; ++zh)
            for (int zw = -1; zw <= 1; ++zw) {
              const int d0 = std::max(0, -zd), d1 = std::min(D, D - zd);
              const int h0 = std::max(0, -zh), h1 = std::min(H, H - zh);
              const int w0 = std::max(0, -zw), w1 = std::min(W, W - zw);
              double acc = 0.0;
              for (int d = d0; d < d1; ++d)
                for (int h = h0; h < h1; ++h) {
                  const double* grow = gs + (static_cast<int64_t>(d) * H + h) * W;
                  const double* xrow =
                      xs + (static_cast<int64_t>(d + zd) * H + (h + zh)) * W + zw;
                  for (int iw = w0; iw < w1; ++iw) acc += grow[iw] * xrow[iw];
                }
              ws[(zd + 1) * 9 + (zh + 1) * 3 + (zw + 1)] += acc;
            }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_map(x, "global_avg_pool");
  const int C = x->value.dim(0);
  const int64_t S = x->value.numel() / C;
  Tensor out({1, C});
  for (int ci = 0; ci < C; ++ci) {
    for (int64_t p = 0; p < S; ++p) out[ci] += x->value[ci * S + p];
    out[ci] /= static_cast<double>(S);
  }
  return make_node(std::move(out), {x}, [x, C, S](Node& n) {
    x->ensure_grad();
    for (int ci = 0; ci < C; ++ci) {
      const double g = n.grad[ci] / static_cast<double>(S);
      for (int64_t p = 0; p < S; ++p) x->grad[ci * S + p] += g;
    }
  });
}

Var avg_pool_halve(const Var& x) {
  require_map(x, "avg_pool_halve");
  const int C = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  auto half = [](int d, const char* ax) {
    if (d == 1) return 1;
    if (d % 2 != 0)
      throw std::invalid_argument(std::string("avg_pool_halve: odd ") + ax + " dimension");
    return d / 2;
  };
  const int OD = half(D, "depth"), OH = half(H, "height"), OW = half(W, "width");
  const int kd = D == 1 ? 1 : 2, kh = H == 1 ? 1 : 2, kw = W == 1 ? 1 : 2;
  const double inv = 1.0 / (kd * kh * kw);
  Tensor out = Tensor::uninit({C, OD, OH, OW});
  for (int ci = 0; ci < C; ++ci)
    for (int od = 0; od < OD; ++od)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int zd = 0; zd < kd; ++zd)
            for (int zh = 0; zh < kh; ++zh)
              for (int zw = 0; zw < kw; ++zw)
                acc += x->value[((static_cast<int64_t>(ci) * D + od * kd + zd) * H + oh * kh + zh) *
                                    W +
                                ow * kw + zw];
          out[((static_cast<int64_t>(ci) * OD + od) * OH + oh) * OW + ow] = acc * inv;
        }
  return make_node(std::move(out), {x}, [x, C, D, H, W, OD, OH, OW, kd, kh, kw, inv](Node& n) {
    x->ensure_grad();
    for (int ci = 0; ci < C; ++ci)
      for (int od = 0; od < OD; ++od)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            const double g = n.grad[((static_cast<int64_t>(ci) * OD + od) * OH + oh) * OW + ow] * inv;
            for (int zd = 0; zd < kd; ++zd)
              for (int zh = 0; zh < kh; ++zh)
                for (int zw = 0; zw < kw; ++zw)
                  x->grad[((static_cast<int64_t>(ci) * D + od * kd + zd) * H + oh * kh + zh) * W +
                          ow * kw + zw] += g;
          }
  });
}

Var scale_channels(const Var& x, const Var& gate) {
  require_map(x, "scale_channels");
  const int C = x->value.dim(0);
  if (gate->value.numel() != C) throw std::invalid_argument("scale_channels: gate size mismatch");
  const int64_t S = x->value.numel() / C;
  Tensor out = x->value;
  for (int ci = 0; ci < C; ++ci)
    for (int64_t p = 0; p < S; ++p) out[ci * S + p] *= gate->value[ci];
  return make_node(std::move(out), {x, gate}, [x, gate, C, S](Node& n) {
    if (x->requires_grad) {
      const bool fresh = x->grad_uninit();
      for (int ci = 0; ci < C; ++ci) {
        Eigen::Map<Eigen::ArrayXd> dx(x->grad.data() + ci * S, S);
        Eigen::Map<const Eigen::ArrayXd> g(n.grad.data() + ci * S, S);
        if (fresh)
          dx = g * gate->value[ci];
        else
          dx += g * gate->value[ci];
      }
    }
    if (gate->requires_grad) {
      gate->ensure_grad();
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) gate->grad[ci] += n.grad[ci * S + p] * x->value[ci * S + p];
    }
  });
}

Var channel_concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("channel_concat: empty input");
  const Shape& s0 = xs[0]->value.shape;
  int C = 0;
  for (const auto& x : xs) {
    require_map(x, "channel_concat");
    if (x->value.dim(1) != s0[1] || x->value.dim(2) != s0[2] || x->value.dim(3) != s0[3])
      throw std::invalid_argument("channel_concat: spatial shape mismatch");
    C += x->value.dim(0);
  }
  Tensor out({C, s0[1], s0[2], s0[3]});
  int64_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + off);
    off += x->value.numel();
  }
  return make_node(std::move(out), xs, [xs](Node& n) {
    int64_t off = 0;
    for (const auto& x : xs) {
      const auto len = x->value.numel();
      if (x->requires_grad) {
        const bool fresh = x->grad_uninit();
        Eigen::Map<Eigen::ArrayXd> dx(x->grad.data(), len);
        Eigen::Map<const Eigen::ArrayXd> g(n.grad.data() + off, len);
        if (fresh)
          dx = g;
        else
          dx += g;
      }
      off += len;
    }
  });
}

Var extract_patches(const Var& vol, int pd, int ph, int pw) {
  if (vol->value.ndim() != 3) throw std::invalid_argument("extract_patches: expected [D,H,W]");
  const int D = vol->value.dim(0), H = vol->value.dim(1), W = vol->value.dim(2);
  if (D % pd || H % ph || W % pw)
    throw std::invalid_argument("extract_patches: patch size " + std::to_string(ph) + "x" +
                                std::to_string(pw) + "x" + std::to_string(pd) +
                                " does not divide volume " + shape_str(vol->value.shape));
  const int gd = D / pd, gh = H / ph, gw = W / pw;
  const int N = gd * gh * gw, V = pd * ph * pw;
  // src voxel index for each (token, in-patch) slot
  auto src_idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N) * V);
  {
    int64_t slot = 0;
    for (int td = 0; td < gd; ++td)
      for (int th = 0; th < gh; ++th)
        for (int tw = 0; tw < gw; ++tw)
          for (int zd = 0; zd < pd; ++zd)
            for (int zh = 0; zh < ph; ++zh)
              for (int zw = 0; zw < pw; ++zw, ++slot)
                (*src_idx)[slot] =
                    (static_cast<int64_t>(td * pd + zd) * H + th * ph + zh) * W + tw * pw + zw;
  }
  Tensor out = Tensor::uninit({N, V});
  for (size_t i = 0; i < src_idx->size(); ++i) out[i] = vol->value[(*src_idx)[i]];
  return make_node(std::move(out), {vol}, [vol, src_idx](Node& n) {
    // Patches tile the volume, so every voxel appears exactly once.
    const bool fresh = vol->grad_uninit();
    if (fresh)
      for (size_t i = 0; i < src_idx->size(); ++i) vol->grad[(*src_idx)[i]] = n.grad[i];
    else
      for (size_t i = 0; i < src_idx->size(); ++i) vol->grad[(*src_idx)[i]] += n.grad[i];
  });
}

Var map_to_tokens(const Var& x) {
  require_map(x, "map_to_tokens");
  const int C = x->value.dim(0);
  const int64_t S = x->value.numel() / C;
  Tensor out = Tensor::uninit({static_cast<int>(S), C});
  for (int ci = 0; ci < C; ++ci)
    for (int64_t p = 0; p < S; ++p) out[p * C + ci] = x->value[ci * S + p];
  return make_node(std::move(out), {x}, [x, C, S](Node& n) {
    const bool fresh = x->grad_uninit();
    if (fresh)
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) x->grad[ci * S + p] = n.grad[p * C + ci];
    else
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) x->grad[ci * S + p] += n.grad[p * C + ci];
  });
}

Var tokens_to_map(const Var& t, int d, int h, int w) {
  require_2d(t, "tokens_to_map");
  const int N = t->value.dim(0), C = t->value.dim(1);
  if (N != d * h * w) throw std::invalid_argument("tokens_to_map: token count mismatch");
  Tensor out = Tensor::uninit({C, d, h, w});
  const int64_t S = static_cast<int64_t>(d) * h * w;
  for (int ci = 0; ci < C; ++ci)
    for (int64_t p = 0; p < S; ++p) out[ci * S + p] = t->value[p * C + ci];
  return make_node(std::move(out), {t}, [t, C, S](Node& n) {
    const bool fresh = t->grad_uninit();
    if (fresh)
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) t->grad[p * C + ci] = n.grad[ci * S + p];
    else
      for (int ci = 0; ci < C; ++ci)
        for (int64_t p = 0; p < S; ++p) t->grad[p * C + ci] += n.grad[ci * S + p];
  });
}

Var windowed_mha(const Var& q, const Var& k, const Var& v, int n_windows, int heads,
                 const std::vector<Tensor>* masks, std::vector<Tensor>* attn_out) {
  require_2d(q, "windowed_mha");
  require_2d(k, "windowed_mha");
  const int nq = q->value.dim(0), dim = q->value.dim(1);
  const int nk = k->value.dim(0);
  if (k->value.dim(1) != dim || !v->value.same_shape(k->value))
    throw std::invalid_argument("windowed_mha: k/v shapes incompatible with q");
  if (n_windows < 1 || nq % n_windows != 0 || nk % n_windows != 0)
    throw std::invalid_argument("windowed_mha: rows not divisible into windows");
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("windowed_mha: dim not divisible by heads");
  const int lq = nq / n_windows;
  const int lk = nk / n_windows;
  const int dh = dim / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  if (masks && static_cast<int>(masks->size()) != n_windows)
    throw std::invalid_argument("windowed_mha: mask count != window count");

  // Softmax outputs are kept for the backward pass.
  auto probs = std::make_shared<DataVec>();
  probs->resize(static_cast<size_t>(n_windows) * heads * lq * lk);
  Tensor out = Tensor::uninit({nq, dim});
  for (int w = 0; w < n_windows; ++w) {
    const Tensor* mask = nullptr;
    if (masks && (*masks)[w].numel() > 0) {
      if ((*masks)[w].shape != Shape{lq, lk})
        throw std::invalid_argument("windowed_mha: mask shape mismatch");
      mask = &(*masks)[w];
    }
    for (int h = 0; h < heads; ++h) {
      const double* qp = q->value.data.data() + static_cast<size_t>(w) * lq * dim + h * dh;
      const double* kp = k->value.data.data() + static_cast<size_t>(w) * lk * dim + h * dh;
      const double* vp = v->value.data.data() + static_cast<size_t>(w) * lk * dim + h * dh;
      // Scores go straight into the saved-probs slice and are softmaxed there.
      double* sp = probs->data() + (static_cast<size_t>(w) * heads + h) * lq * lk;
      gemm_ld(false, true, lq, lk, dh, scl, qp, dim, kp, dim, 0.0, sp, lk);
      {
        using RowArr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<RowArr> sm(sp, lq, lk);
        if (mask) sm += Eigen::Map<const RowArr>(mask->data.data(), lq, lk);
        // Subtract the row max in place first: exp() on a plain contiguous map
        // uses the packet path, while exp() of a broadcast expression does not.
        const Eigen::ArrayXd mx = sm.rowwise().maxCoeff();
        sm.colwise() -= mx;
        sm = sm.exp();
        sm.colwise() *= 1.0 / sm.rowwise().sum();
        // The packet exp clamps instead of underflowing, leaving masked
        // positions at ~1e-308; flush them to exact zero so later products
        // never touch denormals (which are extremely slow in hardware).
        sm = (sm > 1e-30).select(sm, 0.0);
      }
      if (attn_out) {
        Tensor t = Tensor::uninit({lq, lk});
        std::copy(sp, sp + static_cast<size_t>(lq) * lk, t.data.begin());
        attn_out->push_back(std::move(t));
      }
      double* op = out.data.data() + static_cast<size_t>(w) * lq * dim + h * dh;
      gemm_ld(false, false, lq, dh, lk, 1.0, sp, lk, vp, dim, 0.0, op, dim);
    }
  }

  return make_node(std::move(out), {q, k, v},
                   [q, k, v, probs, n_windows, heads, lq, lk, dh, dim, scl](Node& n) {
    // Each (window, head) pair owns a disjoint block of the q/k/v gradients,
    // so on a fresh buffer the per-block GEMMs can assign (beta 0) instead of
    // accumulate. Sequential grad_uninit() keeps aliased inputs correct.
    const double bq = q->grad_uninit() ? 0.0 : 1.0;
    const double bk = k->grad_uninit() ? 0.0 : 1.0;
    const double bv = v->grad_uninit() ? 0.0 : 1.0;
    DataVec da(static_cast<size_t>(lq) * lk);
    DataVec ds(static_cast<size_t>(lq) * lk);
    for (int w = 0; w < n_windows; ++w) {
      for (int h = 0; h < heads; ++h) {
        const size_t qoff = static_cast<size_t>(w) * lq * dim + static_cast<size_t>(h) * dh;
        const size_t koff = static_cast<size_t>(w) * lk * dim + static_cast<size_t>(h) * dh;
        const double* qp = q->value.data.data() + qoff;
        const double* kp = k->value.data.data() + koff;
        const double* vp = v->value.data.data() + koff;
        const double* gp = n.grad.data() + qoff;
        const double* a = probs->data() + (static_cast<size_t>(w) * heads + h) * lq * lk;
        // dA = dCtx * V^T
        gemm_ld(false, true, lq, lk, dh, 1.0, gp, dim, vp, dim, 0.0, da.data(), lk);
        // dS = A .* (dA - rowsum(A .* dA))
        {
          using RowArr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
          Eigen::Map<const RowArr> A(a, lq, lk);
          Eigen::Map<const RowArr> DA(da.data(), lq, lk);
          Eigen::Map<RowArr> DS(ds.data(), lq, lk);
          const Eigen::ArrayXd dots = (A * DA).rowwise().sum();
          DS = A * (DA.colwise() - dots);
        }
        gemm_ld(false, false, lq, dh, lk, scl, ds.data(), lk, kp, dim, bq,
                q->grad.data() + qoff, dim);
        gemm_ld(true, false, lk, dh, lq, scl, ds.data(), lk, qp, dim, bk,
                k->grad.data() + koff, dim);
        gemm_ld(true, false, lk, dh, lq, 1.0, a, lk, gp, dim, bv, v->grad.data() + koff, dim);
      }
    }
  });
}

Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels) {
  require_2d(logits, "cross_entropy_logits");
  const int n = logits->value.dim(0), k = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy_logits: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy_logits: label out of range");
  auto probs = std::make_shared<Tensor>(Shape{n, k});
  Tensor out({1});
  for (int i = 0; i < n; ++i) {
    double mx = logits->value[i * k];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits->value[i * k + j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      (*probs)[i * k + j] = std::exp(logits->value[i * k + j] - mx);
      sum += (*probs)[i * k + j];
    }
    for (int j = 0; j < k; ++j) (*probs)[i * k + j] /= sum;
    out[0] -= std::log((*probs)[i * k + labels[i]]);
  }
  out[0] /= n;
  auto labs = std::make_shared<std::vector<int>>(labels);
  return make_node(std::move(out), {logits}, [logits, probs, labs, n, k](Node& nd) {
    logits->ensure_grad();
    const double g = nd.grad[0] / n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        logits->grad[i * k + j] += g * ((*probs)[i * k + j] - (j == (*labs)[i] ? 1.0 : 0.0));
  });
}

}  // namespace dgsan::ag
