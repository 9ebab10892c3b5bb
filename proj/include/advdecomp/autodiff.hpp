#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records every primitive eagerly: the forward value is computed when
// the node is created, and the node keeps a rule that pushes its output
// gradient back into its inputs. Node ids are creation indices, so the tape is
// already topologically sorted and backward() is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "advdecomp/error.hpp"
#include "advdecomp/tensor.hpp"

namespace advdecomp {

using NodeId = std::size_t;

enum class Op {
  Leaf,
  Add,
  Sub,
  Scale,
  MatMul,
  Conv2d,
  BiasAdd,
  Relu,
  MaxPool2,
  Flatten,
  LogSoftmax,
  Nll,
  CrossEntropy,
  Mean,
  Sum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::BiasAdd: return "bias_add";
    case Op::Relu: return "relu";
    case Op::MaxPool2: return "maxpool2";
    case Op::Flatten: return "flatten";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Nll: return "nll";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
  }
  return "?";
}

enum class Padding { Valid, Same };
enum class Reduction { Mean, Sum };

namespace kernels {

// out[M,N] (+)= a[M,K] * b[K,N]
inline void matmul_acc(const float* a, const float* b, float* out, std::size_t M, std::size_t K,
                       std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    float* orow = out + i * N;
    const float* arow = a + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const float av = arow[k];
      if (av == 0.0f) continue;
      const float* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[M,K] (+)= g[M,N] * b[K,N]^T
inline void matmul_bt_acc(const float* g, const float* b, float* out, std::size_t M, std::size_t K,
                          std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const float* grow = g + i * N;
    float* orow = out + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const float* brow = b + k * N;
      float s = 0.0f;
      for (std::size_t j = 0; j < N; ++j) s += grow[j] * brow[j];
      orow[k] += s;
    }
  }
}

// out[K,N] (+)= a[M,K]^T * g[M,N]
inline void matmul_at_acc(const float* a, const float* g, float* out, std::size_t M, std::size_t K,
                          std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const float* arow = a + i * K;
    const float* grow = g + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const float av = arow[k];
      if (av == 0.0f) continue;
      float* orow = out + k * N;
      for (std::size_t j = 0; j < N; ++j) orow[j] += av * grow[j];
    }
  }
}

struct ConvGeom {
  std::size_t C, H, W, O, k, pad, Ho, Wo;
  std::size_t Q() const { return C * k * k; }
  std::size_t P() const { return Ho * Wo; }
};

// col[Q, P] for one example image x[C,H,W].
inline void im2col(const float* x, const ConvGeom& g, float* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        float* dst = col + ((c * g.k + ki) * g.k + kj) * g.P();
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) - pad;
          for (std::size_t oj = 0; oj < g.Wo; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) - pad;
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.H) &&
                                jj < static_cast<std::ptrdiff_t>(g.W);
            dst[oi * g.Wo + oj] =
                inside ? x[(c * g.H + static_cast<std::size_t>(ii)) * g.W + static_cast<std::size_t>(jj)]
                       : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const float* col, const ConvGeom& g, float* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const float* src = col + ((c * g.k + ki) * g.k + kj) * g.P();
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) - pad;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.H)) continue;
          for (std::size_t oj = 0; oj < g.Wo; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) - pad;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.W)) continue;
            dx[(c * g.H + static_cast<std::size_t>(ii)) * g.W + static_cast<std::size_t>(jj)] +=
                src[oi * g.Wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace kernels

class Graph {
public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  std::size_t size() const noexcept { return nodes_.size(); }

  NodeId leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  // Leaf that reads an externally owned tensor; the tensor must outlive the graph.
  NodeId leaf_ref(const Tensor& value, bool requires_grad = false) {
    Node n;
    n.op = Op::Leaf;
    n.external = &value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  const Tensor& value(NodeId id) const {
    const Node& n = node(id);
    return n.external ? *n.external : n.value;
  }
  const Shape& shape(NodeId id) const { return value(id).shape(); }
  Op op(NodeId id) const { return node(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }

  // Gradient of the last backward() loss w.r.t. node `id`; zeros if the node
  // did not receive any gradient.
  Tensor grad(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.empty() && !value(id).empty()) return Tensor(value(id).shape());
    return n.grad;
  }

  // ---- primitives --------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    require_same(Op::Add, a, b);
    Tensor out = value(a);
    const auto& bv = value(b).storage();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return push_op(Op::Add, {a, b}, std::move(out), [](Graph& g, NodeId self) {
      const Tensor& go = g.nodes_[self].grad;
      for (NodeId in : g.nodes_[self].inputs) g.accumulate(in, go.storage(), 1.0f);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    require_same(Op::Sub, a, b);
    Tensor out = value(a);
    const auto& bv = value(b).storage();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return push_op(Op::Sub, {a, b}, std::move(out), [](Graph& g, NodeId self) {
      const Tensor& go = g.nodes_[self].grad;
      g.accumulate(g.nodes_[self].inputs[0], go.storage(), 1.0f);
      g.accumulate(g.nodes_[self].inputs[1], go.storage(), -1.0f);
    });
  }

  NodeId scale(NodeId a, float s) {
    Tensor out = value(a);
    for (float& v : out.storage()) v *= s;
    return push_op(Op::Scale, {a}, std::move(out), [s](Graph& g, NodeId self) {
      g.accumulate(g.nodes_[self].inputs[0], g.nodes_[self].grad.storage(), s);
    });
  }

  // a[M,K] x b[K,N]
  NodeId matmul(NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail(Op::MatMul, sa, sb);
    const std::size_t M = sa[0], K = sa[1], N = sb[1];
    Tensor out({M, N});
    kernels::matmul_acc(value(a).raw(), value(b).raw(), out.raw(), M, K, N);
    return push_op(Op::MatMul, {a, b}, std::move(out), [M, K, N](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      const NodeId ib = g.nodes_[self].inputs[1];
      const float* go = g.nodes_[self].grad.raw();
      if (g.nodes_[ia].requires_grad)
        kernels::matmul_bt_acc(go, g.value(ib).raw(), g.grad_buffer(ia).raw(), M, K, N);
      if (g.nodes_[ib].requires_grad)
        kernels::matmul_at_acc(g.value(ia).raw(), go, g.grad_buffer(ib).raw(), M, K, N);
    });
  }

  // x[N,C,H,W] * w[O,C,k,k], stride 1. Same padding requires an odd kernel.
  NodeId conv2d(NodeId x, NodeId w, Padding padding) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3])
      shape_fail(Op::Conv2d, sx, sw);
    kernels::ConvGeom geo{};
    geo.C = sx[1];
    geo.H = sx[2];
    geo.W = sx[3];
    geo.O = sw[0];
    geo.k = sw[2];
    if (padding == Padding::Same) {
      if (geo.k % 2 == 0) shape_fail(Op::Conv2d, sx, sw);
      geo.pad = geo.k / 2;
      geo.Ho = geo.H;
      geo.Wo = geo.W;
    } else {
      if (geo.k > geo.H || geo.k > geo.W) shape_fail(Op::Conv2d, sx, sw);
      geo.pad = 0;
      geo.Ho = geo.H - geo.k + 1;
      geo.Wo = geo.W - geo.k + 1;
    }
    const std::size_t batch = sx[0];
    Tensor out({batch, geo.O, geo.Ho, geo.Wo});
    std::vector<float> col(geo.Q() * geo.P());
    const float* xv = value(x).raw();
    const float* wv = value(w).raw();
    const std::size_t in_stride = geo.C * geo.H * geo.W;
    const std::size_t out_stride = geo.O * geo.P();
    for (std::size_t n = 0; n < batch; ++n) {
      kernels::im2col(xv + n * in_stride, geo, col.data());
      kernels::matmul_acc(wv, col.data(), out.raw() + n * out_stride, geo.O, geo.Q(), geo.P());
    }
    return push_op(Op::Conv2d, {x, w}, std::move(out), [geo, batch](Graph& g, NodeId self) {
      const NodeId ix = g.nodes_[self].inputs[0];
      const NodeId iw = g.nodes_[self].inputs[1];
      const float* go = g.nodes_[self].grad.raw();
      const bool need_x = g.nodes_[ix].requires_grad;
      const bool need_w = g.nodes_[iw].requires_grad;
      const std::size_t in_stride = geo.C * geo.H * geo.W;
      const std::size_t out_stride = geo.O * geo.P();
      std::vector<float> col(geo.Q() * geo.P());
      const float* wv = g.value(iw).raw();
      for (std::size_t n = 0; n < batch; ++n) {
        const float* gon = go + n * out_stride;
        if (need_w) {
          kernels::im2col(g.value(ix).raw() + n * in_stride, geo, col.data());
          kernels::matmul_bt_acc(gon, col.data(), g.grad_buffer(iw).raw(), geo.O, geo.Q(), geo.P());
        }
        if (need_x) {
          std::fill(col.begin(), col.end(), 0.0f);
          kernels::matmul_at_acc(wv, gon, col.data(), geo.O, geo.Q(), geo.P());
          kernels::col2im_acc(col.data(), geo, g.grad_buffer(ix).raw() + n * in_stride);
        }
      }
    });
  }

  // Adds bias[C] along axis 1 of a [N,C,...] tensor.
  NodeId bias_add(NodeId a, NodeId bias) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(bias);
    if (sa.size() < 2 || sb.size() != 1 || sb[0] != sa[1]) shape_fail(Op::BiasAdd, sa, sb);
    const std::size_t N = sa[0], C = sa[1];
    const std::size_t inner = value(a).size() / (N * C == 0 ? 1 : N * C);
    Tensor out = value(a);
    const float* bv = value(bias).raw();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        float* p = out.raw() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
      }
    return push_op(Op::BiasAdd, {a, bias}, std::move(out), [N, C, inner](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      const NodeId ib = g.nodes_[self].inputs[1];
      const Tensor& go = g.nodes_[self].grad;
      g.accumulate(ia, go.storage(), 1.0f);
      if (g.nodes_[ib].requires_grad) {
        float* gb = g.grad_buffer(ib).raw();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const float* p = go.raw() + (n * C + c) * inner;
            float s = 0.0f;
            for (std::size_t i = 0; i < inner; ++i) s += p[i];
            gb[c] += s;
          }
      }
    });
  }

  // Subgradient at 0 is 0.
  NodeId relu(NodeId a) {
    Tensor out = value(a);
    for (float& v : out.storage()) v = v > 0.0f ? v : 0.0f;
    return push_op(Op::Relu, {a}, std::move(out), [](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      if (!g.nodes_[ia].requires_grad) return;
      const auto& x = g.value(ia).storage();
      const auto& go = g.nodes_[self].grad.storage();
      auto& gi = g.grad_buffer(ia).storage();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > 0.0f) gi[i] += go[i];
    });
  }

  // 2x2 max pool with stride 2; odd trailing rows/columns are dropped. Ties go
  // to the first element in row-major window order.
  NodeId maxpool2(NodeId a) {
    const Shape& sa = shape(a);
    if (sa.size() != 4 || sa[2] < 2 || sa[3] < 2) shape_fail(Op::MaxPool2, sa, {2, 2});
    const std::size_t N = sa[0], C = sa[1], H = sa[2], W = sa[3];
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    std::vector<std::uint32_t> argmax(out.size());
    const float* x = value(a).raw();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const float* plane = x + nc * H * W;
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          std::size_t best = (2 * i) * W + 2 * j;
          const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
          for (std::size_t c : cand)
            if (plane[c] > plane[best]) best = c;
          const std::size_t o = (nc * Ho + i) * Wo + j;
          out[o] = plane[best];
          argmax[o] = static_cast<std::uint32_t>(nc * H * W + best);
        }
    }
    return push_op(Op::MaxPool2, {a}, std::move(out),
                   [argmax = std::move(argmax)](Graph& g, NodeId self) {
                     const NodeId ia = g.nodes_[self].inputs[0];
                     if (!g.nodes_[ia].requires_grad) return;
                     const auto& go = g.nodes_[self].grad.storage();
                     auto& gi = g.grad_buffer(ia).storage();
                     for (std::size_t o = 0; o < go.size(); ++o) gi[argmax[o]] += go[o];
                   });
  }

  NodeId flatten(NodeId a) {
    const Shape& sa = shape(a);
    if (sa.empty()) shape_fail(Op::Flatten, sa, {});
    const std::size_t n = sa[0];
    Tensor out = value(a).reshaped({n, n == 0 ? 0 : value(a).size() / n});
    return push_op(Op::Flatten, {a}, std::move(out), [](Graph& g, NodeId self) {
      g.accumulate(g.nodes_[self].inputs[0], g.nodes_[self].grad.storage(), 1.0f);
    });
  }

  NodeId log_softmax(NodeId a) {
    const Shape& sa = shape(a);
    if (sa.size() != 2) shape_fail(Op::LogSoftmax, sa, {});
    const std::size_t N = sa[0], K = sa[1];
    Tensor out = value(a);
    for (std::size_t n = 0; n < N; ++n) {
      float* row = out.raw() + n * K;
      const float lse = log_sum_exp(row, K);
      for (std::size_t k = 0; k < K; ++k) row[k] -= lse;
    }
    return push_op(Op::LogSoftmax, {a}, std::move(out), [N, K](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      if (!g.nodes_[ia].requires_grad) return;
      const float* y = g.nodes_[self].value.raw();
      const float* go = g.nodes_[self].grad.raw();
      float* gi = g.grad_buffer(ia).raw();
      for (std::size_t n = 0; n < N; ++n) {
        float s = 0.0f;
        for (std::size_t k = 0; k < K; ++k) s += go[n * K + k];
        for (std::size_t k = 0; k < K; ++k) gi[n * K + k] += go[n * K + k] - std::exp(y[n * K + k]) * s;
      }
    });
  }

  // Negative log-likelihood of log-probabilities logp[N,K]; output shape [1].
  NodeId nll(NodeId logp, std::span<const int> labels, Reduction reduction = Reduction::Mean) {
    const Shape& s = shape(logp);
    check_labels(Op::Nll, s, labels);
    const std::size_t N = s[0], K = s[1];
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) total -= value(logp)[n * K + static_cast<std::size_t>(labels[n])];
    const float denom = reduction == Reduction::Mean && N > 0 ? static_cast<float>(N) : 1.0f;
    Tensor out({1}, static_cast<float>(total / denom));
    std::vector<int> lab(labels.begin(), labels.end());
    return push_op(Op::Nll, {logp}, std::move(out),
                   [lab = std::move(lab), K, denom](Graph& g, NodeId self) {
                     const NodeId ia = g.nodes_[self].inputs[0];
                     if (!g.nodes_[ia].requires_grad) return;
                     const float go = g.nodes_[self].grad[0] / denom;
                     float* gi = g.grad_buffer(ia).raw();
                     for (std::size_t n = 0; n < lab.size(); ++n) gi[n * K + static_cast<std::size_t>(lab[n])] -= go;
                   });
  }

  // Fused log-softmax + NLL on logits[N,K]; output shape [1].
  NodeId cross_entropy(NodeId logits, std::span<const int> labels, Reduction reduction = Reduction::Mean) {
    const Shape& s = shape(logits);
    check_labels(Op::CrossEntropy, s, labels);
    const std::size_t N = s[0], K = s[1];
    std::vector<float> prob(value(logits).storage());
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      float* row = prob.data() + n * K;
      const float lse = log_sum_exp(row, K);
      total += static_cast<double>(lse) - row[static_cast<std::size_t>(labels[n])];
      for (std::size_t k = 0; k < K; ++k) row[k] = std::exp(row[k] - lse);
    }
    const float denom = reduction == Reduction::Mean && N > 0 ? static_cast<float>(N) : 1.0f;
    Tensor out({1}, static_cast<float>(total / denom));
    std::vector<int> lab(labels.begin(), labels.end());
    return push_op(Op::CrossEntropy, {logits}, std::move(out),
                   [prob = std::move(prob), lab = std::move(lab), K, denom](Graph& g, NodeId self) {
                     const NodeId ia = g.nodes_[self].inputs[0];
                     if (!g.nodes_[ia].requires_grad) return;
                     const float go = g.nodes_[self].grad[0] / denom;
                     float* gi = g.grad_buffer(ia).raw();
                     for (std::size_t n = 0; n < lab.size(); ++n)
                       for (std::size_t k = 0; k < K; ++k) {
                         const float onehot = static_cast<std::size_t>(lab[n]) == k ? 1.0f : 0.0f;
                         gi[n * K + k] += go * (prob[n * K + k] - onehot);
                       }
                   });
  }

  NodeId mean(NodeId a) {
    const auto& v = value(a).storage();
    double s = 0.0;
    for (float x : v) s += x;
    const float inv = v.empty() ? 0.0f : 1.0f / static_cast<float>(v.size());
    Tensor out({1}, v.empty() ? 0.0f : static_cast<float>(s / static_cast<double>(v.size())));
    return push_op(Op::Mean, {a}, std::move(out), [inv](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      if (!g.nodes_[ia].requires_grad) return;
      const float go = g.nodes_[self].grad[0] * inv;
      for (float& x : g.grad_buffer(ia).storage()) x += go;
    });
  }

  NodeId sum(NodeId a) {
    double s = 0.0;
    for (float x : value(a).storage()) s += x;
    Tensor out({1}, static_cast<float>(s));
    return push_op(Op::Sum, {a}, std::move(out), [](Graph& g, NodeId self) {
      const NodeId ia = g.nodes_[self].inputs[0];
      if (!g.nodes_[ia].requires_grad) return;
      const float go = g.nodes_[self].grad[0];
      for (float& x : g.grad_buffer(ia).storage()) x += go;
    });
  }

  // Reverse sweep from a scalar loss node. Gradients from any earlier sweep
  // are discarded.
  void backward(NodeId loss) {
    if (nodes_.empty()) throw Error("autodiff", "backward called before any forward pass was recorded");
    if (loss >= nodes_.size()) throw Error("autodiff", detail::concat("loss node ", loss, " does not exist"));
    if (shape(loss) != Shape{1})
      throw ShapeError("autodiff", detail::concat("loss node must have shape [1], got ", shape_str(shape(loss))));
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss].grad = Tensor({1}, 1.0f);
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.rule) continue;
      n.rule(*this, id);
    }
  }

private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Graph&, NodeId)> rule;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw Error("autodiff", detail::concat("unknown node id ", id));
    return nodes_[id];
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push_op(Op op, std::vector<NodeId> inputs, Tensor out, std::function<void(Graph&, NodeId)> rule) {
    Node n;
    n.op = op;
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId i) { return nodes_[i].requires_grad; });
    n.inputs = std::move(inputs);
    n.value = std::move(out);
    if (n.requires_grad) n.rule = std::move(rule);
    return push(std::move(n));
  }

  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  void accumulate(NodeId id, const std::vector<float>& g, float s) {
    if (!nodes_[id].requires_grad) return;
    auto& dst = grad_buffer(id).storage();
    if (s == 1.0f) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * g[i];
    }
  }

  static float log_sum_exp(const float* row, std::size_t K) {
    float m = -std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < K; ++k) m = std::max(m, row[k]);
    float s = 0.0f;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    return m + std::log(s);
  }

  [[noreturn]] static void shape_fail(Op op, const Shape& a, const Shape& b) {
    throw ShapeError("autodiff", detail::concat(op_name(op), ": incompatible shapes ", shape_str(a), " and ",
                                                shape_str(b)));
  }

  void require_same(Op op, NodeId a, NodeId b) const {
    if (shape(a) != shape(b)) shape_fail(op, shape(a), shape(b));
  }

  static void check_labels(Op op, const Shape& s, std::span<const int> labels) {
    if (s.size() != 2 || s[0] != labels.size())
      shape_fail(op, s, Shape{labels.size()});
    for (std::size_t n = 0; n < labels.size(); ++n)
      if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= s[1])
        throw Error("autodiff", detail::concat(op_name(op), ": label ", labels[n], " at index ", n,
                                               " outside [0, ", s[1], ")"));
  }

  std::deque<Node> nodes_;  // stable references to values across node creation
};

}  // namespace advdecomp
