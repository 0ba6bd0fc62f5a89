#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "nsl/convolution.hpp"
#include "nsl/dual.hpp"
#include "nsl/tensor.hpp"

namespace nsl {

/// Column/row normalization mode of the hyperspherical operators.
enum class SphereNorm {
    Both,   // w.x / ((|w|+eps)(|x|+eps)) - bounded in [-1,1]
    XOnly,  // w.x / (|x|+eps)
    None,   // plain inner product (the unstable baseline predictor)
};

template <class S>
class GraphT;

/// Reverse-mode tape. Nodes are appended in execution order (so the sequence
/// is topologically sorted by construction); each node carries its cached
/// output and a closure that scatters the node's output gradient onto its
/// inputs. The backward sweep walks nodes in reverse creation order and each
/// closure accumulates into its inputs left-to-right, which fixes the
/// accumulation order and makes repeated passes bit-identical.
template <class S>
class GraphT {
public:
    using Backward = std::function<void(GraphT&, int)>;

    struct Node {
        const char* op;
        std::vector<int> inputs;
        TensorT<S> value;
        bool trainable = false;
        Backward backward;
    };

    /// Constant leaf.
    int value(TensorT<S> v) { return push("value", {}, std::move(v), false, nullptr); }

    /// Trainable leaf.
    int param(TensorT<S> v) { return push("param", {}, std::move(v), true, nullptr); }

    int push(const char* op, std::vector<int> inputs, TensorT<S> value, bool trainable,
             Backward backward) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), trainable,
                              std::move(backward)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const TensorT<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Reverse sweep from a scalar loss node. Gradients of all touched nodes
    /// are retained and can be read with grad(); trainable nodes that the
    /// loss does not reach report zero gradients.
    void backward(int loss) {
        if (loss < 0 || loss >= size()) throw ArgumentError("backward: invalid loss node id");
        if (!val(loss).is_scalar())
            throw ContractError("backward requires a scalar loss node, got shape " +
                                shape_str(val(loss).shape()));
        grads_.assign(nodes_.size(), TensorT<S>());
        seen_.assign(nodes_.size(), 0);
        grad_mut(loss)[0] = S(1);
        for (int id = loss; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (!seen_[static_cast<std::size_t>(id)] || !n.backward) continue;
            n.backward(*this, id);
        }
    }

    /// Gradient of the last backward() loss w.r.t. node id (zeros if untouched).
    const TensorT<S>& grad(int id) {
        auto& slot = grads_[static_cast<std::size_t>(id)];
        if (!seen_[static_cast<std::size_t>(id)]) {
            slot = TensorT<S>(val(id).shape());
            seen_[static_cast<std::size_t>(id)] = 1;
        }
        return slot;
    }

    /// Mutable gradient accumulator (allocates zeros on first touch).
    TensorT<S>& grad_mut(int id) {
        auto& slot = grads_[static_cast<std::size_t>(id)];
        if (!seen_[static_cast<std::size_t>(id)]) {
            slot = TensorT<S>(val(id).shape());
            seen_[static_cast<std::size_t>(id)] = 1;
        }
        return slot;
    }

    /// Map node id -> gradient for every trainable node.
    std::map<int, TensorT<S>> trainable_gradients() {
        std::map<int, TensorT<S>> out;
        for (int id = 0; id < size(); ++id)
            if (nodes_[static_cast<std::size_t>(id)].trainable) out.emplace(id, grad(id));
        return out;
    }

private:
    std::vector<Node> nodes_;
    std::vector<TensorT<S>> grads_;
    std::vector<char> seen_;
};

using Graph = GraphT<double>;

// ---------------------------------------------------------------------------
// Dense kernels shared by forward and backward implementations.
// ---------------------------------------------------------------------------

/// C(m x n) =/+= op(A) . op(B). Eigen handles the double instantiation; the
/// generic loop covers the dual-number pass.
template <class S>
void gemm(const S* A, int am, int an, bool tA, const S* B, int bm, int bn, bool tB, S* C,
          bool accumulate) {
    const int m = tA ? an : am;
    const int k = tA ? am : an;
    const int kb = tB ? bn : bm;
    const int n = tB ? bm : bn;
    if (k != kb)
        throw ShapeError("matmul inner dimensions disagree: [" + std::to_string(am) + "x" +
                         std::to_string(an) + (tA ? "]^T" : "]") + " . [" + std::to_string(bm) +
                         "x" + std::to_string(bn) + (tB ? "]^T" : "]"));
    if constexpr (std::is_same_v<S, double>) {
        Eigen::Map<const RowMatrixXd> Am(A, am, an);
        Eigen::Map<const RowMatrixXd> Bm(B, bm, bn);
        Eigen::Map<RowMatrixXd> Cm(C, m, n);
        auto assign = [&](const auto& expr) {
            if (accumulate)
                Cm.noalias() += expr;
            else
                Cm.noalias() = expr;
        };
        if (!tA && !tB)
            assign(Am * Bm);
        else if (tA && !tB)
            assign(Am.transpose() * Bm);
        else if (!tA && tB)
            assign(Am * Bm.transpose());
        else
            assign(Am.transpose() * Bm.transpose());
    } else {
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                S acc = accumulate ? C[i * n + j] : S(0);
                for (int kk = 0; kk < k; ++kk) {
                    const S a = tA ? A[kk * an + i] : A[i * an + kk];
                    const S b = tB ? B[j * bn + kk] : B[kk * bn + j];
                    acc += a * b;
                }
                C[i * n + j] = acc;
            }
        }
    }
}

template <class S>
TensorT<S> matmul_values(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects 2-D tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
    TensorT<S> c({a.dim(0), b.dim(1)});
    gemm(a.data(), a.dim(0), a.dim(1), false, b.data(), b.dim(0), b.dim(1), false, c.data(),
         false);
    return c;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.
// ---------------------------------------------------------------------------

template <class S>
int add(GraphT<S>& g, int a, int b) {
    TensorT<S> out = g.val(a);
    out += g.val(b);
    return g.push("add", {a, b}, std::move(out), false, [a, b](GraphT<S>& gr, int self) {
        gr.grad_mut(a) += gr.grad(self);
        gr.grad_mut(b) += gr.grad(self);
    });
}

template <class S>
int sub(GraphT<S>& g, int a, int b) {
    TensorT<S> out = g.val(a);
    out -= g.val(b);
    return g.push("sub", {a, b}, std::move(out), false, [a, b](GraphT<S>& gr, int self) {
        gr.grad_mut(a) += gr.grad(self);
        gr.grad_mut(b) -= gr.grad(self);
    });
}

template <class S>
int mul(GraphT<S>& g, int a, int b) {
    const auto& va = g.val(a);
    const auto& vb = g.val(b);
    if (!va.same_shape(vb))
        throw ShapeError("elementwise mul shape mismatch: " + shape_str(va.shape()) + " vs " +
                         shape_str(vb.shape()));
    TensorT<S> out(va.shape());
    for (int i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    return g.push("mul", {a, b}, std::move(out), false, [a, b](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        const auto& va2 = gr.val(a);
        const auto& vb2 = gr.val(b);
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * vb2[i];
        auto& gb = gr.grad_mut(b);
        for (int i = 0; i < go.size(); ++i) gb[i] += go[i] * va2[i];
    });
}

template <class S>
int scale(GraphT<S>& g, int a, double c) {
    TensorT<S> out = g.val(a);
    out *= S(c);
    return g.push("scale", {a}, std::move(out), false, [a, c](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < go.size(); ++i) ga[i] += go[i] * S(c);
    });
}

template <class S>
int sum(GraphT<S>& g, int a) {
    S acc(0);
    for (int i = 0; i < g.val(a).size(); ++i) acc += g.val(a)[i];
    return g.push("sum", {a}, TensorT<S>::scalar(acc), false, [a](GraphT<S>& gr, int self) {
        const S go = gr.grad(self)[0];
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < ga.size(); ++i) ga[i] += go;
    });
}

template <class S>
int mean(GraphT<S>& g, int a) {
    const int n = g.val(a).size();
    S acc(0);
    for (int i = 0; i < n; ++i) acc += g.val(a)[i];
    acc /= S(static_cast<double>(n));
    return g.push("mean", {a}, TensorT<S>::scalar(acc), false, [a, n](GraphT<S>& gr, int self) {
        const S go = gr.grad(self)[0] / S(static_cast<double>(n));
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < ga.size(); ++i) ga[i] += go;
    });
}

/// Sum of absolute values; subgradient at exact zeros is 0.
template <class S>
int abs_sum(GraphT<S>& g, int a) {
    using nsl::abs;
    using std::abs;
    S acc(0);
    for (int i = 0; i < g.val(a).size(); ++i) acc += abs(g.val(a)[i]);
    return g.push("abs_sum", {a}, TensorT<S>::scalar(acc), false, [a](GraphT<S>& gr, int self) {
        const S go = gr.grad(self)[0];
        const auto& va = gr.val(a);
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < ga.size(); ++i) {
            if (va[i] > S(0))
                ga[i] += go;
            else if (va[i] < S(0))
                ga[i] -= go;
        }
    });
}

template <class S>
int relu(GraphT<S>& g, int a) {
    TensorT<S> out = g.val(a);
    for (int i = 0; i < out.size(); ++i)
        if (out[i] < S(0)) out[i] = S(0);
    return g.push("relu", {a}, std::move(out), false, [a](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        const auto& va = gr.val(a);
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < go.size(); ++i)
            if (va[i] > S(0)) ga[i] += go[i];
    });
}

template <class S>
int reshape(GraphT<S>& g, int a, std::vector<int> shape) {
    return g.push("reshape", {a}, g.val(a).reshaped(std::move(shape)), false,
                  [a](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      auto& ga = gr.grad_mut(a);
                      for (int i = 0; i < go.size(); ++i) ga[i] += go[i];
                  });
}

template <class S>
int transpose(GraphT<S>& g, int a) {
    const auto& va = g.val(a);
    if (va.rank() != 2)
        throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(va.shape()));
    const int m = va.dim(0), n = va.dim(1);
    TensorT<S> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(j, i) = va(i, j);
    return g.push("transpose", {a}, std::move(out), false, [a, m, n](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        auto& ga = gr.grad_mut(a);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga(i, j) += go(j, i);
    });
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

template <class S>
int matmul(GraphT<S>& g, int a, int b) {
    TensorT<S> out = matmul_values(g.val(a), g.val(b));
    return g.push("matmul", {a, b}, std::move(out), false, [a, b](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        const auto& va = gr.val(a);
        const auto& vb = gr.val(b);
        gemm(go.data(), go.dim(0), go.dim(1), false, vb.data(), vb.dim(0), vb.dim(1), true,
             gr.grad_mut(a).data(), true);
        gemm(va.data(), va.dim(0), va.dim(1), true, go.data(), go.dim(0), go.dim(1), false,
             gr.grad_mut(b).data(), true);
    });
}

/// W[KxD] applied to every sample of cols[BxDxP] -> [BxKxP].
template <class S>
int matmul_cols(GraphT<S>& g, int w, int cols) {
    const auto& vw = g.val(w);
    const auto& vc = g.val(cols);
    if (vw.rank() != 2 || vc.rank() != 3 || vw.dim(1) != vc.dim(1))
        throw ShapeError("matmul_cols shape mismatch: " + shape_str(vw.shape()) + " . " +
                         shape_str(vc.shape()));
    const int B = vc.dim(0), K = vw.dim(0), D = vw.dim(1), P = vc.dim(2);
    TensorT<S> out({B, K, P});
    for (int b = 0; b < B; ++b)
        gemm(vw.data(), K, D, false, vc.data() + static_cast<std::ptrdiff_t>(b) * D * P, D, P,
             false, out.data() + static_cast<std::ptrdiff_t>(b) * K * P, false);
    return g.push("matmul_cols", {w, cols}, std::move(out),
                  false, [w, cols, B, K, D, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vw2 = gr.val(w);
                      const auto& vc2 = gr.val(cols);
                      auto& gw = gr.grad_mut(w);
                      for (int b = 0; b < B; ++b)
                          gemm(go.data() + static_cast<std::ptrdiff_t>(b) * K * P, K, P, false,
                               vc2.data() + static_cast<std::ptrdiff_t>(b) * D * P, D, P, true,
                               gw.data(), true);
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b)
                          gemm(vw2.data(), K, D, true,
                               go.data() + static_cast<std::ptrdiff_t>(b) * K * P, K, P, false,
                               gc.data() + static_cast<std::ptrdiff_t>(b) * D * P, true);
                  });
}

// ---------------------------------------------------------------------------
// Convolution patches.
// ---------------------------------------------------------------------------

/// Batched im2col: x[BxCxHxW] -> [B x patch_rows x positions].
template <class S>
int im2col_node(GraphT<S>& g, int x, const ConvGeom& geom) {
    const auto& vx = g.val(x);
    if (vx.rank() != 4 || vx.dim(1) != geom.channels || vx.dim(2) != geom.in_h ||
        vx.dim(3) != geom.in_w)
        throw ShapeError("im2col input " + shape_str(vx.shape()) + " does not match geometry");
    const int B = vx.dim(0), R = geom.patch_rows(), P = geom.positions();
    const int plane = geom.channels * geom.in_h * geom.in_w;
    TensorT<S> out({B, R, P});
    for (int b = 0; b < B; ++b)
        im2col_sample(vx.data() + static_cast<std::ptrdiff_t>(b) * plane, geom,
                      out.data() + static_cast<std::ptrdiff_t>(b) * R * P);
    return g.push("im2col", {x}, std::move(out), false,
                  [x, geom, B, R, P, plane](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (int b = 0; b < B; ++b)
                          col2im_sample_acc(go.data() + static_cast<std::ptrdiff_t>(b) * R * P,
                                            geom, gx.data() + static_cast<std::ptrdiff_t>(b) * plane);
                  });
}

// ---------------------------------------------------------------------------
// Similarity application (block-diagonal structure, never materialized).
// ---------------------------------------------------------------------------

/// Diagonal block shared across channels and samples:
/// out[b, c*HV+i, p] = d[i] * cols[b, c*HV+i, p].
template <class S>
int colscale_blocks(GraphT<S>& g, int cols, int d, int channels) {
    const auto& vc = g.val(cols);
    const auto& vd = g.val(d);
    const int HV = vd.size();
    if (vc.rank() != 3 || vc.dim(1) != channels * HV)
        throw ShapeError("colscale_blocks: cols " + shape_str(vc.shape()) + " vs diag length " +
                         std::to_string(HV) + " x " + std::to_string(channels) + " channels");
    const int B = vc.dim(0), R = vc.dim(1), P = vc.dim(2);
    TensorT<S> out(vc.shape());
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r) {
            const S s = vd[r % HV];
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
            for (int p = 0; p < P; ++p) out[static_cast<int>(base) + p] = s * vc[static_cast<int>(base) + p];
        }
    return g.push("colscale_blocks", {cols, d}, std::move(out), false,
                  [cols, d, HV, B, R, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vc2 = gr.val(cols);
                      const auto& vd2 = gr.val(d);
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r) {
                              const S s = vd2[r % HV];
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
                              for (int p = 0; p < P; ++p)
                                  gc[static_cast<int>(base) + p] += s * go[static_cast<int>(base) + p];
                          }
                      auto& gd = gr.grad_mut(d);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r) {
                              S acc(0);
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
                              for (int p = 0; p < P; ++p)
                                  acc += go[static_cast<int>(base) + p] * vc2[static_cast<int>(base) + p];
                              gd[r % HV] += acc;
                          }
                  });
}

/// Per-sample diagonal blocks: d[BxHV], one diagonal per sample (dynamic DNS).
template <class S>
int colscale_blocks_dyn(GraphT<S>& g, int cols, int d, int channels) {
    const auto& vc = g.val(cols);
    const auto& vd = g.val(d);
    if (vc.rank() != 3 || vd.rank() != 2 || vc.dim(0) != vd.dim(0) ||
        vc.dim(1) != channels * vd.dim(1))
        throw ShapeError("colscale_blocks_dyn: cols " + shape_str(vc.shape()) + " vs diag " +
                         shape_str(vd.shape()));
    const int B = vc.dim(0), R = vc.dim(1), P = vc.dim(2), HV = vd.dim(1);
    TensorT<S> out(vc.shape());
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r) {
            const S s = vd(b, r % HV);
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
            for (int p = 0; p < P; ++p) out[static_cast<int>(base) + p] = s * vc[static_cast<int>(base) + p];
        }
    return g.push("colscale_blocks_dyn", {cols, d}, std::move(out), false,
                  [cols, d, HV, B, R, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vc2 = gr.val(cols);
                      const auto& vd2 = gr.val(d);
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r) {
                              const S s = vd2(b, r % HV);
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
                              for (int p = 0; p < P; ++p)
                                  gc[static_cast<int>(base) + p] += s * go[static_cast<int>(base) + p];
                          }
                      auto& gd = gr.grad_mut(d);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r) {
                              S acc(0);
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * R + r) * P;
                              for (int p = 0; p < P; ++p)
                                  acc += go[static_cast<int>(base) + p] * vc2[static_cast<int>(base) + p];
                              gd(b, r % HV) += acc;
                          }
                  });
}

/// Dense block shared across channels and samples:
/// out segment (b,c) = Ms . cols segment (b,c), Ms is HVxHV.
template <class S>
int block_matmul(GraphT<S>& g, int ms, int cols, int channels) {
    const auto& vm = g.val(ms);
    const auto& vc = g.val(cols);
    if (vm.rank() != 2 || vm.dim(0) != vm.dim(1))
        throw ShapeError("block_matmul: block must be square, got " + shape_str(vm.shape()));
    const int HV = vm.dim(0);
    if (vc.rank() != 3 || vc.dim(1) != channels * HV)
        throw ShapeError("block_matmul: cols " + shape_str(vc.shape()) + " vs block " +
                         shape_str(vm.shape()) + " x " + std::to_string(channels) + " channels");
    const int B = vc.dim(0), P = vc.dim(2);
    TensorT<S> out(vc.shape());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < channels; ++c) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
            gemm(vm.data(), HV, HV, false, vc.data() + off, HV, P, false, out.data() + off, false);
        }
    return g.push("block_matmul", {ms, cols}, std::move(out), false,
                  [ms, cols, channels, HV, B, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vm2 = gr.val(ms);
                      const auto& vc2 = gr.val(cols);
                      auto& gm = gr.grad_mut(ms);
                      for (int b = 0; b < B; ++b)
                          for (int c = 0; c < channels; ++c) {
                              const std::ptrdiff_t off =
                                  (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
                              gemm(go.data() + off, HV, P, false, vc2.data() + off, HV, P, true,
                                   gm.data(), true);
                          }
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b)
                          for (int c = 0; c < channels; ++c) {
                              const std::ptrdiff_t off =
                                  (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
                              gemm(vm2.data(), HV, HV, true, go.data() + off, HV, P, false,
                                   gc.data() + off, true);
                          }
                  });
}

/// Per-position diagonal blocks for per-patch dynamic DNS:
/// out[b, ch*HV+i, p] = d[b, i, p] * cols[b, ch*HV+i, p].
template <class S>
int colscale_blocks_per_patch(GraphT<S>& g, int cols, int d, int channels) {
    const auto& vc = g.val(cols);
    const auto& vd = g.val(d);
    if (vc.rank() != 3 || vd.rank() != 3 || vc.dim(0) != vd.dim(0) || vc.dim(2) != vd.dim(2) ||
        vc.dim(1) != channels * vd.dim(1))
        throw ShapeError("colscale_blocks_per_patch: cols " + shape_str(vc.shape()) + " vs d " +
                         shape_str(vd.shape()));
    const int B = vc.dim(0), R = vc.dim(1), P = vc.dim(2), HV = vd.dim(1);
    TensorT<S> out(vc.shape());
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r)
            for (int p = 0; p < P; ++p) out(b, r, p) = vd(b, r % HV, p) * vc(b, r, p);
    return g.push("colscale_blocks_per_patch", {cols, d}, std::move(out), false,
                  [cols, d, HV, B, R, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vc2 = gr.val(cols);
                      const auto& vd2 = gr.val(d);
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r)
                              for (int p = 0; p < P; ++p)
                                  gc(b, r, p) += vd2(b, r % HV, p) * go(b, r, p);
                      auto& gd = gr.grad_mut(d);
                      for (int b = 0; b < B; ++b)
                          for (int r = 0; r < R; ++r)
                              for (int p = 0; p < P; ++p)
                                  gd(b, r % HV, p) += go(b, r, p) * vc2(b, r, p);
                  });
}

/// Per-sample dense blocks: ms[BxHVxHV] (dynamic UNS).
template <class S>
int block_matmul_dyn(GraphT<S>& g, int ms, int cols, int channels) {
    const auto& vm = g.val(ms);
    const auto& vc = g.val(cols);
    if (vm.rank() != 3 || vm.dim(1) != vm.dim(2) || vc.rank() != 3 || vm.dim(0) != vc.dim(0) ||
        vc.dim(1) != channels * vm.dim(1))
        throw ShapeError("block_matmul_dyn: blocks " + shape_str(vm.shape()) + " vs cols " +
                         shape_str(vc.shape()));
    const int B = vc.dim(0), HV = vm.dim(1), P = vc.dim(2);
    TensorT<S> out(vc.shape());
    for (int b = 0; b < B; ++b) {
        const S* mb = vm.data() + static_cast<std::ptrdiff_t>(b) * HV * HV;
        for (int c = 0; c < channels; ++c) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
            gemm(mb, HV, HV, false, vc.data() + off, HV, P, false, out.data() + off, false);
        }
    }
    return g.push("block_matmul_dyn", {ms, cols}, std::move(out), false,
                  [ms, cols, channels, HV, B, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vm2 = gr.val(ms);
                      const auto& vc2 = gr.val(cols);
                      auto& gm = gr.grad_mut(ms);
                      for (int b = 0; b < B; ++b)
                          for (int c = 0; c < channels; ++c) {
                              const std::ptrdiff_t off =
                                  (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
                              gemm(go.data() + off, HV, P, false, vc2.data() + off, HV, P, true,
                                   gm.data() + static_cast<std::ptrdiff_t>(b) * HV * HV, true);
                          }
                      auto& gc = gr.grad_mut(cols);
                      for (int b = 0; b < B; ++b) {
                          const S* mb = vm2.data() + static_cast<std::ptrdiff_t>(b) * HV * HV;
                          for (int c = 0; c < channels; ++c) {
                              const std::ptrdiff_t off =
                                  (static_cast<std::ptrdiff_t>(b) * channels + c) * HV * P;
                              gemm(mb, HV, HV, true, go.data() + off, HV, P, false,
                                   gc.data() + off, true);
                          }
                      }
                  });
}

/// M = tril(L) . tril(L)^T. Only the lower triangle of L participates, so
/// gradients never leak into the upper triangle.
template <class S>
int cholesky_product(GraphT<S>& g, int l) {
    const auto& vl = g.val(l);
    if (vl.rank() != 2 || vl.dim(0) != vl.dim(1))
        throw ShapeError("cholesky_product expects a square matrix, got " + shape_str(vl.shape()));
    const int n = vl.dim(0);
    TensorT<S> out({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            S acc(0);
            const int kmax = i < j ? i : j;
            for (int k = 0; k <= kmax; ++k) acc += vl(i, k) * vl(j, k);
            out(i, j) = acc;
        }
    return g.push("cholesky_product", {l}, std::move(out), false, [l, n](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        const auto& vl2 = gr.val(l);
        auto& gl = gr.grad_mut(l);
        // dL = tril((G + G^T) . tril(L))
        for (int i = 0; i < n; ++i)
            for (int k = 0; k <= i; ++k) {
                S acc(0);
                for (int j = k; j < n; ++j) acc += (go(i, j) + go(j, i)) * vl2(j, k);
                gl(i, k) += acc;
            }
    });
}

/// Scale each row i of a square matrix by constant mask[i] (kernel-shape mask).
/// The gradient *at this node* is dL/dMs, which the shape-shadow update reads.
template <class S>
int rowscale_const(GraphT<S>& g, int r, const Tensor& mask) {
    const auto& vr = g.val(r);
    if (vr.rank() != 2 || vr.dim(0) != mask.size())
        throw ShapeError("rowscale_const: matrix " + shape_str(vr.shape()) + " vs mask length " +
                         std::to_string(mask.size()));
    const int n = vr.dim(0), m = vr.dim(1);
    TensorT<S> out(vr.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out(i, j) = S(mask[i]) * vr(i, j);
    return g.push("rowscale", {r}, std::move(out), false, [r, mask, n, m](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        auto& grr = gr.grad_mut(r);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) grr(i, j) += S(mask[i]) * go(i, j);
    });
}

// ---------------------------------------------------------------------------
// Bias, pooling, normalization.
// ---------------------------------------------------------------------------

/// y[BxKxP] + bias[K] broadcast over samples and positions.
template <class S>
int bias_channels(GraphT<S>& g, int y, int b) {
    const auto& vy = g.val(y);
    const auto& vb = g.val(b);
    if (vy.rank() != 3 || vb.size() != vy.dim(1))
        throw ShapeError("bias_channels: " + shape_str(vy.shape()) + " vs " +
                         shape_str(vb.shape()));
    const int B = vy.dim(0), K = vy.dim(1), P = vy.dim(2);
    TensorT<S> out = vy;
    for (int bb = 0; bb < B; ++bb)
        for (int k = 0; k < K; ++k) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(bb) * K + k) * P;
            for (int p = 0; p < P; ++p) out[static_cast<int>(base) + p] += vb[k];
        }
    return g.push("bias_channels", {y, b}, std::move(out), false,
                  [y, b, B, K, P](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      gr.grad_mut(y) += go;
                      auto& gb = gr.grad_mut(b);
                      for (int bb = 0; bb < B; ++bb)
                          for (int k = 0; k < K; ++k) {
                              S acc(0);
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(bb) * K + k) * P;
                              for (int p = 0; p < P; ++p) acc += go[static_cast<int>(base) + p];
                              gb[k] += acc;
                          }
                  });
}

/// y[BxO] + bias[O] broadcast over rows.
template <class S>
int bias_cols(GraphT<S>& g, int y, int b) {
    const auto& vy = g.val(y);
    const auto& vb = g.val(b);
    if (vy.rank() != 2 || vb.size() != vy.dim(1))
        throw ShapeError("bias_cols: " + shape_str(vy.shape()) + " vs " + shape_str(vb.shape()));
    const int B = vy.dim(0), O = vy.dim(1);
    TensorT<S> out = vy;
    for (int bb = 0; bb < B; ++bb)
        for (int o = 0; o < O; ++o) out(bb, o) += vb[o];
    return g.push("bias_cols", {y, b}, std::move(out), false,
                  [y, b, B, O](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      gr.grad_mut(y) += go;
                      auto& gb = gr.grad_mut(b);
                      for (int bb = 0; bb < B; ++bb)
                          for (int o = 0; o < O; ++o) gb[o] += go(bb, o);
                  });
}

/// Max pooling over kxk windows with the given stride, no padding; on ties
/// the first element in scan order wins (fixes the backward scatter target).
template <class S>
int maxpool(GraphT<S>& g, int x, int k, int stride) {
    const auto& vx = g.val(x);
    if (vx.rank() != 4) throw ShapeError("maxpool expects BxCxHxW, got " + shape_str(vx.shape()));
    const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    if (H < k || W < k)
        throw ShapeError("maxpool window " + std::to_string(k) + " exceeds input " +
                         shape_str(vx.shape()));
    const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    TensorT<S> out({B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(out.size()));
    int oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const std::ptrdiff_t plane = (static_cast<std::ptrdiff_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox, ++oi) {
                    int best = -1;
                    S bestv(0);
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            const int idx = (oy * stride + dy) * W + ox * stride + dx;
                            const S v = vx[static_cast<int>(plane) + idx];
                            if (best < 0 || v > bestv) {
                                best = idx;
                                bestv = v;
                            }
                        }
                    out[oi] = bestv;
                    (*arg)[static_cast<std::size_t>(oi)] = static_cast<int>(plane) + best;
                }
        }
    return g.push("maxpool", {x}, std::move(out), false, [x, arg](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        auto& gx = gr.grad_mut(x);
        for (int i = 0; i < go.size(); ++i) gx[(*arg)[static_cast<std::size_t>(i)]] += go[i];
    });
}

/// Mean over the last axis of [BxKxP] -> [BxK] (global average pooling).
template <class S>
int gap_cols(GraphT<S>& g, int x) {
    const auto& vx = g.val(x);
    if (vx.rank() != 3) throw ShapeError("gap_cols expects BxKxP, got " + shape_str(vx.shape()));
    const int B = vx.dim(0), K = vx.dim(1), P = vx.dim(2);
    TensorT<S> out({B, K});
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            S acc(0);
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
            for (int p = 0; p < P; ++p) acc += vx[static_cast<int>(base) + p];
            out(b, k) = acc / S(static_cast<double>(P));
        }
    return g.push("gap_cols", {x}, std::move(out), false, [x, B, K, P](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        auto& gx = gr.grad_mut(x);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k) {
                const S v = go(b, k) / S(static_cast<double>(P));
                const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
                for (int p = 0; p < P; ++p) gx[static_cast<int>(base) + p] += v;
            }
    });
}

/// Per-channel batch statistics computed during the forward pass; the trainer
/// reads these to update running statistics.
template <class S>
struct BnBatchStats {
    TensorT<S> mean;
    TensorT<S> var;  // biased
};

/// Batch normalization in training mode over x[BxKxP] (stats per channel K).
template <class S>
int batchnorm_train(GraphT<S>& g, int x, int gamma, int beta, double eps,
                    std::shared_ptr<BnBatchStats<S>> stats_out = nullptr) {
    using nsl::sqrt;
    using std::sqrt;
    const auto& vx = g.val(x);
    if (vx.rank() != 3) throw ShapeError("batchnorm expects BxKxP, got " + shape_str(vx.shape()));
    const int B = vx.dim(0), K = vx.dim(1), P = vx.dim(2);
    if (g.val(gamma).size() != K || g.val(beta).size() != K)
        throw ShapeError("batchnorm affine params must have length " + std::to_string(K));
    const double N = static_cast<double>(B) * P;
    TensorT<S> mu({K}), var({K}), inv({K});
    for (int k = 0; k < K; ++k) {
        S acc(0);
        for (int b = 0; b < B; ++b) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
            for (int p = 0; p < P; ++p) acc += vx[static_cast<int>(base) + p];
        }
        mu[k] = acc / S(N);
        S acc2(0);
        for (int b = 0; b < B; ++b) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
            for (int p = 0; p < P; ++p) {
                const S d = vx[static_cast<int>(base) + p] - mu[k];
                acc2 += d * d;
            }
        }
        var[k] = acc2 / S(N);
        inv[k] = S(1) / sqrt(var[k] + S(eps));
    }
    if (stats_out) {
        stats_out->mean = mu;
        stats_out->var = var;
    }
    auto xhat = std::make_shared<TensorT<S>>(vx.shape());
    TensorT<S> out(vx.shape());
    const auto& vgam = g.val(gamma);
    const auto& vbet = g.val(beta);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
            for (int p = 0; p < P; ++p) {
                const S h = (vx[static_cast<int>(base) + p] - mu[k]) * inv[k];
                (*xhat)[static_cast<int>(base) + p] = h;
                out[static_cast<int>(base) + p] = vgam[k] * h + vbet[k];
            }
        }
    auto invc = std::make_shared<TensorT<S>>(std::move(inv));
    return g.push("batchnorm_train", {x, gamma, beta}, std::move(out), false,
                  [x, gamma, beta, B, K, P, N, xhat, invc](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vgam2 = gr.val(gamma);
                      auto& ggam = gr.grad_mut(gamma);
                      auto& gbet = gr.grad_mut(beta);
                      auto& gx = gr.grad_mut(x);
                      for (int k = 0; k < K; ++k) {
                          S sum_g(0), sum_gh(0);
                          for (int b = 0; b < B; ++b) {
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
                              for (int p = 0; p < P; ++p) {
                                  sum_g += go[static_cast<int>(base) + p];
                                  sum_gh += go[static_cast<int>(base) + p] *
                                            (*xhat)[static_cast<int>(base) + p];
                              }
                          }
                          ggam[k] += sum_gh;
                          gbet[k] += sum_g;
                          const S c = vgam2[k] * (*invc)[k];
                          const S mg = sum_g / S(N), mgh = sum_gh / S(N);
                          for (int b = 0; b < B; ++b) {
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
                              for (int p = 0; p < P; ++p)
                                  gx[static_cast<int>(base) + p] +=
                                      c * (go[static_cast<int>(base) + p] - mg -
                                           (*xhat)[static_cast<int>(base) + p] * mgh);
                          }
                      }
                  });
}

/// Batch normalization in inference mode: affine transform by the stored
/// running statistics (constants for differentiation).
template <class S>
int batchnorm_eval(GraphT<S>& g, int x, int gamma, int beta, const Tensor& run_mean,
                   const Tensor& run_var, double eps) {
    const auto& vx = g.val(x);
    if (vx.rank() != 3) throw ShapeError("batchnorm expects BxKxP, got " + shape_str(vx.shape()));
    const int B = vx.dim(0), K = vx.dim(1), P = vx.dim(2);
    Tensor inv({K});
    for (int k = 0; k < K; ++k) inv[k] = 1.0 / std::sqrt(run_var[k] + eps);
    TensorT<S> out(vx.shape());
    const auto& vgam = g.val(gamma);
    const auto& vbet = g.val(beta);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
            for (int p = 0; p < P; ++p)
                out[static_cast<int>(base) + p] =
                    vgam[k] * ((vx[static_cast<int>(base) + p] - S(run_mean[k])) * S(inv[k])) +
                    vbet[k];
        }
    return g.push("batchnorm_eval", {x, gamma, beta}, std::move(out), false,
                  [x, gamma, beta, B, K, P, run_mean, inv](GraphT<S>& gr, int self) {
                      const auto& go = gr.grad(self);
                      const auto& vx2 = gr.val(x);
                      const auto& vgam2 = gr.val(gamma);
                      auto& gx = gr.grad_mut(x);
                      auto& ggam = gr.grad_mut(gamma);
                      auto& gbet = gr.grad_mut(beta);
                      for (int k = 0; k < K; ++k) {
                          const S c = vgam2[k] * S(inv[k]);
                          S sum_g(0), sum_gh(0);
                          for (int b = 0; b < B; ++b) {
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(b) * K + k) * P;
                              for (int p = 0; p < P; ++p) {
                                  const S gv = go[static_cast<int>(base) + p];
                                  sum_g += gv;
                                  sum_gh += gv * ((vx2[static_cast<int>(base) + p] - S(run_mean[k])) *
                                                  S(inv[k]));
                                  gx[static_cast<int>(base) + p] += c * gv;
                              }
                          }
                          ggam[k] += sum_gh;
                          gbet[k] += sum_g;
                      }
                  });
}

// ---------------------------------------------------------------------------
// Hyperspherical (sphere-normalized) products.
// ---------------------------------------------------------------------------

/// out[b,k,p] = (w_k . x_{b,p}) / denom, with denom depending on the mode:
/// Both: (|w_k|+eps)(|x_{b,p}|+eps); XOnly: |x_{b,p}|+eps; None: 1.
template <class S>
int sphere_matmul(GraphT<S>& g, int w, int cols, SphereNorm mode, double eps) {
    using nsl::sqrt;
    using std::sqrt;
    const auto& vw = g.val(w);
    const auto& vc = g.val(cols);
    if (vw.rank() != 2 || vc.rank() != 3 || vw.dim(1) != vc.dim(1))
        throw ShapeError("sphere_matmul shape mismatch: " + shape_str(vw.shape()) + " . " +
                         shape_str(vc.shape()));
    const int B = vc.dim(0), K = vw.dim(0), D = vw.dim(1), P = vc.dim(2);

    auto wnorm = std::make_shared<TensorT<S>>(std::vector<int>{K});
    for (int k = 0; k < K; ++k) {
        S acc(0);
        for (int d = 0; d < D; ++d) acc += vw(k, d) * vw(k, d);
        (*wnorm)[k] = sqrt(acc);
    }
    auto xnorm = std::make_shared<TensorT<S>>(std::vector<int>{B, P});
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < P; ++p) {
            S acc(0);
            for (int d = 0; d < D; ++d) {
                const S v = vc(b, d, p);
                acc += v * v;
            }
            (*xnorm)(b, p) = sqrt(acc);
        }

    TensorT<S> out({B, K, P});
    for (int b = 0; b < B; ++b)
        gemm(vw.data(), K, D, false, vc.data() + static_cast<std::ptrdiff_t>(b) * D * P, D, P,
             false, out.data() + static_cast<std::ptrdiff_t>(b) * K * P, false);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const S dk = mode == SphereNorm::Both ? (*wnorm)[k] + S(eps) : S(1);
            for (int p = 0; p < P; ++p) {
                const S ep = mode == SphereNorm::None ? S(1) : (*xnorm)(b, p) + S(eps);
                out(b, k, p) /= dk * ep;
            }
        }

    return g.push(
        "sphere_matmul", {w, cols}, std::move(out), false,
        [w, cols, mode, eps, B, K, D, P, wnorm, xnorm](GraphT<S>& gr, int self) {
            const auto& go = gr.grad(self);
            const auto& vo = gr.val(self);
            const auto& vw2 = gr.val(w);
            const auto& vc2 = gr.val(cols);
            // Scaled gradient: go / denom.
            TensorT<S> gs({B, K, P});
            for (int b = 0; b < B; ++b)
                for (int k = 0; k < K; ++k) {
                    const S dk = mode == SphereNorm::Both ? (*wnorm)[k] + S(eps) : S(1);
                    for (int p = 0; p < P; ++p) {
                        const S ep = mode == SphereNorm::None ? S(1) : (*xnorm)(b, p) + S(eps);
                        gs(b, k, p) = go(b, k, p) / (dk * ep);
                    }
                }
            auto& gw = gr.grad_mut(w);
            for (int b = 0; b < B; ++b)
                gemm(gs.data() + static_cast<std::ptrdiff_t>(b) * K * P, K, P, false,
                     vc2.data() + static_cast<std::ptrdiff_t>(b) * D * P, D, P, true, gw.data(),
                     true);
            auto& gc = gr.grad_mut(cols);
            for (int b = 0; b < B; ++b)
                gemm(vw2.data(), K, D, true, gs.data() + static_cast<std::ptrdiff_t>(b) * K * P, K,
                     P, false, gc.data() + static_cast<std::ptrdiff_t>(b) * D * P, true);
            if (mode == SphereNorm::Both) {
                for (int k = 0; k < K; ++k) {
                    if (!((*wnorm)[k] > S(0))) continue;
                    S t2(0);
                    for (int b = 0; b < B; ++b)
                        for (int p = 0; p < P; ++p) t2 += go(b, k, p) * vo(b, k, p);
                    const S c = t2 / (((*wnorm)[k] + S(eps)) * (*wnorm)[k]);
                    for (int d = 0; d < D; ++d) gw(k, d) -= c * vw2(k, d);
                }
            }
            if (mode != SphereNorm::None) {
                for (int b = 0; b < B; ++b)
                    for (int p = 0; p < P; ++p) {
                        if (!((*xnorm)(b, p) > S(0))) continue;
                        S q(0);
                        for (int k = 0; k < K; ++k) q += go(b, k, p) * vo(b, k, p);
                        const S c = q / (((*xnorm)(b, p) + S(eps)) * (*xnorm)(b, p));
                        for (int d = 0; d < D; ++d) gc(b, d, p) -= c * vc2(b, d, p);
                    }
            }
        });
}

/// Row version for fully-connected sphere layers: x[BxD], w[OxD] -> [BxO].
template <class S>
int sphere_linear(GraphT<S>& g, int x, int w, SphereNorm mode, double eps) {
    using nsl::sqrt;
    using std::sqrt;
    const auto& vx = g.val(x);
    const auto& vw = g.val(w);
    if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1))
        throw ShapeError("sphere_linear shape mismatch: " + shape_str(vx.shape()) + " vs " +
                         shape_str(vw.shape()));
    const int B = vx.dim(0), D = vx.dim(1), O = vw.dim(0);
    auto wnorm = std::make_shared<TensorT<S>>(std::vector<int>{O});
    for (int o = 0; o < O; ++o) {
        S acc(0);
        for (int d = 0; d < D; ++d) acc += vw(o, d) * vw(o, d);
        (*wnorm)[o] = sqrt(acc);
    }
    auto xnorm = std::make_shared<TensorT<S>>(std::vector<int>{B});
    for (int b = 0; b < B; ++b) {
        S acc(0);
        for (int d = 0; d < D; ++d) acc += vx(b, d) * vx(b, d);
        (*xnorm)[b] = sqrt(acc);
    }
    TensorT<S> out({B, O});
    gemm(vx.data(), B, D, false, vw.data(), O, D, true, out.data(), false);
    for (int b = 0; b < B; ++b) {
        const S eb = mode == SphereNorm::None ? S(1) : (*xnorm)[b] + S(eps);
        for (int o = 0; o < O; ++o) {
            const S dn = mode == SphereNorm::Both ? (*wnorm)[o] + S(eps) : S(1);
            out(b, o) /= dn * eb;
        }
    }
    return g.push(
        "sphere_linear", {x, w}, std::move(out), false,
        [x, w, mode, eps, B, D, O, wnorm, xnorm](GraphT<S>& gr, int self) {
            const auto& go = gr.grad(self);
            const auto& vo = gr.val(self);
            const auto& vx2 = gr.val(x);
            const auto& vw2 = gr.val(w);
            TensorT<S> gs({B, O});
            for (int b = 0; b < B; ++b) {
                const S eb = mode == SphereNorm::None ? S(1) : (*xnorm)[b] + S(eps);
                for (int o = 0; o < O; ++o) {
                    const S dn = mode == SphereNorm::Both ? (*wnorm)[o] + S(eps) : S(1);
                    gs(b, o) = go(b, o) / (dn * eb);
                }
            }
            gemm(gs.data(), B, O, false, vw2.data(), O, D, false, gr.grad_mut(x).data(), true);
            gemm(gs.data(), B, O, true, vx2.data(), B, D, false, gr.grad_mut(w).data(), true);
            if (mode == SphereNorm::Both) {
                auto& gw = gr.grad_mut(w);
                for (int o = 0; o < O; ++o) {
                    if (!((*wnorm)[o] > S(0))) continue;
                    S t2(0);
                    for (int b = 0; b < B; ++b) t2 += go(b, o) * vo(b, o);
                    const S c = t2 / (((*wnorm)[o] + S(eps)) * (*wnorm)[o]);
                    for (int d = 0; d < D; ++d) gw(o, d) -= c * vw2(o, d);
                }
            }
            if (mode != SphereNorm::None) {
                auto& gx = gr.grad_mut(x);
                for (int b = 0; b < B; ++b) {
                    if (!((*xnorm)[b] > S(0))) continue;
                    S q(0);
                    for (int o = 0; o < O; ++o) q += go(b, o) * vo(b, o);
                    const S c = q / (((*xnorm)[b] + S(eps)) * (*xnorm)[b]);
                    for (int d = 0; d < D; ++d) gx(b, d) -= c * vx2(b, d);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses and softmax.
// ---------------------------------------------------------------------------

/// Mean cross-entropy of logits[BxN] against integer labels, stabilized by
/// per-row max subtraction.
template <class S>
int softmax_cross_entropy(GraphT<S>& g, int logits, std::vector<int> labels) {
    using nsl::exp;
    using nsl::log;
    using std::exp;
    using std::log;
    const auto& vl = g.val(logits);
    if (vl.rank() != 2) throw ShapeError("cross entropy expects BxN logits, got " + shape_str(vl.shape()));
    const int B = vl.dim(0), N = vl.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
    for (int b = 0; b < B; ++b)
        if (labels[static_cast<std::size_t>(b)] < 0 || labels[static_cast<std::size_t>(b)] >= N)
            throw ArgumentError("label " + std::to_string(labels[static_cast<std::size_t>(b)]) +
                                " out of range [0," + std::to_string(N) + ")");
    auto probs = std::make_shared<TensorT<S>>(vl.shape());
    S loss(0);
    for (int b = 0; b < B; ++b) {
        S m = vl(b, 0);
        for (int j = 1; j < N; ++j)
            if (vl(b, j) > m) m = vl(b, j);
        S z(0);
        for (int j = 0; j < N; ++j) {
            const S e = exp(vl(b, j) - m);
            (*probs)(b, j) = e;
            z += e;
        }
        for (int j = 0; j < N; ++j) (*probs)(b, j) /= z;
        loss -= log((*probs)(b, labels[static_cast<std::size_t>(b)]));
    }
    loss /= S(static_cast<double>(B));
    return g.push("softmax_cross_entropy", {logits}, TensorT<S>::scalar(loss), false,
                  [logits, labels = std::move(labels), probs, B, N](GraphT<S>& gr, int self) {
                      const S go = gr.grad(self)[0] / S(static_cast<double>(B));
                      auto& gl = gr.grad_mut(logits);
                      for (int b = 0; b < B; ++b)
                          for (int j = 0; j < N; ++j) {
                              S p = (*probs)(b, j);
                              if (j == labels[static_cast<std::size_t>(b)]) p -= S(1);
                              gl(b, j) += go * p;
                          }
                  });
}

/// Row-wise softmax of a 2-D tensor (optional attention normalization).
template <class S>
int row_softmax(GraphT<S>& g, int a) {
    using nsl::exp;
    using std::exp;
    const auto& va = g.val(a);
    if (va.rank() != 2) throw ShapeError("row_softmax expects 2-D, got " + shape_str(va.shape()));
    const int R = va.dim(0), C = va.dim(1);
    TensorT<S> out(va.shape());
    for (int r = 0; r < R; ++r) {
        S m = va(r, 0);
        for (int c = 1; c < C; ++c)
            if (va(r, c) > m) m = va(r, c);
        S z(0);
        for (int c = 0; c < C; ++c) {
            out(r, c) = exp(va(r, c) - m);
            z += out(r, c);
        }
        for (int c = 0; c < C; ++c) out(r, c) /= z;
    }
    return g.push("row_softmax", {a}, std::move(out), false, [a, R, C](GraphT<S>& gr, int self) {
        const auto& go = gr.grad(self);
        const auto& p = gr.val(self);
        auto& ga = gr.grad_mut(a);
        for (int r = 0; r < R; ++r) {
            S dot(0);
            for (int c = 0; c < C; ++c) dot += go(r, c) * p(r, c);
            for (int c = 0; c < C; ++c) ga(r, c) += p(r, c) * (go(r, c) - dot);
        }
    });
}

}  // namespace nsl
