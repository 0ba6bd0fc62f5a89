#pragma once

#include "nsl/graph.hpp"
#include "nsl/tensor.hpp"

namespace nsl {

/// Global similarity acting on the whole flattened m x m x c feature map.
/// DiagonalMask and the attention map are one mm-sized spatial object shared
/// across channels; BlockDiagonalShared repeats an mm x mm block per channel.
enum class GnsKind { Identity, DiagonalMask, BlockDiagonalShared, Attention };

struct GlobalSimilarity {
    GnsKind kind = GnsKind::Identity;
    int m = 0;
    int c = 0;
    Tensor block;          // [mm] mask, [mm x mm] block, or the attention map
    bool softmax = false;  // attention maps only: row-softmax applied

    static GlobalSimilarity identity(int m, int c);
    static GlobalSimilarity diagonal_mask(Tensor d, int c);
    static GlobalSimilarity block_shared(Tensor block, int c);
};

/// Structured operator W_G realizing stride-1 dimension-preserving 2-D
/// convolution of an m x m x c map with one k x k x c kernel, as a matrix of
/// shape (mmc) x (mm): out = W_G^T . flatten(x). Default padding is zero;
/// the circular flag switches to wrap-around padding.
struct ConvAsMatrix {
    Tensor w_g;
    int m = 0, c = 0, k = 0;
    bool circular = false;
};

/// kernel is [c x k x k]; k must be odd and at most 2m-1.
ConvAsMatrix conv_as_matrix(const Tensor& kernel, int m, bool circular = false);

/// W_G^T M_G X_F on one feature map x[c x m x m] -> [mm].
Tensor gns_forward(const ConvAsMatrix& w, const GlobalSimilarity& mg, const Tensor& x);

/// Attention map G1(X) G2(X)^T from two bias-free 1x1 convolutions
/// (g1, g2 are [c x c]); optional row-softmax.
GlobalSimilarity self_attention_similarity(const Tensor& g1, const Tensor& g2, const Tensor& x,
                                           bool softmax_flag = false);

/// Full self-attention instantiation of dynamic GNS on one feature map:
/// resizes X_F to mm x c, left-multiplies by the attention map, resizes back,
/// convolves with the kernel. Returns [m x m].
Tensor self_attention_forward(const Tensor& kernel, const Tensor& g1, const Tensor& g2,
                              const Tensor& x, bool softmax_flag = false);

/// Differentiable graph form; w is a [c x k x k] node, g1/g2 are [c x c]
/// nodes. Returns the output node ([m x m]) and the attention-map node.
struct SelfAttentionNodes {
    int out = -1;
    int attention = -1;
};
SelfAttentionNodes self_attention_graph(Graph& g, int w, int g1, int g2, const Tensor& x,
                                        bool softmax_flag = false);

}  // namespace nsl
