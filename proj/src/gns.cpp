#include "nsl/gns.hpp"

#include "nsl/convolution.hpp"

namespace nsl {

GlobalSimilarity GlobalSimilarity::identity(int m, int c) {
    GlobalSimilarity g;
    g.kind = GnsKind::Identity;
    g.m = m;
    g.c = c;
    return g;
}

namespace {

int square_side(int mm, const char* what) {
    int m = 1;
    while (m * m < mm) ++m;
    if (m * m != mm)
        throw ShapeError(std::string(what) + " size " + std::to_string(mm) + " is not a square");
    return m;
}

}  // namespace

GlobalSimilarity GlobalSimilarity::diagonal_mask(Tensor d, int c) {
    GlobalSimilarity g;
    g.kind = GnsKind::DiagonalMask;
    const int mm = d.size();
    g.m = square_side(mm, "diagonal mask");
    g.c = c;
    g.block = d.reshaped({mm});
    return g;
}

GlobalSimilarity GlobalSimilarity::block_shared(Tensor block, int c) {
    if (block.rank() != 2 || block.dim(0) != block.dim(1))
        throw ShapeError("global block must be square, got " + shape_str(block.shape()));
    GlobalSimilarity g;
    g.kind = GnsKind::BlockDiagonalShared;
    g.m = square_side(block.dim(0), "global block");
    g.c = c;
    g.block = std::move(block);
    return g;
}

ConvAsMatrix conv_as_matrix(const Tensor& kernel, int m, bool circular) {
    if (kernel.rank() != 3 || kernel.dim(1) != kernel.dim(2))
        throw ShapeError("conv_as_matrix kernel must be [c x k x k], got " +
                         shape_str(kernel.shape()));
    const int c = kernel.dim(0), k = kernel.dim(1);
    if (k % 2 == 0)
        throw ArgumentError("conv_as_matrix requires an odd kernel size, got " +
                            std::to_string(k));
    if (k > 2 * m - 1)
        throw ArgumentError("kernel size " + std::to_string(k) + " exceeds 2m-1 for m = " +
                            std::to_string(m));
    const int mm = m * m;
    const int off = k / 2;
    ConvAsMatrix op;
    op.m = m;
    op.c = c;
    op.k = k;
    op.circular = circular;
    op.w_g = Tensor::zeros({mm * c, mm});
    for (int oy = 0; oy < m; ++oy)
        for (int ox = 0; ox < m; ++ox) {
            const int po = oy * m + ox;
            for (int ch = 0; ch < c; ++ch)
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        int iy = oy + dy - off;
                        int ix = ox + dx - off;
                        if (circular) {
                            iy = ((iy % m) + m) % m;
                            ix = ((ix % m) + m) % m;
                        } else if (iy < 0 || iy >= m || ix < 0 || ix >= m) {
                            continue;
                        }
                        op.w_g(ch * mm + iy * m + ix, po) += kernel(ch, dy, dx);
                    }
        }
    return op;
}

namespace {

// Apply M_G to the channel-major flattened map without expanding M_G.
Tensor apply_global(const GlobalSimilarity& mg, const Tensor& xf, int m, int c) {
    const int mm = m * m;
    switch (mg.kind) {
        case GnsKind::Identity:
            return xf;
        case GnsKind::DiagonalMask: {
            Tensor out(xf.shape());
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < mm; ++p) out[ch * mm + p] = mg.block[p] * xf[ch * mm + p];
            return out;
        }
        case GnsKind::BlockDiagonalShared:
        case GnsKind::Attention: {
            Tensor out(xf.shape());
            for (int ch = 0; ch < c; ++ch)
                gemm(mg.block.data(), mm, mm, false, xf.data() + ch * mm, mm, 1, false,
                     out.data() + ch * mm, false);
            return out;
        }
    }
    throw ArgumentError("unknown global similarity kind");
}

}  // namespace

Tensor gns_forward(const ConvAsMatrix& w, const GlobalSimilarity& mg, const Tensor& x) {
    if (x.rank() != 3 || x.dim(0) != w.c || x.dim(1) != w.m || x.dim(2) != w.m)
        throw ShapeError("gns_forward input " + shape_str(x.shape()) +
                         " does not match operator (c=" + std::to_string(w.c) +
                         ", m=" + std::to_string(w.m) + ")");
    if (mg.kind != GnsKind::Identity && (mg.m != w.m || mg.c != w.c))
        throw ShapeError("global similarity (m=" + std::to_string(mg.m) + ", c=" +
                         std::to_string(mg.c) + ") does not match operator");
    const int mm = w.m * w.m;
    const Tensor xf = x.reshaped({w.c * mm});
    const Tensor mx = apply_global(mg, xf, w.m, w.c);
    Tensor out({mm});
    gemm(w.w_g.data(), w.c * mm, mm, true, mx.data(), w.c * mm, 1, false, out.data(), false);
    return out;
}

SelfAttentionNodes self_attention_graph(Graph& g, int w, int g1, int g2, const Tensor& x,
                                        bool softmax_flag) {
    if (x.rank() != 3) throw ShapeError("self-attention input must be [c x m x m]");
    const int c = x.dim(0), m = x.dim(1);
    if (x.dim(2) != m) throw ShapeError("self-attention input must be spatially square");
    const auto& vw = g.val(w);
    if (vw.rank() != 3 || vw.dim(0) != c || vw.dim(1) != vw.dim(2))
        throw ShapeError("self-attention kernel " + shape_str(vw.shape()) +
                         " does not match input channels " + std::to_string(c));
    const int k = vw.dim(1);
    if (k % 2 == 0) throw ArgumentError("self-attention kernel size must be odd");
    if (g.val(g1).rank() != 2 || g.val(g1).dim(0) != c || g.val(g1).dim(1) != c ||
        !g.val(g2).same_shape(g.val(g1)))
        throw ShapeError("attention projections must be [c x c]");
    const int mm = m * m;

    const int xcm = g.value(x.reshaped({c, mm}));  // row = channel plane
    const int y1 = matmul(g, g1, xcm);
    const int y2 = matmul(g, g2, xcm);
    int attn = matmul(g, transpose(g, y1), y2);  // [mm x mm]
    if (softmax_flag) attn = row_softmax(g, attn);

    // Resize(X_F, mm, c) has rows = positions; A . X_mat, then back to c x mm.
    const int xmat = transpose(g, xcm);
    const int attended = matmul(g, attn, xmat);  // [mm x c]
    const int xprime = transpose(g, attended);   // [c x mm]
    const int x4 = reshape(g, xprime, {1, c, m, m});
    const ConvGeom geom = conv_geometry(c, m, m, k, k, 1, k / 2);
    const int cols = im2col_node(g, x4, geom);
    const int wflat = reshape(g, w, {1, c * k * k});
    const int y = matmul_cols(g, wflat, cols);  // [1 x 1 x mm]
    SelfAttentionNodes nodes;
    nodes.out = reshape(g, y, {m, m});
    nodes.attention = attn;
    return nodes;
}

GlobalSimilarity self_attention_similarity(const Tensor& g1, const Tensor& g2, const Tensor& x,
                                           bool softmax_flag) {
    Graph g;
    const int c = x.dim(0), m = x.dim(1);
    auto nodes = self_attention_graph(g, g.value(Tensor::zeros({c, 1, 1})), g.value(g1),
                                      g.value(g2), x, softmax_flag);
    GlobalSimilarity out;
    out.kind = GnsKind::Attention;
    out.m = m;
    out.c = c;
    out.block = g.val(nodes.attention);
    out.softmax = softmax_flag;
    return out;
}

Tensor self_attention_forward(const Tensor& kernel, const Tensor& g1, const Tensor& g2,
                              const Tensor& x, bool softmax_flag) {
    Graph g;
    auto nodes =
        self_attention_graph(g, g.value(kernel), g.value(g1), g.value(g2), x, softmax_flag);
    return g.val(nodes.out);
}

}  // namespace nsl
