#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nsl/graph.hpp"
#include "nsl/rng.hpp"
#include "nsl/similarity.hpp"

namespace nsl {

enum class SimMode { Static, Dynamic };
enum class PredictorWiring { Disjoint, Shared };
enum class RunMode { Train, Eval };

/// One backbone layer. Convolution is always the neural-similarity form; a
/// plain convolution is the static-Identity special case (and is bit-identical
/// to it, the two share this code path).
struct LayerSpec {
    enum class Kind { NsConv, BatchNorm, Relu, MaxPool, Fc, Classifier };

    Kind kind = Kind::NsConv;

    // NsConv
    int filters = 0;
    int kh = 3, kw = 3;
    int stride = 1, pad = 1;
    bool bias = false;
    SimMode sim_mode = SimMode::Static;
    SimKind sim_kind = SimKind::Identity;
    PredictorWiring wiring = PredictorWiring::Disjoint;
    SphereNorm pred_norm = SphereNorm::Both;  // final predictor stage; None = unnormalized predictor
    int pred_hidden = 0;                      // 0 = default (64 DNS, 128 UNS)
    bool per_patch = false;                   // per-window prediction (DNS only, off by default)

    // MaxPool
    int pool = 2, pool_stride = 2;

    // Fc
    int width = 0;
};

LayerSpec conv_layer(int filters, int k, int stride, int pad, bool bias = false);
LayerSpec nsconv_layer(int filters, int k, int stride, int pad, SimMode mode, SimKind kind,
                       PredictorWiring wiring = PredictorWiring::Disjoint);
LayerSpec bn_layer();
LayerSpec relu_layer();
LayerSpec maxpool_layer(int pool = 2, int stride = 2);
LayerSpec fc_layer(int width);
LayerSpec classifier_layer();

struct NetworkSpec {
    int in_channels = 1, in_h = 8, in_w = 8;
    int num_classes = 2;
    int adapter_channels = 16;  // fixed channel count fed to a shared predictor
    std::vector<LayerSpec> layers;
};

/// Shape propagation; throws ConfigError naming the layer index on failure.
/// Returns the flattened feature width entering the classifier.
int validate_spec(const NetworkSpec& spec);

/// Architecture presets. Known ids: CNN-4, CNN-9, CNN-10, baselineCNN,
/// baselineCNN++ (alias baselineCNN++-like). Convolutions come out as plain
/// (static Identity) layers; use set_similarity to turn them into NSN layers.
NetworkSpec build_preset(const std::string& id);

/// Rewrite every convolution layer's similarity configuration in place.
void set_similarity(NetworkSpec& spec, SimMode mode, SimKind kind,
                    PredictorWiring wiring = PredictorWiring::Disjoint,
                    SphereNorm pred_norm = SphereNorm::Both);

/// A model is an ordered set of named parameter tensors plus named buffers
/// (batch-norm running statistics, kernel-shape shadows) over a NetworkSpec.
class Model {
public:
    NetworkSpec spec;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;

    static Model build(const NetworkSpec& spec, std::uint64_t seed);

    int param_index(const std::string& name) const;
    bool has_param(const std::string& name) const { return param_index(name) >= 0; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    Tensor& buffer(const std::string& name);
    const Tensor& buffer(const std::string& name) const;
    bool has_buffer(const std::string& name) const;

    /// Total number of stored parameter scalars.
    long long param_count() const;

    /// Static similarity object for an NsConv layer (reads current params).
    SimilarityMatrix static_similarity(int layer) const;

    /// Input feature-map shape (C,H,W) seen by a layer.
    std::vector<int> layer_input_shape(int layer) const;
};

/// Parameter name helpers (stable, used by freezing and checkpoints).
std::string layer_prefix(int layer);
bool is_backbone_param(const std::string& name);    // conv/bn/fc/head weights
bool is_similarity_param(const std::string& name);  // static M parameters
bool is_predictor_param(const std::string& name);   // dynamic predictor + adapters
bool is_head_param(const std::string& name);

/// Per-iteration hooks produced while building the forward graph.
template <class S>
struct BnHook {
    int layer = -1;
    std::shared_ptr<BnBatchStats<S>> stats;
};

struct ShapeHook {
    int layer = -1;
    int block_node = -1;  // node whose gradient is dL/dMs
    int r_param = -1;     // param index of R
    std::string shadow_buffer;
};

template <class S>
struct ForwardCtx {
    std::vector<int> param_nodes;  // node id per model parameter, same order
    int logits = -1;
    std::vector<BnHook<S>> bn_hooks;
    std::vector<ShapeHook> shape_hooks;
};

namespace detail {

template <class S>
int predictor_forward(GraphT<S>& g, const Model& m, const ForwardCtx<S>& ctx, int layer,
                      int input_node, int in_c, int in_h, int in_w, const LayerSpec& ls);

}  // namespace detail

/// Build the forward graph of the whole network on a batch node x[BxCxHxW].
/// Parameter tensors may be overridden (same order as model.params) so that
/// dual-number lifts and adapted copies reuse one code path.
template <class S>
ForwardCtx<S> build_forward(GraphT<S>& g, const Model& m, const TensorT<S>& x, RunMode mode,
                            const std::vector<TensorT<S>>* param_override = nullptr);

/// Eval-mode logits on a batch, as plain values.
Tensor backbone_forward(const Model& m, const Tensor& x_batch, RunMode mode = RunMode::Eval);

/// Pure Eq.-1-lifted convolution on one sample: im2col, similarity, kernel
/// inner products. No bias, no activation. kernels are [KxCxkhxkw].
Tensor ns_conv_forward(const Tensor& kernels, const SimilarityMatrix& ms, const Tensor& x,
                       int stride, int pad);

/// View of one layer's dynamic similarity predictor.
struct SpherePredictor {
    const Model* model = nullptr;
    int layer = -1;

    int output_dim() const;
    SphereNorm norm_mode() const;
};

SpherePredictor predictor_of(const Model& m, int layer);

/// Run the predictor on one input feature map and wrap the result:
/// DNS -> Diagonal similarity, UNS -> Unconstrained similarity.
SimilarityMatrix predict_similarity(const SpherePredictor& pred, const Tensor& x);

/// Adapter applied before a shared predictor: 1x1 convolution onto the fixed
/// channel count. Registered per input shape; layers with equal input shape
/// share one adapter parameter.
std::string adapter_param_name(int channels, int h, int w);
Tensor adapt_input(const Model& m, const Tensor& x);

/// Fold every static similarity into its layer kernels (M^T W) and return the
/// equivalent plain-convolution model. ConfigError if any layer is dynamic.
Model fold_static_model(const Model& m);

/// One-neuron dynamic toy: f(W', W, X) = W^T W' X^T X (a quadratic form).
double quadratic_toy_forward(const Tensor& wp, const Tensor& w, const Tensor& x);

/// Scalar hyperspherical similarity of two flat vectors.
/// Both:  w.x / ((|w|+eps)(|x|+eps));  XOnly: w.x / (|x|+eps);  None: w.x.
double sphere_conv(const Tensor& w, const Tensor& x, SphereNorm mode, double eps = 1e-6);

/// Plain-convolution twin: same backbone spec and weights, every similarity
/// replaced by static Identity, similarity/predictor/adapter parameters
/// dropped. The twin shares the NSN's exact code path, so with Identity
/// similarities the two produce bit-identical logits.
Model plain_twin(const Model& m);

// ---------------------------------------------------------------------------
// Template implementation.
// ---------------------------------------------------------------------------

namespace detail {

inline int default_pred_hidden(const LayerSpec& ls) {
    if (ls.pred_hidden > 0) return ls.pred_hidden;
    return ls.sim_kind == SimKind::Unconstrained ? 128 : 64;
}

inline int pred_output_dim(const LayerSpec& ls) {
    const int hv = ls.kh * ls.kw;
    return ls.sim_kind == SimKind::Unconstrained ? hv * hv : hv;
}

/// Raw predictor output: [B, out_dim] (or [B, out_dim, P] in per-patch mode).
template <class S>
int predictor_forward(GraphT<S>& g, const Model& m, const ForwardCtx<S>& ctx, int layer,
                      int input_node, int in_c, int in_h, int in_w, const LayerSpec& ls) {
    const double eps = 1e-6;
    const SphereNorm hidden_norm =
        ls.pred_norm == SphereNorm::None ? SphereNorm::None : SphereNorm::XOnly;
    const std::string lp = layer_prefix(layer);

    int feat = input_node;
    int feat_c = in_c;
    std::string stem = lp + "pred.";
    if (ls.wiring == PredictorWiring::Shared) {
        // 1x1 adapter onto the fixed channel count, one adapter per input shape.
        const std::string aname = adapter_param_name(in_c, in_h, in_w);
        const int aidx = m.param_index(aname);
        if (aidx < 0) throw ConfigError("no adapter registered for shape " + aname);
        const ConvGeom ageom = conv_geometry(in_c, in_h, in_w, 1, 1, 1, 0);
        const int acols = im2col_node(g, feat, ageom);
        const int amat = ctx.param_nodes[static_cast<std::size_t>(aidx)];
        const int aout = matmul_cols(g, amat, acols);
        feat = reshape(g, aout, {g.val(aout).dim(0), m.spec.adapter_channels, in_h, in_w});
        feat_c = m.spec.adapter_channels;
        stem = "shared.pred.";
    }

    const int widx = m.param_index(stem + "conv.w");
    const int oidx = m.param_index(stem + "out.w");
    if (widx < 0 || oidx < 0) throw ConfigError("missing predictor parameters for layer " +
                                                std::to_string(layer));
    const ConvGeom pgeom = conv_geometry(feat_c, in_h, in_w, 3, 3, 1, 1);
    const int pcols = im2col_node(g, feat, pgeom);
    int h = sphere_matmul(g, ctx.param_nodes[static_cast<std::size_t>(widx)], pcols, hidden_norm,
                          eps);
    h = relu(g, h);
    const SphereNorm final_norm = ls.pred_norm;
    if (ls.per_patch) {
        // one similarity per sliding-window position
        return sphere_matmul(g, ctx.param_nodes[static_cast<std::size_t>(oidx)], h, final_norm,
                             eps);
    }
    const int pooled = gap_cols(g, h);
    return sphere_linear(g, pooled, ctx.param_nodes[static_cast<std::size_t>(oidx)], final_norm,
                         eps);
}

}  // namespace detail

template <class S>
ForwardCtx<S> build_forward(GraphT<S>& g, const Model& m, const TensorT<S>& x, RunMode mode,
                            const std::vector<TensorT<S>>* param_override) {
    if (x.rank() != 4 || x.dim(1) != m.spec.in_channels || x.dim(2) != m.spec.in_h ||
        x.dim(3) != m.spec.in_w)
        throw ShapeError("network input " + shape_str(x.shape()) + " does not match spec " +
                         shape_str({-1, m.spec.in_channels, m.spec.in_h, m.spec.in_w}));
    ForwardCtx<S> ctx;
    ctx.param_nodes.reserve(m.params.size());
    if (param_override) {
        if (param_override->size() != m.params.size())
            throw ArgumentError("parameter override count does not match model");
        for (const auto& t : *param_override) ctx.param_nodes.push_back(g.param(t));
    } else {
        for (const auto& [name, t] : m.params) ctx.param_nodes.push_back(g.param(lift<S>(t)));
    }

    const int B = x.dim(0);
    int cur = g.value(x);
    int c = m.spec.in_channels, h = m.spec.in_h, w = m.spec.in_w;
    bool flat = false;

    for (int li = 0; li < static_cast<int>(m.spec.layers.size()); ++li) {
        const LayerSpec& ls = m.spec.layers[static_cast<std::size_t>(li)];
        const std::string lp = layer_prefix(li);
        try {
            switch (ls.kind) {
                case LayerSpec::Kind::NsConv: {
                    const ConvGeom geom = conv_geometry(c, h, w, ls.kh, ls.kw, ls.stride, ls.pad);
                    const int hv = ls.kh * ls.kw;
                    int cols = im2col_node(g, cur, geom);
                    int mcols = cols;
                    if (ls.sim_mode == SimMode::Static) {
                        switch (ls.sim_kind) {
                            case SimKind::Identity:
                                break;
                            case SimKind::Diagonal: {
                                const int d = ctx.param_nodes[static_cast<std::size_t>(
                                    m.param_index(lp + "sim.diag"))];
                                mcols = colscale_blocks(g, cols, d, c);
                                break;
                            }
                            case SimKind::Unconstrained:
                            case SimKind::BlockDiagonalShared: {
                                const int b = ctx.param_nodes[static_cast<std::size_t>(
                                    m.param_index(lp + "sim.block"))];
                                mcols = block_matmul(g, b, cols, c);
                                break;
                            }
                            case SimKind::CholeskyPSD: {
                                const int l = ctx.param_nodes[static_cast<std::size_t>(
                                    m.param_index(lp + "sim.chol"))];
                                mcols = block_matmul(g, cholesky_product(g, l), cols, c);
                                break;
                            }
                            case SimKind::ShapeMasked: {
                                const int ridx = m.param_index(lp + "sim.R");
                                const int r = ctx.param_nodes[static_cast<std::size_t>(ridx)];
                                const Tensor mask =
                                    shape_mask({m.buffer(lp + "sim.Dr"), 0.5});
                                const int ms = rowscale_const(g, r, mask);
                                ctx.shape_hooks.push_back({li, ms, ridx, lp + "sim.Dr"});
                                mcols = block_matmul(g, ms, cols, c);
                                break;
                            }
                        }
                    } else {
                        const int raw =
                            detail::predictor_forward(g, m, ctx, li, cur, c, h, w, ls);
                        if (ls.sim_kind == SimKind::Diagonal) {
                            if (ls.per_patch) {
                                // raw: [B,HV,P]; add 1 and scale columns per position
                                const int ones = g.value(
                                    lift<S>(Tensor::full(values_of(g.val(raw)).shape(), 1.0)));
                                const int d = add(g, raw, ones);
                                mcols = colscale_blocks_per_patch(g, cols, d, c);
                            } else {
                                const int ones =
                                    g.value(lift<S>(Tensor::full({B, hv}, 1.0)));
                                const int d = add(g, raw, ones);
                                mcols = colscale_blocks_dyn(g, cols, d, c);
                            }
                        } else if (ls.sim_kind == SimKind::Unconstrained) {
                            if (ls.per_patch)
                                throw ConfigError("per-patch prediction supports DNS only");
                            const int rs = reshape(g, raw, {B, hv, hv});
                            Tensor eye({B, hv, hv});
                            for (int b = 0; b < B; ++b)
                                for (int i = 0; i < hv; ++i) eye(b, i, i) = 1.0;
                            const int mb = add(g, rs, g.value(lift<S>(eye)));
                            mcols = block_matmul_dyn(g, mb, cols, c);
                        } else {
                            throw ConfigError("dynamic similarity must be DNS or UNS");
                        }
                    }
                    const int widx = m.param_index(lp + "conv.w");
                    const int wmat = reshape(g, ctx.param_nodes[static_cast<std::size_t>(widx)],
                                             {ls.filters, geom.patch_rows()});
                    int y = matmul_cols(g, wmat, mcols);
                    if (ls.bias)
                        y = bias_channels(g, y, ctx.param_nodes[static_cast<std::size_t>(
                                                 m.param_index(lp + "conv.b"))]);
                    cur = reshape(g, y, {B, ls.filters, geom.out_h, geom.out_w});
                    c = ls.filters;
                    h = geom.out_h;
                    w = geom.out_w;
                    break;
                }
                case LayerSpec::Kind::BatchNorm: {
                    const int gamma = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index(lp + "bn.gamma"))];
                    const int beta = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index(lp + "bn.beta"))];
                    const int x3 = reshape(g, cur, {B, c, h * w});
                    int y;
                    if (mode == RunMode::Train) {
                        auto stats = std::make_shared<BnBatchStats<S>>();
                        y = batchnorm_train(g, x3, gamma, beta, 1e-5, stats);
                        ctx.bn_hooks.push_back({li, stats});
                    } else {
                        y = batchnorm_eval(g, x3, gamma, beta, m.buffer(lp + "bn.mean"),
                                           m.buffer(lp + "bn.var"), 1e-5);
                    }
                    cur = reshape(g, y, {B, c, h, w});
                    break;
                }
                case LayerSpec::Kind::Relu:
                    cur = relu(g, cur);
                    break;
                case LayerSpec::Kind::MaxPool: {
                    cur = maxpool(g, cur, ls.pool, ls.pool_stride);
                    h = (h - ls.pool) / ls.pool_stride + 1;
                    w = (w - ls.pool) / ls.pool_stride + 1;
                    break;
                }
                case LayerSpec::Kind::Fc: {
                    const int flat_in = flat ? c : c * h * w;
                    const int xf = reshape(g, cur, {B, flat_in});
                    const int wfc = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index(lp + "fc.w"))];
                    const int bfc = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index(lp + "fc.b"))];
                    cur = bias_cols(g, matmul(g, xf, transpose(g, wfc)), bfc);
                    flat = true;
                    c = ls.width;
                    break;
                }
                case LayerSpec::Kind::Classifier: {
                    const int flat_in = flat ? c : c * h * w;
                    const int xf = reshape(g, cur, {B, flat_in});
                    const int wh = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index("head.w"))];
                    const int bh = ctx.param_nodes[static_cast<std::size_t>(
                        m.param_index("head.b"))];
                    cur = bias_cols(g, matmul(g, xf, transpose(g, wh)), bh);
                    flat = true;
                    c = m.spec.num_classes;
                    break;
                }
            }
        } catch (const ShapeError& e) {
            throw ConfigError("layer " + std::to_string(li) + ": " + e.what());
        }
    }
    ctx.logits = cur;
    return ctx;
}

}  // namespace nsl
