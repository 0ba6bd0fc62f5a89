#include "nsl/network.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace nsl {

LayerSpec conv_layer(int filters, int k, int stride, int pad, bool bias) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::NsConv;
    ls.filters = filters;
    ls.kh = ls.kw = k;
    ls.stride = stride;
    ls.pad = pad;
    ls.bias = bias;
    ls.sim_mode = SimMode::Static;
    ls.sim_kind = SimKind::Identity;
    return ls;
}

LayerSpec nsconv_layer(int filters, int k, int stride, int pad, SimMode mode, SimKind kind,
                       PredictorWiring wiring) {
    LayerSpec ls = conv_layer(filters, k, stride, pad);
    ls.sim_mode = mode;
    ls.sim_kind = kind;
    ls.wiring = wiring;
    return ls;
}

LayerSpec bn_layer() {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::BatchNorm;
    return ls;
}

LayerSpec relu_layer() {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::Relu;
    return ls;
}

LayerSpec maxpool_layer(int pool, int stride) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::MaxPool;
    ls.pool = pool;
    ls.pool_stride = stride;
    return ls;
}

LayerSpec fc_layer(int width) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::Fc;
    ls.width = width;
    return ls;
}

LayerSpec classifier_layer() {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::Classifier;
    return ls;
}

int validate_spec(const NetworkSpec& spec) {
    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    bool flat = false;
    int classifiers = 0;
    int head_in = 0;
    for (int li = 0; li < static_cast<int>(spec.layers.size()); ++li) {
        const LayerSpec& ls = spec.layers[static_cast<std::size_t>(li)];
        const std::string where = "layer " + std::to_string(li) + ": ";
        try {
            switch (ls.kind) {
                case LayerSpec::Kind::NsConv: {
                    if (flat) throw ConfigError(where + "convolution after flattening");
                    if (ls.filters < 1) throw ConfigError(where + "filters must be positive");
                    if (ls.sim_mode == SimMode::Dynamic && ls.sim_kind != SimKind::Diagonal &&
                        ls.sim_kind != SimKind::Unconstrained)
                        throw ConfigError(where + "dynamic similarity must be DNS or UNS");
                    if (ls.per_patch &&
                        (ls.sim_mode != SimMode::Dynamic || ls.sim_kind != SimKind::Diagonal))
                        throw ConfigError(where + "per-patch prediction supports dynamic DNS only");
                    const ConvGeom g = conv_geometry(c, h, w, ls.kh, ls.kw, ls.stride, ls.pad);
                    c = ls.filters;
                    h = g.out_h;
                    w = g.out_w;
                    break;
                }
                case LayerSpec::Kind::BatchNorm:
                case LayerSpec::Kind::Relu:
                    break;
                case LayerSpec::Kind::MaxPool:
                    if (flat) throw ConfigError(where + "pooling after flattening");
                    if (h < ls.pool || w < ls.pool)
                        throw ConfigError(where + "pool window exceeds feature map " +
                                          std::to_string(h) + "x" + std::to_string(w));
                    h = (h - ls.pool) / ls.pool_stride + 1;
                    w = (w - ls.pool) / ls.pool_stride + 1;
                    break;
                case LayerSpec::Kind::Fc:
                    if (ls.width < 1) throw ConfigError(where + "fc width must be positive");
                    c = ls.width;
                    flat = true;
                    h = w = 1;
                    break;
                case LayerSpec::Kind::Classifier:
                    ++classifiers;
                    head_in = c * h * w;
                    c = spec.num_classes;
                    flat = true;
                    h = w = 1;
                    break;
            }
        } catch (const ShapeError& e) {
            throw ConfigError(where + e.what());
        }
    }
    if (classifiers != 1)
        throw ConfigError("network needs exactly one classifier head, found " +
                          std::to_string(classifiers));
    if (spec.layers.back().kind != LayerSpec::Kind::Classifier)
        throw ConfigError("classifier must be the final layer");
    return head_in;
}

namespace {

void push_conv_block(NetworkSpec& spec, int filters, int k, int stride, int pad) {
    spec.layers.push_back(conv_layer(filters, k, stride, pad));
    spec.layers.push_back(bn_layer());
    spec.layers.push_back(relu_layer());
}

}  // namespace

NetworkSpec build_preset(const std::string& id) {
    NetworkSpec spec;
    if (id == "CNN-4") {
        // 4 conv layers, 32 3x3 filters each, bn + relu + 2x2 pool per block.
        spec.in_channels = 3;
        spec.in_h = spec.in_w = 84;
        spec.num_classes = 5;
        for (int i = 0; i < 4; ++i) {
            push_conv_block(spec, 32, 3, 1, 1);
            spec.layers.push_back(maxpool_layer());
        }
        spec.layers.push_back(classifier_layer());
    } else if (id == "CNN-9" || id == "baselineCNN") {
        spec.in_channels = 3;
        spec.in_h = spec.in_w = 32;
        spec.num_classes = 10;
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 32, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 64, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 128, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        spec.layers.push_back(fc_layer(256));
        spec.layers.push_back(relu_layer());
        spec.layers.push_back(classifier_layer());
    } else if (id == "CNN-10") {
        spec.in_channels = 3;
        spec.in_h = spec.in_w = 224;
        spec.num_classes = 1000;
        push_conv_block(spec, 64, 7, 2, 3);
        spec.layers.push_back(maxpool_layer(3, 2));
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 64, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 128, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 256, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        spec.layers.push_back(fc_layer(512));
        spec.layers.push_back(relu_layer());
        spec.layers.push_back(classifier_layer());
    } else if (id == "baselineCNN++" || id == "baselineCNN++-like") {
        // deeper and wider than CNN-9 so the parameter count slightly exceeds
        // the NSN variants
        spec.in_channels = 3;
        spec.in_h = spec.in_w = 32;
        spec.num_classes = 10;
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 40, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 3; ++i) push_conv_block(spec, 80, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        for (int i = 0; i < 4; ++i) push_conv_block(spec, 160, 3, 1, 1);
        spec.layers.push_back(maxpool_layer());
        spec.layers.push_back(fc_layer(256));
        spec.layers.push_back(relu_layer());
        spec.layers.push_back(classifier_layer());
    } else {
        throw ArgumentError("unknown preset '" + id + "'");
    }
    validate_spec(spec);
    return spec;
}

void set_similarity(NetworkSpec& spec, SimMode mode, SimKind kind, PredictorWiring wiring,
                    SphereNorm pred_norm) {
    for (auto& ls : spec.layers) {
        if (ls.kind != LayerSpec::Kind::NsConv) continue;
        ls.sim_mode = mode;
        ls.sim_kind = kind;
        ls.wiring = wiring;
        ls.pred_norm = pred_norm;
    }
}

std::string layer_prefix(int layer) { return "L" + std::to_string(layer) + "."; }

bool is_similarity_param(const std::string& name) {
    return name.find(".sim.") != std::string::npos;
}

bool is_predictor_param(const std::string& name) {
    return name.find("pred.") != std::string::npos || name.rfind("adapter.", 0) == 0;
}

bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }

bool is_backbone_param(const std::string& name) {
    return !is_similarity_param(name) && !is_predictor_param(name) && !is_head_param(name);
}

std::string adapter_param_name(int channels, int h, int w) {
    return "adapter." + std::to_string(channels) + "x" + std::to_string(h) + "x" +
           std::to_string(w) + ".w";
}

namespace {

Tensor gaussian_init(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / fan_in);
    for (int i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, sd);
    return t;
}

}  // namespace

Model Model::build(const NetworkSpec& spec, std::uint64_t seed) {
    const int head_in = validate_spec(spec);
    Model m;
    m.spec = spec;
    Rng rng(derive_seed(seed, 1));

    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    std::set<std::string> registered;
    auto add_param_once = [&](const std::string& name, Tensor t) {
        if (registered.insert(name).second) m.params.emplace_back(name, std::move(t));
    };

    for (int li = 0; li < static_cast<int>(spec.layers.size()); ++li) {
        const LayerSpec& ls = spec.layers[static_cast<std::size_t>(li)];
        const std::string lp = layer_prefix(li);
        switch (ls.kind) {
            case LayerSpec::Kind::NsConv: {
                const int hv = ls.kh * ls.kw;
                const int fan_in = c * hv;
                m.params.emplace_back(lp + "conv.w",
                                      gaussian_init({ls.filters, c, ls.kh, ls.kw}, fan_in, rng));
                if (ls.bias) m.params.emplace_back(lp + "conv.b", Tensor::zeros({ls.filters}));
                if (ls.sim_mode == SimMode::Static) {
                    // static similarity always starts at identity (pretrained workflow)
                    switch (ls.sim_kind) {
                        case SimKind::Identity:
                            break;
                        case SimKind::Diagonal:
                            m.params.emplace_back(lp + "sim.diag", Tensor::full({hv}, 1.0));
                            break;
                        case SimKind::Unconstrained:
                        case SimKind::BlockDiagonalShared:
                            m.params.emplace_back(lp + "sim.block", Tensor::identity(hv));
                            break;
                        case SimKind::CholeskyPSD:
                            m.params.emplace_back(lp + "sim.chol", Tensor::identity(hv));
                            break;
                        case SimKind::ShapeMasked:
                            m.params.emplace_back(lp + "sim.R", Tensor::identity(hv));
                            m.buffers.emplace_back(lp + "sim.Dr", Tensor::full({hv}, 1.0));
                            break;
                    }
                } else {
                    const int hidden = detail::default_pred_hidden(ls);
                    const int out_dim = detail::pred_output_dim(ls);
                    if (ls.wiring == PredictorWiring::Disjoint) {
                        m.params.emplace_back(lp + "pred.conv.w",
                                              gaussian_init({hidden, c * 9}, c * 9, rng));
                        m.params.emplace_back(lp + "pred.out.w",
                                              gaussian_init({out_dim, hidden}, hidden, rng));
                    } else {
                        const std::string aname = adapter_param_name(c, h, w);
                        if (!registered.count(aname)) {
                            Tensor a({spec.adapter_channels, c});
                            if (spec.adapter_channels == c) {
                                for (int i = 0; i < c; ++i) a(i, i) = 1.0;  // identity adapter
                            } else {
                                a = gaussian_init({spec.adapter_channels, c}, c, rng);
                            }
                            add_param_once(aname, std::move(a));
                        }
                        const int ac = spec.adapter_channels;
                        add_param_once("shared.pred.conv.w",
                                       gaussian_init({hidden, ac * 9}, ac * 9, rng));
                        add_param_once("shared.pred.out.w",
                                       gaussian_init({out_dim, hidden}, hidden, rng));
                    }
                }
                const ConvGeom g = conv_geometry(c, h, w, ls.kh, ls.kw, ls.stride, ls.pad);
                c = ls.filters;
                h = g.out_h;
                w = g.out_w;
                break;
            }
            case LayerSpec::Kind::BatchNorm:
                m.params.emplace_back(lp + "bn.gamma", Tensor::full({c}, 1.0));
                m.params.emplace_back(lp + "bn.beta", Tensor::zeros({c}));
                m.buffers.emplace_back(lp + "bn.mean", Tensor::zeros({c}));
                m.buffers.emplace_back(lp + "bn.var", Tensor::full({c}, 1.0));
                break;
            case LayerSpec::Kind::Relu:
                break;
            case LayerSpec::Kind::MaxPool:
                h = (h - ls.pool) / ls.pool_stride + 1;
                w = (w - ls.pool) / ls.pool_stride + 1;
                break;
            case LayerSpec::Kind::Fc: {
                const int d = c * h * w;
                m.params.emplace_back(lp + "fc.w", gaussian_init({ls.width, d}, d, rng));
                m.params.emplace_back(lp + "fc.b", Tensor::zeros({ls.width}));
                c = ls.width;
                h = w = 1;
                break;
            }
            case LayerSpec::Kind::Classifier:
                m.params.emplace_back("head.w",
                                      gaussian_init({spec.num_classes, head_in}, head_in, rng));
                m.params.emplace_back("head.b", Tensor::zeros({spec.num_classes}));
                c = spec.num_classes;
                h = w = 1;
                break;
        }
    }
    return m;
}

int Model::param_index(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(params.size()); ++i)
        if (params[static_cast<std::size_t>(i)].first == name) return i;
    return -1;
}

Tensor& Model::param(const std::string& name) {
    const int i = param_index(name);
    if (i < 0) throw ArgumentError("unknown parameter '" + name + "'");
    return params[static_cast<std::size_t>(i)].second;
}

const Tensor& Model::param(const std::string& name) const {
    const int i = param_index(name);
    if (i < 0) throw ArgumentError("unknown parameter '" + name + "'");
    return params[static_cast<std::size_t>(i)].second;
}

Tensor& Model::buffer(const std::string& name) {
    for (auto& [n, t] : buffers)
        if (n == name) return t;
    throw ArgumentError("unknown buffer '" + name + "'");
}

const Tensor& Model::buffer(const std::string& name) const {
    for (const auto& [n, t] : buffers)
        if (n == name) return t;
    throw ArgumentError("unknown buffer '" + name + "'");
}

bool Model::has_buffer(const std::string& name) const {
    for (const auto& [n, t] : buffers)
        if (n == name) return true;
    return false;
}

long long Model::param_count() const {
    long long total = 0;
    for (const auto& [n, t] : params) total += t.size();
    return total;
}

std::vector<int> Model::layer_input_shape(int layer) const {
    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    for (int li = 0; li < layer; ++li) {
        const LayerSpec& ls = spec.layers[static_cast<std::size_t>(li)];
        switch (ls.kind) {
            case LayerSpec::Kind::NsConv: {
                const ConvGeom g = conv_geometry(c, h, w, ls.kh, ls.kw, ls.stride, ls.pad);
                c = ls.filters;
                h = g.out_h;
                w = g.out_w;
                break;
            }
            case LayerSpec::Kind::MaxPool:
                h = (h - ls.pool) / ls.pool_stride + 1;
                w = (w - ls.pool) / ls.pool_stride + 1;
                break;
            case LayerSpec::Kind::Fc:
                c = ls.width;
                h = w = 1;
                break;
            case LayerSpec::Kind::Classifier:
                c = spec.num_classes;
                h = w = 1;
                break;
            default:
                break;
        }
    }
    return {c, h, w};
}

SimilarityMatrix Model::static_similarity(int layer) const {
    const LayerSpec& ls = spec.layers.at(static_cast<std::size_t>(layer));
    if (ls.kind != LayerSpec::Kind::NsConv || ls.sim_mode != SimMode::Static)
        throw ConfigError("layer " + std::to_string(layer) + " has no static similarity");
    const std::string lp = layer_prefix(layer);
    const int channels = layer_input_shape(layer)[0];
    switch (ls.sim_kind) {
        case SimKind::Identity:
            return SimilarityMatrix::identity(channels, ls.kh * ls.kw);
        case SimKind::Diagonal:
            return SimilarityMatrix::diagonal(param(lp + "sim.diag"), channels);
        case SimKind::Unconstrained:
            return SimilarityMatrix::unconstrained(param(lp + "sim.block"), channels);
        case SimKind::BlockDiagonalShared:
            return SimilarityMatrix::block_shared(param(lp + "sim.block"), channels);
        case SimKind::CholeskyPSD:
            return SimilarityMatrix::cholesky(param(lp + "sim.chol"), channels);
        case SimKind::ShapeMasked:
            return SimilarityMatrix::shape_masked({buffer(lp + "sim.Dr"), 0.5},
                                                  param(lp + "sim.R"), channels);
    }
    throw ConfigError("unknown similarity kind");
}

Tensor backbone_forward(const Model& m, const Tensor& x_batch, RunMode mode) {
    Graph g;
    auto ctx = build_forward<double>(g, m, x_batch, mode);
    return g.val(ctx.logits);
}

Tensor ns_conv_forward(const Tensor& kernels, const SimilarityMatrix& ms, const Tensor& x,
                       int stride, int pad) {
    if (kernels.rank() != 4 || x.rank() != 3 || kernels.dim(1) != x.dim(0))
        throw ShapeError("ns_conv_forward: kernels " + shape_str(kernels.shape()) + " vs input " +
                         shape_str(x.shape()));
    const int K = kernels.dim(0);
    const ConvGeom geom =
        conv_geometry(x.dim(0), x.dim(1), x.dim(2), kernels.dim(2), kernels.dim(3), stride, pad);
    if (ms.dim() != geom.patch_rows())
        throw ShapeError("ns_conv_forward: similarity dimension " + std::to_string(ms.dim()) +
                         " vs patch rows " + std::to_string(geom.patch_rows()));
    Tensor cols({geom.patch_rows(), geom.positions()});
    im2col_sample(x.data(), geom, cols.data());
    const Tensor mcols = ms.apply(cols);
    Tensor y({K, geom.positions()});
    gemm(kernels.data(), K, geom.patch_rows(), false, mcols.data(), geom.patch_rows(),
         geom.positions(), false, y.data(), false);
    return y.reshaped({K, geom.out_h, geom.out_w});
}

SpherePredictor predictor_of(const Model& m, int layer) {
    const LayerSpec& ls = m.spec.layers.at(static_cast<std::size_t>(layer));
    if (ls.kind != LayerSpec::Kind::NsConv || ls.sim_mode != SimMode::Dynamic)
        throw ConfigError("layer " + std::to_string(layer) + " has no dynamic predictor");
    return {&m, layer};
}

int SpherePredictor::output_dim() const {
    return detail::pred_output_dim(model->spec.layers[static_cast<std::size_t>(layer)]);
}

SphereNorm SpherePredictor::norm_mode() const {
    return model->spec.layers[static_cast<std::size_t>(layer)].pred_norm;
}

SimilarityMatrix predict_similarity(const SpherePredictor& pred, const Tensor& x) {
    const Model& m = *pred.model;
    const LayerSpec& ls = m.spec.layers[static_cast<std::size_t>(pred.layer)];
    const auto in_shape = m.layer_input_shape(pred.layer);
    if (x.rank() != 3 || x.shape() != in_shape)
        throw ShapeError("predictor input " + shape_str(x.shape()) + " does not match layer " +
                         std::to_string(pred.layer) + " input " + shape_str(in_shape));
    const int hv = ls.kh * ls.kw;
    const int out_dim = pred.output_dim();
    if (out_dim != hv && out_dim != hv * hv)
        throw ConfigError("predictor output dim " + std::to_string(out_dim) +
                          " is neither HV nor HV^2 for HV = " + std::to_string(hv));

    Graph g;
    ForwardCtx<double> ctx;
    ctx.param_nodes.reserve(m.params.size());
    for (const auto& [name, t] : m.params) ctx.param_nodes.push_back(g.param(t));
    const int xb = g.value(x.reshaped({1, in_shape[0], in_shape[1], in_shape[2]}));
    const int raw = detail::predictor_forward(g, m, ctx, pred.layer, xb, in_shape[0], in_shape[1],
                                              in_shape[2], ls);
    const Tensor out = g.val(raw);  // [1, out_dim]
    if (ls.sim_kind == SimKind::Diagonal) {
        Tensor d({hv});
        for (int i = 0; i < hv; ++i) d[i] = 1.0 + out[i];
        return SimilarityMatrix::diagonal(std::move(d), in_shape[0]);
    }
    Tensor block({hv, hv});
    for (int i = 0; i < hv; ++i)
        for (int j = 0; j < hv; ++j) block(i, j) = out[i * hv + j] + (i == j ? 1.0 : 0.0);
    return SimilarityMatrix::unconstrained(std::move(block), in_shape[0]);
}

Tensor adapt_input(const Model& m, const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("adapt_input expects CxHxW, got " + shape_str(x.shape()));
    const std::string aname = adapter_param_name(x.dim(0), x.dim(1), x.dim(2));
    const int aidx = m.param_index(aname);
    if (aidx < 0)
        throw ConfigError("no adapter registered for input shape " + shape_str(x.shape()));
    const Tensor& a = m.params[static_cast<std::size_t>(aidx)].second;
    // 1x1 convolution: [Cfix x C] . [C x HW]
    Tensor out({a.dim(0), x.dim(1) * x.dim(2)});
    gemm(a.data(), a.dim(0), a.dim(1), false, x.data(), x.dim(0), x.dim(1) * x.dim(2), false,
         out.data(), false);
    return out.reshaped({a.dim(0), x.dim(1), x.dim(2)});
}

Model fold_static_model(const Model& m) {
    Model folded;
    folded.spec = m.spec;
    for (auto& ls : folded.spec.layers) {
        if (ls.kind != LayerSpec::Kind::NsConv) continue;
        if (ls.sim_mode == SimMode::Dynamic)
            throw ConfigError("cannot fold a dynamic similarity layer");
        ls.sim_kind = SimKind::Identity;
        ls.per_patch = false;
    }
    // copy parameters and buffers, dropping the similarity ones
    for (const auto& [name, t] : m.params) {
        if (is_similarity_param(name)) continue;
        folded.params.emplace_back(name, t);
    }
    for (const auto& [name, t] : m.buffers) {
        if (is_similarity_param(name)) continue;  // sim.Dr shadows vanish with the fold
        folded.buffers.emplace_back(name, t);
    }
    // fold M^T into the kernels of every non-identity static layer
    for (int li = 0; li < static_cast<int>(m.spec.layers.size()); ++li) {
        const LayerSpec& ls = m.spec.layers[static_cast<std::size_t>(li)];
        if (ls.kind != LayerSpec::Kind::NsConv || ls.sim_kind == SimKind::Identity) continue;
        const SimilarityMatrix sim = m.static_similarity(li);
        Tensor& w = folded.param(layer_prefix(li) + "conv.w");
        const int K = w.dim(0);
        const int chv = w.dim(1) * w.dim(2) * w.dim(3);
        for (int k = 0; k < K; ++k) {
            Tensor wk({chv});
            for (int i = 0; i < chv; ++i) wk[i] = w[k * chv + i];
            const Tensor fk = sim.fold(wk);
            for (int i = 0; i < chv; ++i) w[k * chv + i] = fk[i];
        }
    }
    return folded;
}

double quadratic_toy_forward(const Tensor& wp, const Tensor& w, const Tensor& x) {
    if (!wp.same_shape(w))
        throw ShapeError("quadratic toy: W' " + shape_str(wp.shape()) + " vs W " +
                         shape_str(w.shape()));
    double ww = 0.0, xx = 0.0;
    for (int i = 0; i < w.size(); ++i) ww += w[i] * wp[i];
    for (int i = 0; i < x.size(); ++i) xx += x[i] * x[i];
    return ww * xx;
}

double sphere_conv(const Tensor& w, const Tensor& x, SphereNorm mode, double eps) {
    if (!w.same_shape(x))
        throw ShapeError("sphere_conv: " + shape_str(w.shape()) + " vs " + shape_str(x.shape()));
    if (!(eps > 0.0)) throw ArgumentError("sphere_conv: eps must be positive");
    double dot = 0.0, wn = 0.0, xn = 0.0;
    for (int i = 0; i < w.size(); ++i) {
        dot += w[i] * x[i];
        wn += w[i] * w[i];
        xn += x[i] * x[i];
    }
    switch (mode) {
        case SphereNorm::Both:
            return dot / ((std::sqrt(wn) + eps) * (std::sqrt(xn) + eps));
        case SphereNorm::XOnly:
            return dot / (std::sqrt(xn) + eps);
        case SphereNorm::None:
            return dot;
    }
    throw ArgumentError("unknown sphere mode");
}

Model plain_twin(const Model& m) {
    Model twin;
    twin.spec = m.spec;
    for (auto& ls : twin.spec.layers) {
        if (ls.kind != LayerSpec::Kind::NsConv) continue;
        ls.sim_mode = SimMode::Static;
        ls.sim_kind = SimKind::Identity;
        ls.per_patch = false;
    }
    for (const auto& [name, t] : m.params) {
        if (is_similarity_param(name) || is_predictor_param(name)) continue;
        twin.params.emplace_back(name, t);
    }
    for (const auto& [name, t] : m.buffers) {
        if (is_similarity_param(name)) continue;
        twin.buffers.emplace_back(name, t);
    }
    return twin;
}

}  // namespace nsl
