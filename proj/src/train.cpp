#include "nsl/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace nsl {

Tensor make_batch(const Dataset& ds, const std::vector<int>& indices) {
    if (indices.empty()) throw ArgumentError("make_batch: empty index list");
    const Tensor& first = ds.images[static_cast<std::size_t>(indices[0])];
    Tensor batch({static_cast<int>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
    const int n = first.size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Tensor& img = ds.images[static_cast<std::size_t>(indices[b])];
        for (int i = 0; i < n; ++i) batch[static_cast<int>(b) * n + i] = img[i];
    }
    return batch;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    Graph g;
    const int node = softmax_cross_entropy(g, g.value(logits), labels);
    return g.val(node)[0];
}

void sgd_momentum_step(Tensor& p, const Tensor& grad, Tensor& velocity, double lr, double mu,
                       double dampening, double weight_decay) {
    if (!p.same_shape(grad) || !p.same_shape(velocity))
        throw ShapeError("sgd step: shape mismatch between parameter, gradient, and state");
    for (int i = 0; i < p.size(); ++i) {
        const double g = grad[i] + weight_decay * p[i];
        velocity[i] = mu * velocity[i] + (1.0 - dampening) * g;
        p[i] -= lr * velocity[i];
    }
}

void adam_step(Tensor& p, const Tensor& grad, Tensor& m, Tensor& v, long long t, double lr,
               double beta1, double beta2, double eps) {
    if (!p.same_shape(grad) || !p.same_shape(m) || !p.same_shape(v))
        throw ShapeError("adam step: shape mismatch between parameter, gradient, and state");
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int i = 0; i < p.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mh = m[i] / c1;
        const double vh = v[i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

bool name_matches_any(const std::string& name, const std::vector<std::string>& patterns) {
    for (const auto& pat : patterns)
        if (!pat.empty() && name.find(pat) != std::string::npos) return true;
    return false;
}

namespace {

void validate_config(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw ArgumentError("batch_size must be positive");
    if (cfg.epochs < 0) throw ArgumentError("epochs must be non-negative");
    if (!(cfg.decay > 0.0 && cfg.decay <= 1.0))
        throw ArgumentError("lr decay factor must be in (0,1]");
    for (std::size_t i = 1; i < cfg.milestones.size(); ++i)
        if (cfg.milestones[i] <= cfg.milestones[i - 1])
            throw ArgumentError("lr milestones must be strictly increasing");
    if (cfg.optimizer != "sgd" && cfg.optimizer != "adam")
        throw ArgumentError("unknown optimizer '" + cfg.optimizer + "'");
}

// Keep Cholesky factors canonical after unconstrained updates.
void project_similarity_params(Model& model) {
    for (auto& [name, t] : model.params) {
        if (name.find("sim.chol") == std::string::npos) continue;
        for (int i = 0; i < t.dim(0); ++i) {
            for (int j = i + 1; j < t.dim(1); ++j) t(i, j) = 0.0;
            if (t(i, i) < 0.0) t(i, i) = 0.0;
        }
    }
}

std::string param_stats(const Model& model, const Graph& g, const ForwardCtx<double>& ctx) {
    std::ostringstream os;
    double worst = -1.0;
    std::string worst_name;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& t = g.val(ctx.param_nodes[i]);
        double mx = 0.0;
        bool finite = true;
        for (int j = 0; j < t.size(); ++j) {
            mx = std::max(mx, std::abs(t[j]));
            finite = finite && std::isfinite(t[j]);
        }
        if (!finite || mx > worst) {
            worst = mx;
            worst_name = model.params[i].first;
            if (!finite) worst_name += " (non-finite)";
        }
    }
    os << "largest parameter: " << worst_name << " max|.| = " << worst;
    return os.str();
}

}  // namespace

TrainResult train(Model& model, const Dataset& train_set, const Dataset* test_set,
                  const TrainConfig& cfg) {
    validate_config(cfg);
    if (train_set.size() == 0) throw ArgumentError("training dataset is empty");

    std::vector<bool> frozen(model.params.size(), false);
    for (std::size_t i = 0; i < model.params.size(); ++i)
        frozen[i] = name_matches_any(model.params[i].first, cfg.freeze);

    OptimizerState opt;
    opt.kind = cfg.optimizer;
    opt.buf1.resize(model.params.size());
    opt.buf2.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        opt.buf1[i] = Tensor::zeros(model.params[i].second.shape());
        opt.buf2[i] = Tensor::zeros(model.params[i].second.shape());
    }

    Rng data_rng(derive_seed(cfg.seed, 2));
    TrainResult result;
    long long it = 0;
    double lr = cfg.lr;
    std::size_t next_milestone = 0;
    double last_train_acc = 0.0, last_test_acc = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.max_iterations > 0 && it >= cfg.max_iterations) break;
        const std::vector<int> perm = data_rng.permutation(train_set.size());
        for (int start = 0; start < train_set.size(); start += cfg.batch_size) {
            if (cfg.max_iterations > 0 && it >= cfg.max_iterations) break;
            while (next_milestone < cfg.milestones.size() &&
                   it >= cfg.milestones[next_milestone]) {
                lr *= cfg.decay;
                ++next_milestone;
            }
            const int end = std::min(train_set.size(), start + cfg.batch_size);
            std::vector<int> idx(perm.begin() + start, perm.begin() + end);
            const Tensor batch = make_batch(train_set, idx);
            std::vector<int> labels;
            labels.reserve(idx.size());
            for (int i : idx) labels.push_back(train_set.labels[static_cast<std::size_t>(i)]);

            Graph g;
            auto ctx = build_forward<double>(g, model, batch, RunMode::Train);
            int loss = softmax_cross_entropy(g, ctx.logits, labels);
            if (cfg.l1_lambda > 0.0) {
                for (int li = 0; li < static_cast<int>(model.spec.layers.size()); ++li) {
                    const LayerSpec& ls = model.spec.layers[static_cast<std::size_t>(li)];
                    if (ls.kind != LayerSpec::Kind::NsConv || ls.sim_mode != SimMode::Static)
                        continue;
                    const std::string lp = layer_prefix(li);
                    int block = -1;
                    switch (ls.sim_kind) {
                        case SimKind::Diagonal:
                            block = ctx.param_nodes[static_cast<std::size_t>(
                                model.param_index(lp + "sim.diag"))];
                            break;
                        case SimKind::Unconstrained:
                        case SimKind::BlockDiagonalShared:
                            block = ctx.param_nodes[static_cast<std::size_t>(
                                model.param_index(lp + "sim.block"))];
                            break;
                        case SimKind::CholeskyPSD:
                            block = cholesky_product(
                                g, ctx.param_nodes[static_cast<std::size_t>(
                                       model.param_index(lp + "sim.chol"))]);
                            break;
                        case SimKind::ShapeMasked:
                            for (const auto& hook : ctx.shape_hooks)
                                if (hook.layer == li) block = hook.block_node;
                            break;
                        case SimKind::Identity:
                            break;
                    }
                    if (block >= 0) loss = add(g, loss, scale(g, abs_sum(g, block), cfg.l1_lambda));
                }
            }

            const double loss_value = g.val(loss)[0];
            if (!std::isfinite(loss_value))
                throw EvalError("non-finite loss at iteration " + std::to_string(it) + "; " +
                                param_stats(model, g, ctx));

            g.backward(loss);

            double clip_scale = 1.0;
            if (cfg.clip_norm > 0.0) {
                double sq = 0.0;
                for (std::size_t i = 0; i < model.params.size(); ++i) {
                    if (frozen[i]) continue;
                    const auto& gr = g.grad(ctx.param_nodes[i]);
                    for (int j = 0; j < gr.size(); ++j) sq += gr[j] * gr[j];
                }
                const double norm = std::sqrt(sq);
                if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
            }

            ++opt.step;
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                if (frozen[i]) continue;
                Tensor grad = g.grad(ctx.param_nodes[i]);
                if (clip_scale != 1.0) grad *= clip_scale;
                if (opt.kind == "adam")
                    adam_step(model.params[i].second, grad, opt.buf1[i], opt.buf2[i], opt.step,
                              lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
                else
                    sgd_momentum_step(model.params[i].second, grad, opt.buf1[i], lr, cfg.momentum,
                                      cfg.dampening, cfg.weight_decay);
            }
            project_similarity_params(model);

            // Eq.-5 shadow update; forward/backward only ever used the mask.
            for (const auto& hook : ctx.shape_hooks) {
                const int r_node = ctx.param_nodes[static_cast<std::size_t>(hook.r_param)];
                if (name_matches_any(model.params[static_cast<std::size_t>(hook.r_param)].first,
                                     cfg.freeze))
                    continue;
                const Tensor& gms = g.grad(hook.block_node);
                const Tensor& r_old = g.val(r_node);
                const int hv = r_old.dim(0);
                Tensor grad_d({hv});
                for (int i = 0; i < hv; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < hv; ++j) acc += gms(i, j) * r_old(i, j);
                    grad_d[i] = acc;
                }
                const double eta = cfg.shadow_lr > 0.0 ? cfg.shadow_lr : lr;
                Tensor& dr = model.buffer(hook.shadow_buffer);
                ShapeShadow updated = update_shape_shadow({dr, 0.5}, grad_d, eta);
                dr = updated.d_r;
            }

            if (cfg.update_bn_stats) {
                for (const auto& hook : ctx.bn_hooks) {
                    const std::string lp = layer_prefix(hook.layer);
                    Tensor& rm = model.buffer(lp + "bn.mean");
                    Tensor& rv = model.buffer(lp + "bn.var");
                    const Tensor bm = values_of(hook.stats->mean);
                    const Tensor bv = values_of(hook.stats->var);
                    for (int i = 0; i < rm.size(); ++i) {
                        rm[i] = cfg.bn_momentum * rm[i] + (1.0 - cfg.bn_momentum) * bm[i];
                        rv[i] = cfg.bn_momentum * rv[i] + (1.0 - cfg.bn_momentum) * bv[i];
                    }
                }
            }

            ++it;
            result.trace.push_back(
                {it, epoch, loss_value, lr, last_train_acc, last_test_acc});
        }
        if (cfg.eval_each_epoch) {
            last_train_acc = accuracy(model, train_set);
            if (test_set) last_test_acc = accuracy(model, *test_set);
            if (!result.trace.empty()) {
                result.trace.back().train_acc = last_train_acc;
                result.trace.back().test_acc = last_test_acc;
            }
        }
    }
    result.iterations = it;
    return result;
}

double evaluate(const Model& model, const Dataset& ds) {
    if (ds.size() == 0) throw ArgumentError("evaluation dataset is empty");
    const int chunk = 64;
    int wrong = 0;
    for (int start = 0; start < ds.size(); start += chunk) {
        const int end = std::min(ds.size(), start + chunk);
        std::vector<int> idx(static_cast<std::size_t>(end - start));
        for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
        const Tensor logits = backbone_forward(model, make_batch(ds, idx), RunMode::Eval);
        const int n = logits.dim(1);
        for (int b = 0; b < end - start; ++b) {
            int best = 0;
            for (int j = 1; j < n; ++j)
                if (logits(b, j) > logits(b, best)) best = j;  // ties keep the lowest index
            if (best != ds.labels[static_cast<std::size_t>(start + b)]) ++wrong;
        }
    }
    return static_cast<double>(wrong) / ds.size();
}

double accuracy(const Model& model, const Dataset& ds) { return 1.0 - evaluate(model, ds); }

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArgumentError("cannot open metrics file '" + path + "'");
    out << "iteration,epoch,loss,lr,train_acc,test_acc\n";
    out.precision(17);
    for (const auto& row : trace)
        out << row.iteration << ',' << row.epoch << ',' << row.loss << ',' << row.lr << ','
            << row.train_acc << ',' << row.test_acc << '\n';
}

}  // namespace nsl
