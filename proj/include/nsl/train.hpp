#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsl/network.hpp"

namespace nsl {

/// Labeled image set; images are CxHxW, labels in [0, num_classes).
struct Dataset {
    std::vector<Tensor> images;
    std::vector<int> labels;
    int num_classes = 0;

    int size() const { return static_cast<int>(images.size()); }
};

/// Stack a subset of a dataset into a BxCxHxW batch.
Tensor make_batch(const Dataset& ds, const std::vector<int>& indices);

/// Mean cross-entropy of logits[BxN] against labels, stabilized by row-max
/// subtraction.
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// One SGD-with-momentum step on a single tensor:
/// g <- grad + wd*p;  v <- mu*v + (1-dampening)*g;  p <- p - lr*v.
void sgd_momentum_step(Tensor& p, const Tensor& grad, Tensor& velocity, double lr, double mu,
                       double dampening, double weight_decay);

/// One Adam step (bias-corrected moments); t is the 1-based step count.
void adam_step(Tensor& p, const Tensor& grad, Tensor& m, Tensor& v, long long t, double lr,
               double beta1, double beta2, double eps);

/// Per-parameter optimizer buffers, aligned with a model's parameter order.
struct OptimizerState {
    std::string kind = "sgd";  // sgd | adam
    std::vector<Tensor> buf1;  // momentum (sgd) or first moment (adam)
    std::vector<Tensor> buf2;  // second moment (adam)
    long long step = 0;
};

struct TrainConfig {
    int batch_size = 16;
    int epochs = 1;
    long long max_iterations = 0;  // 0 = run all epochs
    double lr = 0.1;
    std::vector<long long> milestones;  // iteration counts where lr is scaled by decay
    double decay = 0.1;
    std::string optimizer = "sgd";  // sgd | adam
    double momentum = 0.9;
    double dampening = 0.0;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::vector<std::string> freeze;  // substring patterns of parameter names
    std::uint64_t seed = 0;
    double l1_lambda = 0.0;   // l1 on static similarity blocks
    double shadow_lr = 0.0;   // kernel-shape shadow step; 0 = follow the current lr
    double clip_norm = 0.0;   // global-norm gradient clipping; 0 = off
    bool update_bn_stats = true;
    double bn_momentum = 0.9;
    bool eval_each_epoch = true;
};

struct MetricsRow {
    long long iteration = 0;
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> trace;
    long long iterations = 0;
};

/// Mini-batch training. Deterministic under cfg.seed (one seeded permutation
/// per epoch); parameters matching the freeze patterns are never touched.
/// Aborts with EvalError (iteration index + parameter stats) on a non-finite
/// loss.
TrainResult train(Model& model, const Dataset& train_set, const Dataset* test_set,
                  const TrainConfig& cfg);

/// Fraction misclassified under argmax (ties toward the lowest class index).
double evaluate(const Model& model, const Dataset& ds);
double accuracy(const Model& model, const Dataset& ds);

/// Write a metrics trace as CSV (header: iteration,epoch,loss,lr,train_acc,test_acc).
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& trace);

bool name_matches_any(const std::string& name, const std::vector<std::string>& patterns);

}  // namespace nsl
