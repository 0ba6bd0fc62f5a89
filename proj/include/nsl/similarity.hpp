#pragma once

#include <optional>
#include <string>

#include "nsl/tensor.hpp"

namespace nsl {

/// Realizations of the bilinear similarity matrix M. Every kind describes one
/// HV x HV block M_s that is expanded block-diagonally across C identical
/// channel blocks; the full C.HV x C.HV matrix is never materialized outside
/// test oracles.
enum class SimKind {
    Identity,
    Diagonal,             // block = diag(d), d of length HV
    Unconstrained,        // dense HV x HV block
    BlockDiagonalShared,  // dense HV x HV block, the named Eq.-2 structure
    CholeskyPSD,          // block = L L^T with lower-triangular L
    ShapeMasked,          // block = diag(D) R, D = threshold(D_r, alpha)
};

std::string sim_kind_name(SimKind kind);
SimKind sim_kind_from_name(const std::string& name);

/// Real-valued shadow behind the Boolean kernel-shape mask. Only the mask
/// D = (d_r > alpha) enters any computation; the shadow exists to absorb the
/// noisy gradient steps.
struct ShapeShadow {
    Tensor d_r;
    double alpha = 0.5;
};

/// Strict-threshold Boolean mask: 1 where d_r > alpha, else 0 (v == alpha
/// gives 0).
Tensor shape_mask(const ShapeShadow& shadow);

/// One shadow step: d_r <- d_r - eta * grad_d.
ShapeShadow update_shape_shadow(const ShapeShadow& shadow, const Tensor& grad_d, double eta);

class SimilarityMatrix {
public:
    static SimilarityMatrix identity(int channels, int patch_size);
    static SimilarityMatrix diagonal(Tensor d, int channels);
    static SimilarityMatrix unconstrained(Tensor block, int channels);
    static SimilarityMatrix block_shared(Tensor block, int channels);
    static SimilarityMatrix cholesky(Tensor lower, int channels);
    static SimilarityMatrix shape_masked(ShapeShadow shadow, Tensor r, int channels);
    /// ShapeMasked with the shadow not yet provided; any realization attempt
    /// raises StateError until a shadow is set.
    static SimilarityMatrix shape_masked_unset(Tensor r, int channels);

    SimKind kind() const { return kind_; }
    int channels() const { return channels_; }
    int patch_size() const { return patch_; }
    int dim() const { return channels_ * patch_; }

    /// Stored representation: d for Diagonal, the block for the dense kinds,
    /// L for CholeskyPSD, R for ShapeMasked. Empty for Identity.
    const Tensor& stored() const { return stored_; }
    Tensor& stored() { return stored_; }

    bool has_shadow() const { return shadow_.has_value(); }
    const ShapeShadow& shadow() const;
    void set_shadow(ShapeShadow shadow);

    /// The realized HV x HV block (diag(d), M_s, L L^T, diag(D) R, ...).
    /// Small by construction; used for folding, penalties and inspection.
    Tensor realized_block() const;

    /// Apply the block-diagonal similarity to patch columns [C.HV x P]
    /// without expanding the full matrix.
    Tensor apply(const Tensor& cols) const;

    /// w^T M x, exploiting the structure (O(C.HV) for Diagonal).
    double bilinear(const Tensor& w, const Tensor& x) const;

    /// Equivalent folded kernel M^T w.
    Tensor fold(const Tensor& w) const;

private:
    SimilarityMatrix(SimKind kind, int channels, int patch, Tensor stored)
        : kind_(kind), channels_(channels), patch_(patch), stored_(std::move(stored)) {}

    void check_vector(const Tensor& v, const char* what) const;

    SimKind kind_;
    int channels_;
    int patch_;
    Tensor stored_;
    std::optional<ShapeShadow> shadow_;
};

/// Free-function forms of the core operations.
double bilinear_score(const Tensor& w, const SimilarityMatrix& m, const Tensor& x);
Tensor apply_similarity(const SimilarityMatrix& m, const Tensor& cols);
Tensor fold_kernel(const SimilarityMatrix& m, const Tensor& w);

/// Kernel-shape factorization M_s = diag(D) . R from an explicit 0/1 mask.
SimilarityMatrix compose_shape_similarity(const Tensor& mask, Tensor r, int channels = 1);

/// PSD block from a lower-triangular factor; nonzero upper entries are a
/// contract violation.
SimilarityMatrix psd_block(const Tensor& lower, int channels = 1);

/// lambda * sum of |entries| of the realized block (one block, not C copies).
/// Static similarity only; the dynamic predictor path never adds this term.
double l1_penalty(const SimilarityMatrix& m, double lambda);

/// Keep the k largest-magnitude entries of the stored representation, zero
/// the rest; ties keep the lowest flat index first.
SimilarityMatrix hard_sparsify(const SimilarityMatrix& m, int k);

}  // namespace nsl
