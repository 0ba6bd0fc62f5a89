#include "nsl/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nsl/graph.hpp"

namespace nsl {

std::string sim_kind_name(SimKind kind) {
    switch (kind) {
        case SimKind::Identity: return "identity";
        case SimKind::Diagonal: return "diagonal";
        case SimKind::Unconstrained: return "unconstrained";
        case SimKind::BlockDiagonalShared: return "block_shared";
        case SimKind::CholeskyPSD: return "cholesky_psd";
        case SimKind::ShapeMasked: return "shape_masked";
    }
    throw ArgumentError("unknown similarity kind");
}

SimKind sim_kind_from_name(const std::string& name) {
    if (name == "identity") return SimKind::Identity;
    if (name == "diagonal") return SimKind::Diagonal;
    if (name == "unconstrained") return SimKind::Unconstrained;
    if (name == "block_shared") return SimKind::BlockDiagonalShared;
    if (name == "cholesky_psd") return SimKind::CholeskyPSD;
    if (name == "shape_masked") return SimKind::ShapeMasked;
    throw ArgumentError("unknown similarity kind '" + name + "'");
}

Tensor shape_mask(const ShapeShadow& shadow) {
    Tensor mask(shadow.d_r.shape());
    for (int i = 0; i < mask.size(); ++i) mask[i] = shadow.d_r[i] > shadow.alpha ? 1.0 : 0.0;
    return mask;
}

ShapeShadow update_shape_shadow(const ShapeShadow& shadow, const Tensor& grad_d, double eta) {
    if (!(eta > 0.0)) throw ArgumentError("shape shadow step size must be positive");
    if (!shadow.d_r.same_shape(grad_d))
        throw ShapeError("shadow gradient shape " + shape_str(grad_d.shape()) +
                         " does not match d_r " + shape_str(shadow.d_r.shape()));
    ShapeShadow out = shadow;
    for (int i = 0; i < out.d_r.size(); ++i) out.d_r[i] -= eta * grad_d[i];
    return out;
}

SimilarityMatrix SimilarityMatrix::identity(int channels, int patch_size) {
    if (channels < 1 || patch_size < 1)
        throw ArgumentError("similarity needs positive channels and patch size");
    return {SimKind::Identity, channels, patch_size, Tensor()};
}

SimilarityMatrix SimilarityMatrix::diagonal(Tensor d, int channels) {
    const int hv = d.size();
    return {SimKind::Diagonal, channels, hv, d.reshaped({hv})};
}

static Tensor require_square(Tensor block, const char* what) {
    if (block.rank() != 2 || block.dim(0) != block.dim(1))
        throw ShapeError(std::string(what) + " block must be square, got " +
                         shape_str(block.shape()));
    return block;
}

SimilarityMatrix SimilarityMatrix::unconstrained(Tensor block, int channels) {
    block = require_square(std::move(block), "unconstrained");
    const int hv = block.dim(0);
    return {SimKind::Unconstrained, channels, hv, std::move(block)};
}

SimilarityMatrix SimilarityMatrix::block_shared(Tensor block, int channels) {
    block = require_square(std::move(block), "block-shared");
    const int hv = block.dim(0);
    return {SimKind::BlockDiagonalShared, channels, hv, std::move(block)};
}

SimilarityMatrix SimilarityMatrix::cholesky(Tensor lower, int channels) {
    lower = require_square(std::move(lower), "cholesky");
    const int hv = lower.dim(0);
    return {SimKind::CholeskyPSD, channels, hv, std::move(lower)};
}

SimilarityMatrix SimilarityMatrix::shape_masked(ShapeShadow shadow, Tensor r, int channels) {
    r = require_square(std::move(r), "shape-masked");
    if (shadow.d_r.size() != r.dim(0))
        throw ShapeError("shadow length " + std::to_string(shadow.d_r.size()) +
                         " does not match block size " + std::to_string(r.dim(0)));
    SimilarityMatrix m{SimKind::ShapeMasked, channels, r.dim(0), std::move(r)};
    m.shadow_ = std::move(shadow);
    return m;
}

SimilarityMatrix SimilarityMatrix::shape_masked_unset(Tensor r, int channels) {
    r = require_square(std::move(r), "shape-masked");
    return {SimKind::ShapeMasked, channels, r.dim(0), std::move(r)};
}

const ShapeShadow& SimilarityMatrix::shadow() const {
    if (!shadow_) throw StateError("shape-masked similarity has no shadow D_r set");
    return *shadow_;
}

void SimilarityMatrix::set_shadow(ShapeShadow shadow) {
    if (shadow.d_r.size() != patch_)
        throw ShapeError("shadow length " + std::to_string(shadow.d_r.size()) +
                         " does not match patch size " + std::to_string(patch_));
    shadow_ = std::move(shadow);
}

Tensor SimilarityMatrix::realized_block() const {
    switch (kind_) {
        case SimKind::Identity:
            return Tensor::identity(patch_);
        case SimKind::Diagonal: {
            Tensor block({patch_, patch_});
            for (int i = 0; i < patch_; ++i) block(i, i) = stored_[i];
            return block;
        }
        case SimKind::Unconstrained:
        case SimKind::BlockDiagonalShared:
            return stored_;
        case SimKind::CholeskyPSD: {
            Tensor block({patch_, patch_});
            for (int i = 0; i < patch_; ++i)
                for (int j = 0; j < patch_; ++j) {
                    double acc = 0.0;
                    for (int k = 0; k <= std::min(i, j); ++k) acc += stored_(i, k) * stored_(j, k);
                    block(i, j) = acc;
                }
            return block;
        }
        case SimKind::ShapeMasked: {
            const Tensor mask = shape_mask(shadow());
            Tensor block({patch_, patch_});
            for (int i = 0; i < patch_; ++i)
                for (int j = 0; j < patch_; ++j) block(i, j) = mask[i] * stored_(i, j);
            return block;
        }
    }
    throw ArgumentError("unknown similarity kind");
}

void SimilarityMatrix::check_vector(const Tensor& v, const char* what) const {
    if (v.size() != dim())
        throw ShapeError(std::string(what) + " length " + std::to_string(v.size()) +
                         " does not match similarity dimension " + std::to_string(dim()) + " (" +
                         std::to_string(channels_) + " channels x patch " +
                         std::to_string(patch_) + ")");
}

Tensor SimilarityMatrix::apply(const Tensor& cols) const {
    if (cols.rank() != 2 || cols.dim(0) != dim())
        throw ShapeError("apply_similarity: columns " + shape_str(cols.shape()) +
                         " do not match similarity dimension " + std::to_string(dim()));
    const int P = cols.dim(1);
    switch (kind_) {
        case SimKind::Identity:
            return cols;
        case SimKind::Diagonal: {
            Tensor out(cols.shape());
            for (int r = 0; r < cols.dim(0); ++r) {
                const double s = stored_[r % patch_];
                for (int p = 0; p < P; ++p) out(r, p) = s * cols(r, p);
            }
            return out;
        }
        case SimKind::Unconstrained:
        case SimKind::BlockDiagonalShared: {
            Tensor out(cols.shape());
            for (int c = 0; c < channels_; ++c) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(c) * patch_ * P;
                gemm(stored_.data(), patch_, patch_, false, cols.data() + off, patch_, P, false,
                     out.data() + off, false);
            }
            return out;
        }
        case SimKind::CholeskyPSD: {
            // (L L^T) x = L (L^T x), per channel block.
            Tensor out(cols.shape());
            Tensor tmp({patch_, P});
            for (int c = 0; c < channels_; ++c) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(c) * patch_ * P;
                gemm(stored_.data(), patch_, patch_, true, cols.data() + off, patch_, P, false,
                     tmp.data(), false);
                gemm(stored_.data(), patch_, patch_, false, tmp.data(), patch_, P, false,
                     out.data() + off, false);
            }
            return out;
        }
        case SimKind::ShapeMasked: {
            const Tensor mask = shape_mask(shadow());
            Tensor out(cols.shape());
            for (int c = 0; c < channels_; ++c) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(c) * patch_ * P;
                gemm(stored_.data(), patch_, patch_, false, cols.data() + off, patch_, P, false,
                     out.data() + off, false);
                for (int i = 0; i < patch_; ++i)
                    for (int p = 0; p < P; ++p) out[static_cast<int>(off) + i * P + p] *= mask[i];
            }
            return out;
        }
    }
    throw ArgumentError("unknown similarity kind");
}

double SimilarityMatrix::bilinear(const Tensor& w, const Tensor& x) const {
    check_vector(w, "bilinear weight");
    check_vector(x, "bilinear input");
    switch (kind_) {
        case SimKind::Identity: {
            double acc = 0.0;
            for (int i = 0; i < w.size(); ++i) acc += w[i] * x[i];
            return acc;
        }
        case SimKind::Diagonal: {
            double acc = 0.0;
            for (int i = 0; i < w.size(); ++i) acc += w[i] * stored_[i % patch_] * x[i];
            return acc;
        }
        default: {
            const Tensor mx = apply(x.reshaped({dim(), 1}));
            double acc = 0.0;
            for (int i = 0; i < w.size(); ++i) acc += w[i] * mx[i];
            return acc;
        }
    }
}

Tensor SimilarityMatrix::fold(const Tensor& w) const {
    check_vector(w, "fold kernel");
    Tensor out(w.shape());
    switch (kind_) {
        case SimKind::Identity:
            return w;
        case SimKind::Diagonal:
            for (int i = 0; i < w.size(); ++i) out[i] = stored_[i % patch_] * w[i];
            return out;
        case SimKind::Unconstrained:
        case SimKind::BlockDiagonalShared:
            for (int c = 0; c < channels_; ++c)
                gemm(stored_.data(), patch_, patch_, true, w.data() + c * patch_, patch_, 1, false,
                     out.data() + c * patch_, false);
            return out;
        case SimKind::CholeskyPSD: {
            // (L L^T)^T w = L (L^T w)
            Tensor tmp({patch_, 1});
            for (int c = 0; c < channels_; ++c) {
                gemm(stored_.data(), patch_, patch_, true, w.data() + c * patch_, patch_, 1, false,
                     tmp.data(), false);
                gemm(stored_.data(), patch_, patch_, false, tmp.data(), patch_, 1, false,
                     out.data() + c * patch_, false);
            }
            return out;
        }
        case SimKind::ShapeMasked: {
            // (diag(D) R)^T w = R^T diag(D) w
            const Tensor mask = shape_mask(shadow());
            Tensor masked({patch_, 1});
            for (int c = 0; c < channels_; ++c) {
                for (int i = 0; i < patch_; ++i) masked[i] = mask[i] * w[c * patch_ + i];
                gemm(stored_.data(), patch_, patch_, true, masked.data(), patch_, 1, false,
                     out.data() + c * patch_, false);
            }
            return out;
        }
    }
    throw ArgumentError("unknown similarity kind");
}

double bilinear_score(const Tensor& w, const SimilarityMatrix& m, const Tensor& x) {
    return m.bilinear(w, x);
}

Tensor apply_similarity(const SimilarityMatrix& m, const Tensor& cols) { return m.apply(cols); }

Tensor fold_kernel(const SimilarityMatrix& m, const Tensor& w) { return m.fold(w); }

SimilarityMatrix compose_shape_similarity(const Tensor& mask, Tensor r, int channels) {
    if (mask.size() != r.dim(0))
        throw ShapeError("mask length " + std::to_string(mask.size()) +
                         " does not match block size " + shape_str(r.shape()));
    ShapeShadow shadow{mask.reshaped({mask.size()}), 0.5};
    return SimilarityMatrix::shape_masked(std::move(shadow), std::move(r), channels);
}

SimilarityMatrix psd_block(const Tensor& lower, int channels) {
    if (lower.rank() != 2 || lower.dim(0) != lower.dim(1))
        throw ShapeError("psd_block expects a square matrix, got " + shape_str(lower.shape()));
    for (int i = 0; i < lower.dim(0); ++i)
        for (int j = i + 1; j < lower.dim(1); ++j)
            if (lower(i, j) != 0.0)
                throw ContractError("psd_block: upper-triangular entry (" + std::to_string(i) +
                                    "," + std::to_string(j) + ") is nonzero");
    return SimilarityMatrix::cholesky(lower, channels);
}

double l1_penalty(const SimilarityMatrix& m, double lambda) {
    if (lambda < 0.0) throw ArgumentError("l1 penalty weight must be non-negative");
    double acc = 0.0;
    switch (m.kind()) {
        case SimKind::Identity:
            acc = m.patch_size();  // |I| summed over one block
            break;
        case SimKind::Diagonal:
            for (int i = 0; i < m.stored().size(); ++i) acc += std::abs(m.stored()[i]);
            break;
        case SimKind::Unconstrained:
        case SimKind::BlockDiagonalShared:
            for (int i = 0; i < m.stored().size(); ++i) acc += std::abs(m.stored()[i]);
            break;
        case SimKind::CholeskyPSD:
        case SimKind::ShapeMasked: {
            const Tensor block = m.realized_block();
            for (int i = 0; i < block.size(); ++i) acc += std::abs(block[i]);
            break;
        }
    }
    return lambda * acc;
}

SimilarityMatrix hard_sparsify(const SimilarityMatrix& m, int k) {
    const int count = m.stored().size();
    if (k < 0 || k > count)
        throw ArgumentError("hard_sparsify: k = " + std::to_string(k) +
                            " outside [0, " + std::to_string(count) + "]");
    if (m.kind() == SimKind::Identity) return m;  // nothing stored; k can only be 0
    SimilarityMatrix out = m;
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(m.stored()[a]) > std::abs(m.stored()[b]);
    });
    Tensor& dst = out.stored();
    dst.fill(0.0);
    for (int i = 0; i < k; ++i) dst[order[static_cast<std::size_t>(i)]] =
        m.stored()[order[static_cast<std::size_t>(i)]];
    return out;
}

}  // namespace nsl
