#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nsl/dual.hpp"
#include "nsl/error.hpp"

namespace nsl {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense n-dimensional array, row-major, templated on scalar. The public
/// alias `Tensor` is fixed to double: all user-visible arithmetic is 64-bit.
template <class S>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), S(0));
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, S value) {
        TensorT t(std::move(shape));
        for (auto& x : t.data_) x = value;
        return t;
    }

    static TensorT from(std::vector<S> data, std::vector<int> shape) {
        TensorT t;
        t.shape_ = std::move(shape);
        if (checked_size(t.shape_) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(t.shape_));
        t.data_ = std::move(data);
        return t;
    }

    static TensorT scalar(S value) { return full({1}, value); }

    /// HVxHV identity block.
    static TensorT identity(int n) {
        TensorT t({n, n});
        for (int i = 0; i < n; ++i) t(i, i) = S(1);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }
    bool is_scalar() const { return data_.size() == 1; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& storage() { return data_; }
    const std::vector<S>& storage() const { return data_; }

    S& operator[](int i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator[](int i) const { return data_[static_cast<std::size_t>(i)]; }

    S& operator()(int i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator()(int i) const { return data_[static_cast<std::size_t>(i)]; }

    S& operator()(int i, int j) { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
    const S& operator()(int i, int j) const {
        return data_[static_cast<std::size_t>(i * dim(1) + j)];
    }

    S& operator()(int i, int j, int k) {
        return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    const S& operator()(int i, int j, int k) const {
        return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }

    S& operator()(int i, int j, int k, int l) {
        return data_[static_cast<std::size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
    }
    const S& operator()(int i, int j, int k, int l) const {
        return data_[static_cast<std::size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
    }

    /// Same storage, new shape (sizes must agree).
    TensorT reshaped(std::vector<int> shape) const {
        if (checked_size(shape) != data_.size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool all_finite() const {
        for (const auto& x : data_)
            if (!scalar_finite(x)) return false;
        return true;
    }

    TensorT& operator+=(const TensorT& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    TensorT& operator-=(const TensorT& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    TensorT& operator*=(S c) {
        for (auto& x : data_) x *= c;
        return *this;
    }

    void fill(S value) {
        for (auto& x : data_) x = value;
    }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor shape entries must be positive, got " + shape_str(shape));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    void require_same_shape(const TensorT& o, const char* op) const {
        if (!same_shape(o))
            throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) +
                             " vs " + shape_str(o.shape_));
    }

    std::vector<int> shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<double>;

/// Mutable Eigen view of a 2-D double tensor (fast matmul path).
inline Eigen::Map<RowMatrixXd> mat_view(Tensor& t) {
    if (t.rank() != 2) throw ShapeError("mat_view needs a 2-D tensor, got " + shape_str(t.shape()));
    return {t.data(), t.dim(0), t.dim(1)};
}

inline Eigen::Map<const RowMatrixXd> mat_view(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("mat_view needs a 2-D tensor, got " + shape_str(t.shape()));
    return {t.data(), t.dim(0), t.dim(1)};
}

/// View of an arbitrary tensor as a rows x cols matrix over its flat storage.
inline Eigen::Map<const RowMatrixXd> flat_view(const Tensor& t, int rows, int cols) {
    if (rows * cols != t.size())
        throw ShapeError("flat_view " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " does not cover " + shape_str(t.shape()));
    return {t.data(), rows, cols};
}

/// Lift a double tensor into scalar type S, with an optional tangent seed
/// (used by the dual-mode Hessian-vector-product pass).
template <class S>
TensorT<S> lift(const Tensor& x, const Tensor* tangent = nullptr) {
    if constexpr (std::is_same_v<S, double>) {
        (void)tangent;
        return x;
    } else {
        TensorT<S> out(x.shape());
        for (int i = 0; i < x.size(); ++i)
            out[i] = S(x[i], tangent ? (*tangent)[i] : 0.0);
        return out;
    }
}

inline Tensor values_of(const Tensor& x) { return x; }

inline Tensor values_of(const TensorT<Dual>& x) {
    Tensor out(x.shape());
    for (int i = 0; i < x.size(); ++i) out[i] = x[i].v;
    return out;
}

inline Tensor tangents_of(const TensorT<Dual>& x) {
    Tensor out(x.shape());
    for (int i = 0; i < x.size(); ++i) out[i] = x[i].t;
    return out;
}

}  // namespace nsl
