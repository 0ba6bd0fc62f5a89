// Test-only reference implementations. Everything here is deliberately
// written as plain nested loops over definitions, independent of the library
// code paths it is used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nsl/rng.hpp"
#include "nsl/tensor.hpp"

namespace oracle {

// C[m x n] = A[m x k] . B[k x n], triple loop.
inline nsl::Tensor matmul(const nsl::Tensor& a, const nsl::Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    nsl::Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += a(i, kk) * b(kk, j);
            c(i, j) = acc;
        }
    return c;
}

// Direct zero-padded sliding-window convolution (correlation, as in CNNs):
// x[C x H x W], w[K x C x kh x kw] -> [K x Ho x Wo].
inline nsl::Tensor conv2d(const nsl::Tensor& x, const nsl::Tensor& w, int stride, int pad) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    nsl::Tensor y({K, Ho, Wo});
    for (int k = 0; k < K; ++k)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            const int iy = oy * stride - pad + dy;
                            const int ix = ox * stride - pad + dx;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += w(k, c, dy, dx) * x(c, iy, ix);
                        }
                y(k, oy, ox) = acc;
            }
    return y;
}

// w^T M x with a dense matrix M, via explicit loops.
inline double bilinear(const nsl::Tensor& w, const nsl::Tensor& m, const nsl::Tensor& x) {
    const int n = w.size();
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) acc += w[i] * m(i, j) * x[j];
    return acc;
}

// Block-diagonal expansion: C copies of block[HV x HV] on the diagonal.
inline nsl::Tensor expand_blockdiag(const nsl::Tensor& block, int channels) {
    const int hv = block.dim(0);
    const int n = channels * hv;
    nsl::Tensor m({n, n});
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < hv; ++i)
            for (int j = 0; j < hv; ++j) m(c * hv + i, c * hv + j) = block(i, j);
    return m;
}

// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method.
// Used as the independent route against SVD-based results.
inline std::vector<double> symmetric_eigenvalues(nsl::Tensor a, int sweeps = 64) {
    const int n = a.dim(0);
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ev[static_cast<std::size_t>(i)] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

inline nsl::Tensor random_tensor(std::vector<int> shape, nsl::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
    nsl::Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(const nsl::Tensor& a, const nsl::Tensor& b) {
    double m = 0.0;
    for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace oracle
