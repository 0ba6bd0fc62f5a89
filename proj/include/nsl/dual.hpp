#pragma once

#include <cmath>

namespace nsl {

/// Forward-mode scalar: value plus one tangent component. Instantiating the
/// tensor/graph machinery with Dual and seeding tangents on a parameter
/// direction u makes every computed gradient carry d(grad)/d(direction) in
/// its tangent, i.e. exact Hessian-vector products through an unmodified
/// forward+backward pass. Comparisons look at the value only, so branch
/// decisions (relu masks, argmax pooling) match the double-valued run.
struct Dual {
    double v = 0.0;
    double t = 0.0;

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit by design
    Dual(double value, double tangent) : v(value), t(tangent) {}

    Dual& operator+=(const Dual& o) {
        v += o.v;
        t += o.t;
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        t -= o.t;
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        t = t * o.v + v * o.t;
        v *= o.v;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        t = (t * o.v - v * o.t) / (o.v * o.v);
        v /= o.v;
        return *this;
    }
    Dual operator-() const { return {-v, -t}; }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }

inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }
inline bool operator!=(const Dual& a, const Dual& b) { return a.v != b.v; }

inline Dual sqrt(const Dual& a) {
    const double r = std::sqrt(a.v);
    return {r, r > 0.0 ? a.t / (2.0 * r) : 0.0};
}
inline Dual exp(const Dual& a) {
    const double e = std::exp(a.v);
    return {e, e * a.t};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.t / a.v}; }
inline Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }

/// Scalar value extraction shared by double and Dual code paths.
inline double scalar_value(double x) { return x; }
inline double scalar_value(const Dual& x) { return x.v; }

inline bool scalar_finite(double x) { return std::isfinite(x); }
inline bool scalar_finite(const Dual& x) { return std::isfinite(x.v) && std::isfinite(x.t); }

}  // namespace nsl
