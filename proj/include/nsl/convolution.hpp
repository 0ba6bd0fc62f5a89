#pragma once

#include <string>

#include "nsl/tensor.hpp"

namespace nsl {

/// Geometry of one 2-D convolution: input plane, kernel, stride, zero pad.
/// Patch rows follow the fixed flattening convention used everywhere in this
/// library: per-channel kh x kw blocks flattened row-major, channel blocks
/// concatenated in channel order.
struct ConvGeom {
    int channels = 0;
    int in_h = 0, in_w = 0;
    int kh = 0, kw = 0;
    int stride = 1, pad = 0;
    int out_h = 0, out_w = 0;

    int patch_rows() const { return channels * kh * kw; }
    int positions() const { return out_h * out_w; }
};

inline ConvGeom conv_geometry(int channels, int in_h, int in_w, int kh, int kw, int stride,
                              int pad) {
    if (kh < 1 || kw < 1 || stride < 1 || pad < 0)
        throw ShapeError("invalid convolution parameters: kernel " + std::to_string(kh) + "x" +
                         std::to_string(kw) + ", stride " + std::to_string(stride) + ", pad " +
                         std::to_string(pad));
    ConvGeom g;
    g.channels = channels;
    g.in_h = in_h;
    g.in_w = in_w;
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    g.pad = pad;
    g.out_h = (in_h + 2 * pad - kh) / stride + 1;
    g.out_w = (in_w + 2 * pad - kw) / stride + 1;
    if (in_h + 2 * pad < kh || in_w + 2 * pad < kw || g.out_h <= 0 || g.out_w <= 0)
        throw ShapeError("non-positive convolution output for input " + std::to_string(in_h) +
                         "x" + std::to_string(in_w) + ", kernel " + std::to_string(kh) + "x" +
                         std::to_string(kw) + ", stride " + std::to_string(stride) + ", pad " +
                         std::to_string(pad));
    return g;
}

/// One sample: x is C x H x W flat, cols is patch_rows x positions flat.
template <class S>
void im2col_sample(const S* x, const ConvGeom& g, S* cols) {
    const int P = g.positions();
    for (int c = 0; c < g.channels; ++c) {
        const S* plane = x + static_cast<std::ptrdiff_t>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const int row = (c * g.kh + ky) * g.kw + kx;
                S* dst = cols + static_cast<std::ptrdiff_t>(row) * P;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        const bool inside = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
                        dst[oy * g.out_w + ox] = inside ? plane[iy * g.in_w + ix] : S(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col_sample: scatter-adds column gradients back onto the image.
template <class S>
void col2im_sample_acc(const S* gcols, const ConvGeom& g, S* gx) {
    const int P = g.positions();
    for (int c = 0; c < g.channels; ++c) {
        S* plane = gx + static_cast<std::ptrdiff_t>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const int row = (c * g.kh + ky) * g.kw + kx;
                const S* src = gcols + static_cast<std::ptrdiff_t>(row) * P;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.in_w) continue;
                        plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Patch extraction for a single C x H x W tensor.
inline Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
    if (x.rank() != 3)
        throw ShapeError("im2col expects a CxHxW tensor, got " + shape_str(x.shape()));
    const ConvGeom g = conv_geometry(x.dim(0), x.dim(1), x.dim(2), kh, kw, stride, pad);
    Tensor cols({g.patch_rows(), g.positions()});
    im2col_sample(x.data(), g, cols.data());
    return cols;
}

}  // namespace nsl
