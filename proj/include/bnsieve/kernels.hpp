#pragma once

// Graph-free numeric kernels. The autograd layer wraps these; inference-only
// paths (feature extraction, statistics capture) call them directly.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bnsieve/error.hpp"
#include "bnsieve/tensor.hpp"

namespace bnsieve::kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct Conv2dSpec {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k || stride == 0)
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out(Shape{a.dim(0), b.dim(1)});
    MapMat(out.ptr(), a.dim(0), b.dim(1)).noalias() =
        CMapMat(a.ptr(), a.dim(0), a.dim(1)) * CMapMat(b.ptr(), b.dim(0), b.dim(1));
    return out;
}

namespace detail {

struct ConvGeom {
    std::size_t n, c, h, w, o, kh, kw, ho, wo, stride, pad;
    [[nodiscard]] std::size_t ckk() const { return c * kh * kw; }
    [[nodiscard]] std::size_t hw_out() const { return ho * wo; }
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& w, Conv2dSpec spec) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()) +
                             " (expected NCHW and OIHW with matching C)");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, spec.stride, spec.pad};
    g.ho = conv_out_size(g.h, g.kh, spec.stride, spec.pad);
    g.wo = conv_out_size(g.w, g.kw, spec.stride, spec.pad);
    return g;
}

// col is [C*KH*KW, HO*WO]
inline void im2col(const double* img, const ConvGeom& g, double* col) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* dst = col + ((c * g.kh + ki) * g.kw + kj) * g.hw_out();
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) - pad;
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                                            jj < static_cast<std::ptrdiff_t>(g.w);
                        dst[oi * g.wo + oj] =
                            inside ? img[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)]
                                   : 0.0;
                    }
                }
            }
}

inline void col2im_add(const double* col, const ConvGeom& g, double* img) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* src = col + ((c * g.kh + ki) * g.kw + kj) * g.hw_out();
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) - pad;
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] +=
                            src[oi * g.wo + oj];
                    }
                }
            }
}

}  // namespace detail

/// NCHW input, OIHW kernel, optional per-output-channel bias (empty tensor = none).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dSpec spec) {
    const auto g = detail::conv_geom(x, w, spec);
    if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.o))
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.o) + " outputs");
    Tensor out(Shape{g.n, g.o, g.ho, g.wo});
    std::vector<double> col(g.ckk() * g.hw_out());
    CMapMat wm(w.ptr(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.ckk()));
    for (std::size_t n = 0; n < g.n; ++n) {
        detail::im2col(x.ptr() + n * g.c * g.h * g.w, g, col.data());
        MapMat om(out.ptr() + n * g.o * g.hw_out(), static_cast<Eigen::Index>(g.o),
                  static_cast<Eigen::Index>(g.hw_out()));
        om.noalias() = wm * CMapMat(col.data(), static_cast<Eigen::Index>(g.ckk()),
                                    static_cast<Eigen::Index>(g.hw_out()));
        if (!bias.empty())
            for (std::size_t o = 0; o < g.o; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
    return out;
}

/// Accumulates input/weight/bias gradients of conv2d; any output pointer may be null.
inline void conv2d_backward(const Tensor& x, const Tensor& w, Conv2dSpec spec, const Tensor& grad_out, Tensor* dx,
                            Tensor* dw, Tensor* db) {
    const auto g = detail::conv_geom(x, w, spec);
    const auto ckk = static_cast<Eigen::Index>(g.ckk());
    const auto hwo = static_cast<Eigen::Index>(g.hw_out());
    const auto oo = static_cast<Eigen::Index>(g.o);
    std::vector<double> col(g.ckk() * g.hw_out());
    CMapMat wm(w.ptr(), oo, ckk);
    for (std::size_t n = 0; n < g.n; ++n) {
        CMapMat gm(grad_out.ptr() + n * g.o * g.hw_out(), oo, hwo);
        if (dw) {
            detail::im2col(x.ptr() + n * g.c * g.h * g.w, g, col.data());
            MapMat(dw->ptr(), oo, ckk).noalias() += gm * CMapMat(col.data(), ckk, hwo).transpose();
        }
        if (db)
            for (std::size_t o = 0; o < g.o; ++o) (*db)[o] += gm.row(static_cast<Eigen::Index>(o)).sum();
        if (dx) {
            MapMat(col.data(), ckk, hwo).noalias() = wm.transpose() * gm;
            detail::col2im_add(col.data(), g, dx->ptr() + n * g.c * g.h * g.w);
        }
    }
}

/// Non-overlapping k x k average pooling on NCHW; trailing rows/cols that do not fill a window are dropped.
inline Tensor avgpool2d(const Tensor& x, std::size_t k) {
    if (x.rank() != 4 || k == 0 || x.dim(2) < k || x.dim(3) < k)
        throw DimensionError("avgpool2d: input " + shape_str(x.shape()) + " with window " + std::to_string(k));
    const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / k, wo = w / k;
    Tensor out(Shape{x.dim(0), x.dim(1), ho, wo});
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
                double s = 0.0;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t b = 0; b < k; ++b) s += x[(p * h + i * k + a) * w + j * k + b];
                out[(p * ho + i) * wo + j] = s * inv;
            }
    return out;
}

inline void avgpool2d_backward(const Shape& in_shape, std::size_t k, const Tensor& grad_out, Tensor& dx) {
    const std::size_t n = in_shape[0] * in_shape[1], h = in_shape[2], w = in_shape[3], ho = h / k, wo = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
                const double gval = grad_out[(p * ho + i) * wo + j] * inv;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t b = 0; b < k; ++b) dx[(p * h + i * k + a) * w + j * k + b] += gval;
            }
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return out;
}

/// Number of elements per channel for an N x C x ... tensor.
inline std::size_t per_channel_inner(const Tensor& x) { return x.size() / (x.dim(0) * x.dim(1)); }

/// y[n,c,...] = x[n,c,...] * scale[c] + shift[c]
inline Tensor affine_scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    if (x.rank() < 2 || scale.size() != x.dim(1) || shift.size() != x.dim(1))
        throw DimensionError("affine_scale_shift: input " + shape_str(x.shape()) + " scale " +
                             shape_str(scale.shape()) + " shift " + shape_str(shift.shape()));
    Tensor out(x.shape());
    const std::size_t c_count = x.dim(1), inner = per_channel_inner(x);
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < c_count; ++c) {
            const std::size_t base = (n * c_count + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = x[base + i] * scale[c] + shift[c];
        }
    return out;
}

/// Per-channel mean and population variance over batch and spatial axes.
struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> var;
};

inline ChannelStats channel_stats(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("channel_stats: input " + shape_str(x.shape()) + " has no channel axis");
    const std::size_t c_count = x.dim(1), inner = per_channel_inner(x), n = x.dim(0);
    const double m = static_cast<double>(n * inner);
    ChannelStats s{std::vector<double>(c_count, 0.0), std::vector<double>(c_count, 0.0)};
    for (std::size_t c = 0; c < c_count; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) acc += x[(b * c_count + c) * inner + i];
        const double mu = acc / m;
        double sq = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
                const double d = x[(b * c_count + c) * inner + i] - mu;
                sq += d * d;
            }
        s.mean[c] = mu;
        s.var[c] = sq / m;
    }
    return s;
}

/// Row-wise log-softmax of a B x C matrix.
inline Tensor log_softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw DimensionError("log_softmax: expected B x C, got " + shape_str(logits.shape()));
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < b; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits[r * c + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(logits[r * c + j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = logits[r * c + j] - lse;
    }
    return out;
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace bnsieve::kernels
