#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "facelet/core/autograd.hpp"
#include "facelet/core/tensor.hpp"

// Differentiable operations. Image-like tensors are [C,H,W] or batched [N,C,H,W];
// every op preserves whichever form it was given.

namespace facelet {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
    std::size_t n, c, h, w;
    std::size_t co, k;
    std::size_t pad, stride;
    std::size_t ho, wo;
    std::size_t rows() const { return c * k * k; }
    std::size_t cols() const { return n * ho * wo; }
};

/// Unfolds input patches into a [C*k*k, N*Ho*Wo] row-major matrix.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const std::size_t plane = g.ho * g.wo;
    const std::size_t ncols = g.cols();
    const long pad = static_cast<long>(g.pad);
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((ci * g.k + ky) * g.k + kx) * ncols;
                for (std::size_t b = 0; b < g.n; ++b) {
                    const T* xin = x + (b * g.c + ci) * g.h * g.w;
                    T* out = row + b * plane;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - pad;
                        T* orow = out + oy * g.wo;
                        if (iy < 0 || iy >= static_cast<long>(g.h)) {
                            std::fill(orow, orow + g.wo, T(0));
                            continue;
                        }
                        const T* irow = xin + static_cast<std::size_t>(iy) * g.w;
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                            orow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : irow[ix];
                        }
                    }
                }
            }
}

/// Adjoint of im2col: scatters-and-adds columns back into the input gradient.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
    const std::size_t plane = g.ho * g.wo;
    const std::size_t ncols = g.cols();
    const long pad = static_cast<long>(g.pad);
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((ci * g.k + ky) * g.k + kx) * ncols;
                for (std::size_t b = 0; b < g.n; ++b) {
                    T* xin = dx + (b * g.c + ci) * g.h * g.w;
                    const T* src = row + b * plane;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                        T* irow = xin + static_cast<std::size_t>(iy) * g.w;
                        const T* srow = src + oy * g.wo;
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                            if (ix >= 0 && ix < static_cast<long>(g.w)) irow[ix] += srow[ox];
                        }
                    }
                }
            }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

/// Cross-correlation with zero padding (no kernel flip).
template <class T>
BasicVar<T> conv2d(const BasicVar<T>& input, const BasicVar<T>& kernel, const BasicVar<T>& bias,
                   std::size_t pad = 1, std::size_t stride = 1) {
    const auto d = image_dims(input.shape(), "conv2d");
    const auto& ks = kernel.shape();
    if (ks.size() != 4 || ks[2] != ks[3])
        throw ShapeError("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(ks));
    if (ks[1] != d.c)
        throw ShapeError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                         std::to_string(d.c));
    if (bias.shape() != Shape{ks[0]})
        throw ShapeError("conv2d: bias must be [" + std::to_string(ks[0]) + "], got " + shape_str(bias.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t k = ks[2];
    if (k > d.h + 2 * pad || k > d.w + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");

    detail::ConvGeom g{d.n, d.c, d.h, d.w, ks[0], k, pad, stride,
                       (d.h + 2 * pad - k) / stride + 1, (d.w + 2 * pad - k) / stride + 1};
    const bool batched = input.shape().size() == 4;
    const std::size_t plane = g.ho * g.wo;

    std::vector<T> cols(g.rows() * g.cols());
    detail::im2col(input.value().data(), g, cols.data());
    detail::RowMat<T> out(g.co, g.cols());
    // One product per sample so results do not depend on the batch size.
    const detail::ConstMatMap<T> kmat(kernel.value().data(), g.co, g.rows());
    const detail::ConstMatMap<T> cmat(cols.data(), g.rows(), g.cols());
    for (std::size_t b = 0; b < g.n; ++b) {
        const auto c0 = static_cast<Eigen::Index>(b * plane), np = static_cast<Eigen::Index>(plane);
        out.middleCols(c0, np).noalias() = kmat * cmat.middleCols(c0, np);
    }

    BasicTensor<T> y(image_shape(batched, g.n, g.co, g.ho, g.wo));
    const T* bv = bias.value().data();
    for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t co = 0; co < g.co; ++co) {
            const T* src = out.data() + co * g.cols() + b * plane;
            T* dst = y.data() + (b * g.co + co) * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv[co];
        }

    return detail::make_result<T>(std::move(y), {input, kernel, bias}, [g, plane](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& ker = *self.parents[1];
        auto& bs = *self.parents[2];
        detail::RowMat<T> gout(g.co, g.cols());
        for (std::size_t b = 0; b < g.n; ++b)
            for (std::size_t co = 0; co < g.co; ++co) {
                const T* src = self.grad.data() + (b * g.co + co) * plane;
                std::copy(src, src + plane, gout.data() + co * g.cols() + b * plane);
            }
        if (bs.requires_grad) {
            auto& gb = bs.grad_buffer();
            for (std::size_t co = 0; co < g.co; ++co) gb[co] += gout.row(co).sum();
        }
        const bool need_w = ker.requires_grad;
        const bool need_x = in.requires_grad;
        if (!need_w && !need_x) return;
        std::vector<T> cols;
        if (need_w) {
            cols.resize(g.rows() * g.cols());
            detail::im2col(in.value.data(), g, cols.data());
            detail::MatMap<T>(ker.grad_buffer().data(), g.co, g.rows()).noalias() +=
                gout * detail::ConstMatMap<T>(cols.data(), g.rows(), g.cols()).transpose();
        }
        if (need_x) {
            cols.assign(g.rows() * g.cols(), T(0));
            detail::MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() =
                detail::ConstMatMap<T>(ker.value.data(), g.co, g.rows()).transpose() * gout;
            detail::col2im(cols.data(), g, in.grad_buffer().data());
        }
    });
}

template <class T>
BasicVar<T> relu(const BasicVar<T>& x) {
    BasicTensor<T> y = x.value();
    for (auto& v : y.storage()) v = v > T(0) ? v : T(0);
    return detail::make_result<T>(std::move(y), {x}, [](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (in.value[i] > T(0)) g[i] += self.grad[i];
    });
}

/// Element-wise clamp; gradient passes where lo <= x <= hi.
template <class T>
BasicVar<T> clamp(const BasicVar<T>& x, T lo, T hi) {
    BasicTensor<T> y = x.value();
    for (auto& v : y.storage()) v = std::min(std::max(v, lo), hi);
    return detail::make_result<T>(std::move(y), {x}, [lo, hi](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (in.value[i] >= lo && in.value[i] <= hi) g[i] += self.grad[i];
    });
}

/// 2x2 average pooling.
template <class T>
BasicVar<T> downsample2x(const BasicVar<T>& x) {
    const auto d = image_dims(x.shape(), "downsample2x");
    if (d.h % 2 || d.w % 2)
        throw ShapeError("downsample2x: spatial extents must be even, got " + shape_str(x.shape()));
    const std::size_t ho = d.h / 2, wo = d.w / 2, planes = d.n * d.c;
    BasicTensor<T> y(image_shape(x.shape().size() == 4, d.n, d.c, ho, wo));
    const T* src = x.value().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const T* s = src + p * d.h * d.w + 2 * oy * d.w + 2 * ox;
                y[(p * ho + oy) * wo + ox] = (s[0] + s[1] + s[d.w] + s[d.w + 1]) * T(0.25);
            }
    return detail::make_result<T>(std::move(y), {x}, [d, ho, wo, planes](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T v = self.grad[(p * ho + oy) * wo + ox] * T(0.25);
                    T* s = g.data() + p * d.h * d.w + 2 * oy * d.w + 2 * ox;
                    s[0] += v;
                    s[1] += v;
                    s[d.w] += v;
                    s[d.w + 1] += v;
                }
    });
}

/// Nearest-neighbour 2x upsampling.
template <class T>
BasicVar<T> upsample2x(const BasicVar<T>& x) {
    const auto d = image_dims(x.shape(), "upsample2x");
    const std::size_t ho = d.h * 2, wo = d.w * 2, planes = d.n * d.c;
    BasicTensor<T> y(image_shape(x.shape().size() == 4, d.n, d.c, ho, wo));
    const T* src = x.value().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox)
                y[(p * ho + oy) * wo + ox] = src[(p * d.h + oy / 2) * d.w + ox / 2];
    return detail::make_result<T>(std::move(y), {x}, [d, ho, wo, planes](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox)
                    g[(p * d.h + oy / 2) * d.w + ox / 2] += self.grad[(p * ho + oy) * wo + ox];
    });
}

template <class T>
BasicVar<T> concat_channels(const BasicVar<T>& a, const BasicVar<T>& b) {
    const auto da = image_dims(a.shape(), "concat_channels");
    const auto db = image_dims(b.shape(), "concat_channels");
    if (a.shape().size() != b.shape().size() || da.n != db.n || da.h != db.h || da.w != db.w)
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t plane = da.h * da.w, ca = da.c * plane, cb = db.c * plane;
    BasicTensor<T> y(image_shape(a.shape().size() == 4, da.n, da.c + db.c, da.h, da.w));
    for (std::size_t n = 0; n < da.n; ++n) {
        std::copy_n(a.value().data() + n * ca, ca, y.data() + n * (ca + cb));
        std::copy_n(b.value().data() + n * cb, cb, y.data() + n * (ca + cb) + ca);
    }
    return detail::make_result<T>(std::move(y), {a, b}, [da, ca, cb](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t n = 0; n < da.n; ++n) {
            const T* g = self.grad.data() + n * (ca + cb);
            if (pa.requires_grad) {
                T* t = pa.grad_buffer().data() + n * ca;
                for (std::size_t i = 0; i < ca; ++i) t[i] += g[i];
            }
            if (pb.requires_grad) {
                T* t = pb.grad_buffer().data() + n * cb;
                for (std::size_t i = 0; i < cb; ++i) t[i] += g[ca + i];
            }
        }
    });
}

/// Channels [begin, end) of an image-like tensor.
template <class T>
BasicVar<T> slice_channels(const BasicVar<T>& x, std::size_t begin, std::size_t end) {
    const auto d = image_dims(x.shape(), "slice_channels");
    if (begin >= end || end > d.c) throw ShapeError("slice_channels: bad channel range");
    const std::size_t plane = d.h * d.w, cs = (end - begin) * plane;
    BasicTensor<T> y(image_shape(x.shape().size() == 4, d.n, end - begin, d.h, d.w));
    for (std::size_t n = 0; n < d.n; ++n)
        std::copy_n(x.value().data() + (n * d.c + begin) * plane, cs, y.data() + n * cs);
    return detail::make_result<T>(std::move(y), {x}, [d, begin, plane, cs](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < d.n; ++n) {
            T* t = g.data() + (n * d.c + begin) * plane;
            for (std::size_t i = 0; i < cs; ++i) t[i] += self.grad[n * cs + i];
        }
    });
}

template <class T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    BasicTensor<T> y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
    return detail::make_result<T>(std::move(y), {a, b}, [](detail::Node<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
        detail::accumulate(*self.parents[1], self.grad);
    });
}

template <class T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    BasicTensor<T> y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
    return detail::make_result<T>(std::move(y), {a, b}, [](detail::Node<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (!pb.requires_grad) return;
        auto& g = pb.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    });
}

template <class T>
BasicVar<T> scale(const BasicVar<T>& a, T s) {
    BasicTensor<T> y = a.value();
    for (auto& v : y.storage()) v *= s;
    return detail::make_result<T>(std::move(y), {a}, [s](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    });
}

template <class T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape shape) {
    BasicTensor<T> y = a.value().reshaped(std::move(shape));
    return detail::make_result<T>(std::move(y), {a}, [](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

/// Summed squared difference (not averaged).
template <class T>
BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mse");
    double acc = 0;
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    return detail::make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc)), {a, b},
                                  [](detail::Node<T>& self) {
                                      auto& pa = *self.parents[0];
                                      auto& pb = *self.parents[1];
                                      const T g0 = self.grad[0];
                                      if (pa.requires_grad) {
                                          auto& g = pa.grad_buffer();
                                          for (std::size_t i = 0; i < g.numel(); ++i)
                                              g[i] += T(2) * g0 * (pa.value[i] - pb.value[i]);
                                      }
                                      if (pb.requires_grad) {
                                          auto& g = pb.grad_buffer();
                                          for (std::size_t i = 0; i < g.numel(); ++i)
                                              g[i] -= T(2) * g0 * (pa.value[i] - pb.value[i]);
                                      }
                                  });
}

/// x: [N,D] (or [D]), weight: [O,D], bias: [O] -> [N,O] (or [O]).
template <class T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& weight, const BasicVar<T>& bias) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (ws.size() != 2 || xs.empty() || xs.size() > 2 || xs.back() != ws[1] || bias.shape() != Shape{ws[0]})
        throw ShapeError("linear: incompatible shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" +
                         shape_str(bias.shape()));
    const std::size_t n = xs.size() == 2 ? xs[0] : 1, dim = ws[1], out = ws[0];
    BasicTensor<T> y(xs.size() == 2 ? Shape{n, out} : Shape{out});
    detail::MatMap<T> ym(y.data(), n, out);
    ym.noalias() = detail::ConstMatMap<T>(x.value().data(), n, dim) *
                   detail::ConstMatMap<T>(weight.value().data(), out, dim).transpose();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) ym(r, o) += bias.value()[o];
    return detail::make_result<T>(std::move(y), {x, weight, bias}, [n, dim, out](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        detail::ConstMatMap<T> gy(self.grad.data(), n, out);
        if (px.requires_grad)
            detail::MatMap<T>(px.grad_buffer().data(), n, dim).noalias() +=
                gy * detail::ConstMatMap<T>(pw.value.data(), out, dim);
        if (pw.requires_grad)
            detail::MatMap<T>(pw.grad_buffer().data(), out, dim).noalias() +=
                gy.transpose() * detail::ConstMatMap<T>(px.value.data(), n, dim);
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t o = 0; o < out; ++o) g[o] += gy.col(o).sum();
        }
    });
}

/// Summed binary cross-entropy on logits against {0,1} targets.
template <class T>
BasicVar<T> bce_with_logits(const BasicVar<T>& logits, const BasicTensor<T>& targets) {
    detail::require_same_shape(logits.shape(), targets.shape(), "bce_with_logits");
    double acc = 0;
    for (std::size_t i = 0; i < targets.numel(); ++i) {
        const double z = logits.value()[i], t = targets[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    return detail::make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc)), {logits},
                                  [targets](detail::Node<T>& self) {
                                      auto& in = *self.parents[0];
                                      auto& g = in.grad_buffer();
                                      for (std::size_t i = 0; i < g.numel(); ++i) {
                                          const double z = in.value[i];
                                          const double s = 1.0 / (1.0 + std::exp(-z));
                                          g[i] += self.grad[0] * static_cast<T>(s - targets[i]);
                                      }
                                  });
}

}  // namespace facelet
