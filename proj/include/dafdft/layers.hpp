#pragma once

// Convolutional building blocks on NCHW tensors: dense/depthwise/separable
// convolution, batch normalization, pooling, dense layers and
// squeeze-and-excitation.

#include "dafdft/ops.hpp"

#include <algorithm>
#include <random>

namespace dafdft {

using Rng = std::mt19937_64;

enum class Padding { Same, Valid };

/// Whether a named tensor is optimised or carried along as state.
enum class ParamKind { Trainable, Buffer };

/// Glorot-uniform tensor. Values are drawn in double so float and double
/// builds from one seed hold the same numbers up to rounding.
template <typename Scalar>
TensorT<Scalar> glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Buffer<Scalar> data(element_count(shape));
    for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(dist(rng));
    return TensorT<Scalar>(std::move(shape), std::move(data), true);
}

struct ConvGeometry {
    Index in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    Index pad_top = 0, pad_left = 0;
    int kernel = 1, stride = 1;
};

/// "same" pads with zeros so that out = ceil(in / stride); an odd total pad
/// puts the extra pixel at the bottom/right.
inline ConvGeometry conv_geometry(Index h, Index w, int kernel, int stride, Padding padding)
{
    if (stride < 1) throw ShapeError("convolution stride must be positive");
    ConvGeometry g;
    g.in_h = h;
    g.in_w = w;
    g.kernel = kernel;
    g.stride = stride;
    if (padding == Padding::Same) {
        g.out_h = (h + stride - 1) / stride;
        g.out_w = (w + stride - 1) / stride;
        g.pad_top = std::max<Index>((g.out_h - 1) * stride + kernel - h, 0) / 2;
        g.pad_left = std::max<Index>((g.out_w - 1) * stride + kernel - w, 0) / 2;
    } else {
        if (h < kernel || w < kernel)
            throw ShapeError("valid convolution with kernel " + std::to_string(kernel) + " on " + std::to_string(h) +
                             "x" + std::to_string(w) + " input");
        g.out_h = (h - kernel) / stride + 1;
        g.out_w = (w - kernel) / stride + 1;
    }
    return g;
}

namespace detail {

template <typename Scalar>
void im2col(const Scalar* image, Index channels, const ConvGeometry& g, Scalar* col)
{
    const Index k = g.kernel, plane = g.out_h * g.out_w;
    for (Index c = 0; c < channels; ++c)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                Scalar* row = col + ((c * k + ky) * k + kx) * plane;
                const Scalar* src = image + c * g.in_h * g.in_w;
                for (Index oy = 0; oy < g.out_h; ++oy) {
                    const Index iy = oy * g.stride + ky - g.pad_top;
                    Scalar* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + g.out_w, Scalar(0));
                        continue;
                    }
                    for (Index ox = 0; ox < g.out_w; ++ox) {
                        const Index ix = ox * g.stride + kx - g.pad_left;
                        dst[ox] = (ix < 0 || ix >= g.in_w) ? Scalar(0) : src[iy * g.in_w + ix];
                    }
                }
            }
}

template <typename Scalar>
void col2im_add(const Scalar* col, Index channels, const ConvGeometry& g, Scalar* image)
{
    const Index k = g.kernel, plane = g.out_h * g.out_w;
    for (Index c = 0; c < channels; ++c)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                const Scalar* row = col + ((c * k + ky) * k + kx) * plane;
                Scalar* dst = image + c * g.in_h * g.in_w;
                for (Index oy = 0; oy < g.out_h; ++oy) {
                    const Index iy = oy * g.stride + ky - g.pad_top;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (Index ox = 0; ox < g.out_w; ++ox) {
                        const Index ix = ox * g.stride + kx - g.pad_left;
                        if (ix >= 0 && ix < g.in_w) dst[iy * g.in_w + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

template <typename Scalar>
void require_nchw(const TensorT<Scalar>& x, std::string_view op)
{
    if (x.rank() != 4) throw ShapeError(std::string(op) + " expects [B,C,H,W], got " + to_string(x.shape()));
}

}  // namespace detail

/// Cross-correlation of x [B,C,H,W] with weight [C_out,C,k,k] plus an
/// optional bias [C_out] (pass an undefined tensor for none).
template <typename Scalar>
TensorT<Scalar> conv2d(const TensorT<Scalar>& x, const TensorT<Scalar>& weight, const TensorT<Scalar>& bias, int stride,
                       Padding padding)
{
    detail::require_nchw(x, "conv2d");
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
        throw ShapeError("conv2d weight must be [C_out,C_in,k,k], got " + to_string(weight.shape()));
    if (weight.dim(1) != x.dim(1))
        throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + " vs weight " +
                         to_string(weight.shape()));
    const Index batches = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
    const int k = static_cast<int>(weight.dim(2));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw ShapeError("conv2d bias must be [" + std::to_string(cout) + "], got " + to_string(bias.shape()));

    const ConvGeometry g = conv_geometry(x.dim(2), x.dim(3), k, stride, padding);
    const Index patch = cin * k * k, plane = g.out_h * g.out_w, in_plane = g.in_h * g.in_w;
    const bool direct = (k == 1 && stride == 1 && g.pad_top == 0 && g.pad_left == 0);

    Eigen::Map<const RowMatrix<Scalar>> w(weight.data().data(), cout, patch);
    Buffer<Scalar> out(batches * cout * plane);
    RowMatrix<Scalar> col(direct ? 0 : patch, direct ? 0 : plane);
    for (Index n = 0; n < batches; ++n) {
        Eigen::Map<RowMatrix<Scalar>> res(out.data() + n * cout * plane, cout, plane);
        if (direct) {
            res.noalias() = w * Eigen::Map<const RowMatrix<Scalar>>(x.data().data() + n * cin * in_plane, cin, plane);
        } else {
            detail::im2col(x.data().data() + n * cin * in_plane, cin, g, col.data());
            res.noalias() = w * col;
        }
        if (bias.defined()) res.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data().data(), cout);
    }

    return make_op<Scalar>(
        "conv2d", {batches, cout, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
        [x, weight, bias, g, batches, cin, cout, patch, plane, in_plane, direct](Node<Scalar>& self) {
            Eigen::Map<const RowMatrix<Scalar>> w(weight.data().data(), cout, patch);
            RowMatrix<Scalar> col(direct ? 0 : patch, direct ? 0 : plane);
            RowMatrix<Scalar> dcol;
            for (Index n = 0; n < batches; ++n) {
                Eigen::Map<const RowMatrix<Scalar>> dout(self.grad.data() + n * cout * plane, cout, plane);
                if (bias.defined() && bias.requires_grad())
                    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.node()->grad_buffer().data(), cout) +=
                        dout.rowwise().sum();
                if (direct) {
                    if (weight.requires_grad()) {
                        Eigen::Map<const RowMatrix<Scalar>> xin(x.data().data() + n * cin * in_plane, cin, plane);
                        Eigen::Map<RowMatrix<Scalar>>(weight.node()->grad_buffer().data(), cout, patch).noalias() +=
                            dout * xin.transpose();
                    }
                    if (x.requires_grad())
                        Eigen::Map<RowMatrix<Scalar>>(x.node()->grad_buffer().data() + n * cin * in_plane, cin, plane)
                            .noalias() += w.transpose() * dout;
                    continue;
                }
                if (weight.requires_grad()) {
                    detail::im2col(x.data().data() + n * cin * in_plane, cin, g, col.data());
                    Eigen::Map<RowMatrix<Scalar>>(weight.node()->grad_buffer().data(), cout, patch).noalias() +=
                        dout * col.transpose();
                }
                if (x.requires_grad()) {
                    dcol.noalias() = w.transpose() * dout;
                    detail::col2im_add(dcol.data(), cin, g, x.node()->grad_buffer().data() + n * cin * in_plane);
                }
            }
        });
}

/// Per-channel k x k convolution; weight is [C,1,k,k], no bias.
template <typename Scalar>
TensorT<Scalar> depthwise_conv2d(const TensorT<Scalar>& x, const TensorT<Scalar>& weight, int stride, Padding padding)
{
    detail::require_nchw(x, "depthwise_conv2d");
    if (weight.rank() != 4 || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3))
        throw ShapeError("depthwise weight must be [C,1,k,k], got " + to_string(weight.shape()));
    if (weight.dim(0) != x.dim(1))
        throw ShapeError("depthwise channel mismatch: input " + to_string(x.shape()) + " vs weight " +
                         to_string(weight.shape()));
    const Index batches = x.dim(0), channels = x.dim(1);
    const int k = static_cast<int>(weight.dim(2));
    const ConvGeometry g = conv_geometry(x.dim(2), x.dim(3), k, stride, padding);
    const Index plane = g.out_h * g.out_w, in_plane = g.in_h * g.in_w;

    // Calls visit(out_index, in_index, tap) for every contributing pair.
    auto sweep = [g, k](Index n_c, auto&& visit) {
        for (Index oy = 0; oy < g.out_h; ++oy)
            for (Index ky = 0; ky < k; ++ky) {
                const Index iy = oy * g.stride + ky - g.pad_top;
                if (iy < 0 || iy >= g.in_h) continue;
                for (Index ox = 0; ox < g.out_w; ++ox)
                    for (Index kx = 0; kx < k; ++kx) {
                        const Index ix = ox * g.stride + kx - g.pad_left;
                        if (ix < 0 || ix >= g.in_w) continue;
                        visit(n_c, oy * g.out_w + ox, iy * g.in_w + ix, ky * k + kx);
                    }
            }
    };

    Buffer<Scalar> out = Buffer<Scalar>::Zero(batches * channels * plane);
    {
        const Scalar* xv = x.data().data();
        const Scalar* wv = weight.data().data();
        Scalar* ov = out.data();
        for (Index nc = 0; nc < batches * channels; ++nc) {
            const Index c = nc % channels;
            sweep(nc, [&](Index n_c, Index o, Index i, Index t) {
                ov[n_c * plane + o] += wv[c * k * k + t] * xv[n_c * in_plane + i];
            });
        }
    }

    return make_op<Scalar>("depthwise_conv2d", {batches, channels, g.out_h, g.out_w}, std::move(out), {x, weight},
                           [x, weight, sweep, batches, channels, plane, in_plane, k](Node<Scalar>& self) {
                               const Scalar* dy = self.grad.data();
                               const Scalar* xv = x.data().data();
                               const Scalar* wv = weight.data().data();
                               Scalar* gx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
                               Scalar* gw = weight.requires_grad() ? weight.node()->grad_buffer().data() : nullptr;
                               for (Index nc = 0; nc < batches * channels; ++nc) {
                                   const Index c = nc % channels;
                                   sweep(nc, [&](Index n_c, Index o, Index i, Index t) {
                                       const Scalar d = dy[n_c * plane + o];
                                       if (gx) gx[n_c * in_plane + i] += wv[c * k * k + t] * d;
                                       if (gw) gw[c * k * k + t] += xv[n_c * in_plane + i] * d;
                                   });
                               }
                           });
}

template <typename Scalar>
struct Conv2dParams {
    TensorT<Scalar> weight;  // [C_out, C_in, k, k]
    TensorT<Scalar> bias;    // [C_out] or undefined
    int stride = 1;
    Padding padding = Padding::Same;

    static Conv2dParams glorot(Index in_channels, Index out_channels, int kernel, int stride, bool with_bias, Rng& rng)
    {
        if (kernel != 1 && kernel != 3) throw ShapeError("only 1x1 and 3x3 kernels are supported");
        Conv2dParams p;
        p.weight = glorot_uniform<Scalar>({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel,
                                          out_channels * kernel * kernel, rng);
        if (with_bias) p.bias = TensorT<Scalar>::zeros({out_channels}, true);
        p.stride = stride;
        return p;
    }

    Index in_channels() const { return weight.dim(1); }
    Index out_channels() const { return weight.dim(0); }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        f(prefix + ".weight", weight, ParamKind::Trainable);
        if (bias.defined()) f(prefix + ".bias", bias, ParamKind::Trainable);
    }
};

template <typename Scalar>
TensorT<Scalar> conv2d(const TensorT<Scalar>& x, const Conv2dParams<Scalar>& p)
{
    return conv2d(x, p.weight, p.bias, p.stride, p.padding);
}

/// Depthwise k x k (carrying the stride) followed by a 1x1 pointwise mix.
template <typename Scalar>
TensorT<Scalar> separable_conv2d(const TensorT<Scalar>& x, const TensorT<Scalar>& depthwise,
                                 const Conv2dParams<Scalar>& pointwise, int stride)
{
    if (pointwise.weight.dim(2) != 1) throw ShapeError("separable_conv2d pointwise kernel must be 1x1");
    auto mixed = depthwise_conv2d(x, depthwise, stride, Padding::Same);
    return conv2d(mixed, pointwise.weight, pointwise.bias, 1, Padding::Same);
}

template <typename Scalar>
struct SeparableConvParams {
    TensorT<Scalar> depthwise;  // [C_in, 1, 3, 3]
    Conv2dParams<Scalar> pointwise;
    int stride = 1;

    static SeparableConvParams glorot(Index in_channels, Index out_channels, int stride, bool with_bias, Rng& rng)
    {
        SeparableConvParams p;
        p.depthwise = glorot_uniform<Scalar>({in_channels, 1, 3, 3}, 9, 9, rng);
        p.pointwise = Conv2dParams<Scalar>::glorot(in_channels, out_channels, 1, 1, with_bias, rng);
        p.stride = stride;
        return p;
    }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        f(prefix + ".depthwise", depthwise, ParamKind::Trainable);
        pointwise.visit(prefix + ".pointwise", f);
    }
};

template <typename Scalar>
TensorT<Scalar> separable_conv2d(const TensorT<Scalar>& x, const SeparableConvParams<Scalar>& p)
{
    return separable_conv2d(x, p.depthwise, p.pointwise, p.stride);
}

template <typename Scalar>
struct BatchNormState {
    TensorT<Scalar> gamma, beta;                 // trainable, [C]
    TensorT<Scalar> running_mean, running_var;  // buffers, [C]
    TensorT<Scalar> num_updates;                // buffer, [1]
    double momentum = 0.99;
    double epsilon = 1e-3;

    static BatchNormState identity(Index channels)
    {
        BatchNormState s;
        s.gamma = TensorT<Scalar>::full({channels}, Scalar(1), true);
        s.beta = TensorT<Scalar>::zeros({channels}, true);
        s.running_mean = TensorT<Scalar>::zeros({channels});
        s.running_var = TensorT<Scalar>::full({channels}, Scalar(1));
        s.num_updates = TensorT<Scalar>::zeros({1});
        return s;
    }

    Index channels() const { return gamma.dim(0); }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        f(prefix + ".gamma", gamma, ParamKind::Trainable);
        f(prefix + ".beta", beta, ParamKind::Trainable);
        f(prefix + ".running_mean", running_mean, ParamKind::Buffer);
        f(prefix + ".running_var", running_var, ParamKind::Buffer);
        f(prefix + ".num_updates", num_updates, ParamKind::Buffer);
    }

    /// Momentum of the next running-statistics update: warms up as
    /// (1 + n) / (10 + n) over the first updates, capped at `momentum`.
    double effective_momentum() const
    {
        const double n = static_cast<double>(num_updates.data()[0]);
        return std::min(momentum, (1.0 + n) / (10.0 + n));
    }
};

/// Per-channel normalisation of [B,C,H,W] (or [B,C]). Train mode uses the
/// biased batch variance and folds it into the running statistics as
/// running = m * running + (1 - m) * batch, m = effective_momentum().
template <typename Scalar>
TensorT<Scalar> batch_norm(const TensorT<Scalar>& x, BatchNormState<Scalar>& s, Mode mode)
{
    if (x.rank() != 4 && x.rank() != 2) throw ShapeError("batch_norm expects [B,C,H,W] or [B,C], got " + to_string(x.shape()));
    const Index batches = x.dim(0), channels = x.dim(1);
    if (channels != s.channels())
        throw ShapeError("batch_norm channel mismatch: input " + to_string(x.shape()) + " vs " +
                         std::to_string(s.channels()) + " channels");
    const Index plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const Scalar eps = static_cast<Scalar>(s.epsilon);
    const auto& xv = x.data();
    Buffer<Scalar> out(x.numel());

    auto slice = [plane, channels](Buffer<Scalar>& b, Index n, Index c) { return b.segment((n * channels + c) * plane, plane); };
    auto cslice = [plane, channels](const Buffer<Scalar>& b, Index n, Index c) {
        return b.segment((n * channels + c) * plane, plane);
    };

    if (mode == Mode::Infer) {
        Buffer<Scalar> inv_std = (s.running_var.data() + eps).rsqrt();
        Buffer<Scalar> mu = s.running_mean.data();
        for (Index n = 0; n < batches; ++n)
            for (Index c = 0; c < channels; ++c)
                slice(out, n, c) = (cslice(xv, n, c) - mu[c]) * (inv_std[c] * s.gamma.data()[c]) + s.beta.data()[c];
        return make_op<Scalar>(
            "batch_norm_infer", x.shape(), std::move(out), {x, s.gamma, s.beta},
            [x, gamma = s.gamma, beta = s.beta, inv_std, mu, batches, channels, slice, cslice](Node<Scalar>& self) {
                for (Index n = 0; n < batches; ++n)
                    for (Index c = 0; c < channels; ++c) {
                        auto dy = cslice(self.grad, n, c);
                        if (x.requires_grad()) slice(x.node()->grad_buffer(), n, c) += dy * (inv_std[c] * gamma.data()[c]);
                        if (gamma.requires_grad())
                            gamma.node()->grad_buffer()[c] += (dy * (cslice(x.data(), n, c) - mu[c])).sum() * inv_std[c];
                        if (beta.requires_grad()) beta.node()->grad_buffer()[c] += dy.sum();
                    }
            });
    }

    if (batches < 2) throw ShapeError("batch_norm in train mode needs a batch of at least 2, got " + to_string(x.shape()));
    const Scalar count = static_cast<Scalar>(batches * plane);
    Buffer<Scalar> mean = Buffer<Scalar>::Zero(channels), var = Buffer<Scalar>::Zero(channels);
    for (Index n = 0; n < batches; ++n)
        for (Index c = 0; c < channels; ++c) mean[c] += cslice(xv, n, c).sum();
    mean /= count;
    for (Index n = 0; n < batches; ++n)
        for (Index c = 0; c < channels; ++c) var[c] += (cslice(xv, n, c) - mean[c]).square().sum();
    var /= count;
    Buffer<Scalar> inv_std = (var + eps).rsqrt();

    Buffer<Scalar> xhat(x.numel());
    for (Index n = 0; n < batches; ++n)
        for (Index c = 0; c < channels; ++c) {
            slice(xhat, n, c) = (cslice(xv, n, c) - mean[c]) * inv_std[c];
            slice(out, n, c) = slice(xhat, n, c) * s.gamma.data()[c] + s.beta.data()[c];
        }

    const Scalar m = static_cast<Scalar>(s.effective_momentum());
    s.running_mean.data() = m * s.running_mean.data() + (Scalar(1) - m) * mean;
    s.running_var.data() = m * s.running_var.data() + (Scalar(1) - m) * var;
    s.num_updates.data()[0] += Scalar(1);

    return make_op<Scalar>(
        "batch_norm_train", x.shape(), std::move(out), {x, s.gamma, s.beta},
        [x, gamma = s.gamma, beta = s.beta, xhat = std::move(xhat), inv_std, batches, channels, count, slice,
         cslice](Node<Scalar>& self) {
            Buffer<Scalar> sum_dy = Buffer<Scalar>::Zero(channels), sum_dy_xhat = Buffer<Scalar>::Zero(channels);
            for (Index n = 0; n < batches; ++n)
                for (Index c = 0; c < channels; ++c) {
                    sum_dy[c] += cslice(self.grad, n, c).sum();
                    sum_dy_xhat[c] += (cslice(self.grad, n, c) * cslice(xhat, n, c)).sum();
                }
            if (gamma.requires_grad()) gamma.node()->grad_buffer() += sum_dy_xhat;
            if (beta.requires_grad()) beta.node()->grad_buffer() += sum_dy;
            if (!x.requires_grad()) return;
            auto& gx = x.node()->grad_buffer();
            for (Index n = 0; n < batches; ++n)
                for (Index c = 0; c < channels; ++c) {
                    const Scalar k = gamma.data()[c] * inv_std[c] / count;
                    slice(gx, n, c) +=
                        k * (count * cslice(self.grad, n, c) - sum_dy[c] - cslice(xhat, n, c) * sum_dy_xhat[c]);
                }
        });
}

/// Spatial mean per channel: [B,C,H,W] -> [B,C].
template <typename Scalar>
TensorT<Scalar> global_avg_pool(const TensorT<Scalar>& x)
{
    detail::require_nchw(x, "global_avg_pool");
    const Index rows = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> in(x.data().data(), rows,
                                                                                                plane);
    Buffer<Scalar> out = in.rowwise().mean();
    return make_op<Scalar>("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x},
                           [x, rows, plane](Node<Scalar>& self) {
                               Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> g(
                                   x.node()->grad_buffer().data(), rows, plane);
                               g.colwise() += self.grad / static_cast<Scalar>(plane);
                           });
}

/// Non-overlapping average pooling with a square window of `factor`.
template <typename Scalar>
TensorT<Scalar> avg_pool2d(const TensorT<Scalar>& x, int factor)
{
    detail::require_nchw(x, "avg_pool2d");
    if (factor < 1 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0)
        throw ShapeError("avg_pool2d: factor " + std::to_string(factor) + " does not divide " + to_string(x.shape()));
    if (factor == 1) return x;
    const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / factor, ow = w / factor;
    const Scalar norm = Scalar(1) / static_cast<Scalar>(factor * factor);
    Buffer<Scalar> out = Buffer<Scalar>::Zero(planes * oh * ow);
    for (Index p = 0; p < planes; ++p)
        for (Index y = 0; y < h; ++y)
            for (Index xx = 0; xx < w; ++xx)
                out[(p * oh + y / factor) * ow + xx / factor] += x.data()[(p * h + y) * w + xx] * norm;
    return make_op<Scalar>("avg_pool2d", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                           [x, planes, h, w, oh, ow, factor, norm](Node<Scalar>& self) {
                               auto& g = x.node()->grad_buffer();
                               for (Index p = 0; p < planes; ++p)
                                   for (Index y = 0; y < h; ++y)
                                       for (Index xx = 0; xx < w; ++xx)
                                           g[(p * h + y) * w + xx] += self.grad[(p * oh + y / factor) * ow + xx / factor] * norm;
                           });
}

/// Affine map x [B,D] * W [D,E] + b [E].
template <typename Scalar>
TensorT<Scalar> dense(const TensorT<Scalar>& x, const TensorT<Scalar>& weight, const TensorT<Scalar>& bias)
{
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) || bias.rank() != 1 ||
        bias.dim(0) != weight.dim(1))
        throw ShapeError("dense: incompatible shapes x" + to_string(x.shape()) + " W" + to_string(weight.shape()) +
                         " b" + to_string(bias.shape()));
    const Index rows = x.dim(0), d = x.dim(1), e = weight.dim(1);
    using Vec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    Buffer<Scalar> out(rows * e);
    Eigen::Map<RowMatrix<Scalar>> res(out.data(), rows, e);
    res.noalias() = Eigen::Map<const RowMatrix<Scalar>>(x.data().data(), rows, d) *
                    Eigen::Map<const RowMatrix<Scalar>>(weight.data().data(), d, e);
    res.rowwise() += Eigen::Map<const Vec>(bias.data().data(), e);
    return make_op<Scalar>("dense", {rows, e}, std::move(out), {x, weight, bias},
                           [x, weight, bias, rows, d, e](Node<Scalar>& self) {
                               Eigen::Map<const RowMatrix<Scalar>> dy(self.grad.data(), rows, e);
                               if (x.requires_grad())
                                   Eigen::Map<RowMatrix<Scalar>>(x.node()->grad_buffer().data(), rows, d).noalias() +=
                                       dy * Eigen::Map<const RowMatrix<Scalar>>(weight.data().data(), d, e).transpose();
                               if (weight.requires_grad())
                                   Eigen::Map<RowMatrix<Scalar>>(weight.node()->grad_buffer().data(), d, e).noalias() +=
                                       Eigen::Map<const RowMatrix<Scalar>>(x.data().data(), rows, d).transpose() * dy;
                               if (bias.requires_grad())
                                   Eigen::Map<Vec>(bias.node()->grad_buffer().data(), e) += dy.colwise().sum();
                           });
}

template <typename Scalar>
struct DenseParams {
    TensorT<Scalar> weight;  // [D, E]
    TensorT<Scalar> bias;    // [E]

    static DenseParams glorot(Index in_features, Index out_features, Rng& rng)
    {
        return {glorot_uniform<Scalar>({in_features, out_features}, in_features, out_features, rng),
                TensorT<Scalar>::zeros({out_features}, true)};
    }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        f(prefix + ".weight", weight, ParamKind::Trainable);
        f(prefix + ".bias", bias, ParamKind::Trainable);
    }
};

template <typename Scalar>
TensorT<Scalar> dense(const TensorT<Scalar>& x, const DenseParams<Scalar>& p)
{
    return dense(x, p.weight, p.bias);
}

/// x [B,C,H,W] times a per-channel gate [B,C] broadcast over H and W.
template <typename Scalar>
TensorT<Scalar> channel_scale(const TensorT<Scalar>& x, const TensorT<Scalar>& gate)
{
    detail::require_nchw(x, "channel_scale");
    if (gate.rank() != 2 || gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(1))
        throw ShapeError("channel_scale: gate " + to_string(gate.shape()) + " does not match " + to_string(x.shape()));
    const Index rows = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    using RowArray = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Buffer<Scalar> out(x.numel());
    Eigen::Map<RowArray>(out.data(), rows, plane) =
        Eigen::Map<const RowArray>(x.data().data(), rows, plane).colwise() * gate.data();
    return make_op<Scalar>("channel_scale", x.shape(), std::move(out), {x, gate}, [x, gate, rows, plane](Node<Scalar>& self) {
        Eigen::Map<const RowArray> dy(self.grad.data(), rows, plane);
        if (x.requires_grad())
            Eigen::Map<RowArray>(x.node()->grad_buffer().data(), rows, plane) += dy.colwise() * gate.data();
        if (gate.requires_grad())
            gate.node()->grad_buffer() += (dy * Eigen::Map<const RowArray>(x.data().data(), rows, plane)).rowwise().sum();
    });
}

template <typename Scalar>
struct SqueezeExciteParams {
    DenseParams<Scalar> reduce;  // C -> C/r
    DenseParams<Scalar> expand;  // C/r -> C
    int ratio = 4;

    static SqueezeExciteParams glorot(Index channels, int ratio, Rng& rng)
    {
        if (ratio < 1 || channels % ratio != 0)
            throw ShapeError("squeeze-excite ratio " + std::to_string(ratio) + " does not divide " +
                             std::to_string(channels) + " channels");
        return {DenseParams<Scalar>::glorot(channels, channels / ratio, rng),
                DenseParams<Scalar>::glorot(channels / ratio, channels, rng), ratio};
    }

    Index channels() const { return reduce.weight.dim(0); }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        reduce.visit(prefix + ".reduce", f);
        expand.visit(prefix + ".expand", f);
    }
};

/// Per-channel gate in [0,1]: hard_sigmoid(expand(relu6(reduce(GAP(x))))).
template <typename Scalar>
TensorT<Scalar> squeeze_excite_gate(const TensorT<Scalar>& x, const SqueezeExciteParams<Scalar>& p)
{
    detail::require_nchw(x, "squeeze_excite");
    if (p.ratio < 1 || x.dim(1) % p.ratio != 0)
        throw ShapeError("squeeze-excite ratio " + std::to_string(p.ratio) + " does not divide " +
                         std::to_string(x.dim(1)) + " channels");
    if (p.channels() != x.dim(1))
        throw ShapeError("squeeze-excite built for " + std::to_string(p.channels()) + " channels, got " +
                         to_string(x.shape()));
    return hard_sigmoid(dense(relu6(dense(global_avg_pool(x), p.reduce)), p.expand));
}

template <typename Scalar>
TensorT<Scalar> squeeze_excite(const TensorT<Scalar>& x, const SqueezeExciteParams<Scalar>& p)
{
    return channel_scale(x, squeeze_excite_gate(x, p));
}

}  // namespace dafdft
