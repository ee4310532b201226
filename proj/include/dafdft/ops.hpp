#pragma once

// Generic differentiable math: elementwise maps, reductions, reshapes,
// batched matrix products and softmax.

#include "dafdft/tensor.hpp"

#include <cmath>
#include <limits>

namespace dafdft {

namespace detail {

template <typename Scalar>
void require_same_shape(const TensorT<Scalar>& a, const TensorT<Scalar>& b, std::string_view op)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

inline int normalize_axis(int axis, int rank, std::string_view op)
{
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank)
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    return a;
}

}  // namespace detail

/// Elementwise map with a derivative evaluated at the input.
template <typename Scalar, typename Fn, typename Deriv>
TensorT<Scalar> unary_map(const TensorT<Scalar>& x, std::string_view op, Fn fn, Deriv deriv)
{
    Buffer<Scalar> out = x.data().unaryExpr(fn);
    return make_op<Scalar>(op, x.shape(), std::move(out), {x}, [x, deriv](Node<Scalar>& self) {
        x.node()->accumulate(self.grad * x.data().unaryExpr(deriv));
    });
}

template <typename Scalar>
TensorT<Scalar> add(const TensorT<Scalar>& a, const TensorT<Scalar>& b)
{
    detail::require_same_shape(a, b, "add");
    return make_op<Scalar>("add", a.shape(), a.data() + b.data(), {a, b}, [a, b](Node<Scalar>& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad);
        if (b.requires_grad()) b.node()->accumulate(self.grad);
    });
}

template <typename Scalar>
TensorT<Scalar> sub(const TensorT<Scalar>& a, const TensorT<Scalar>& b)
{
    detail::require_same_shape(a, b, "sub");
    return make_op<Scalar>("sub", a.shape(), a.data() - b.data(), {a, b}, [a, b](Node<Scalar>& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad);
        if (b.requires_grad()) b.node()->accumulate(-self.grad);
    });
}

/// Hadamard product of equally shaped tensors.
template <typename Scalar>
TensorT<Scalar> mul(const TensorT<Scalar>& a, const TensorT<Scalar>& b)
{
    detail::require_same_shape(a, b, "mul");
    return make_op<Scalar>("mul", a.shape(), a.data() * b.data(), {a, b}, [a, b](Node<Scalar>& self) {
        if (a.requires_grad()) a.node()->accumulate(self.grad * b.data());
        if (b.requires_grad()) b.node()->accumulate(self.grad * a.data());
    });
}

/// x scaled by a learnable one-element tensor.
template <typename Scalar>
TensorT<Scalar> scale(const TensorT<Scalar>& x, const TensorT<Scalar>& factor)
{
    if (factor.numel() != 1) throw ShapeError("scale: factor must hold one value, got " + to_string(factor.shape()));
    const Scalar s = factor.data()[0];
    return make_op<Scalar>("scale", x.shape(), x.data() * s, {x, factor}, [x, factor](Node<Scalar>& self) {
        const Scalar s = factor.data()[0];
        if (x.requires_grad()) x.node()->accumulate(self.grad * s);
        if (factor.requires_grad())
            factor.node()->accumulate(Buffer<Scalar>::Constant(1, (self.grad * x.data()).sum()));
    });
}

template <typename Scalar>
TensorT<Scalar> operator+(const TensorT<Scalar>& a, const TensorT<Scalar>& b) { return add(a, b); }
template <typename Scalar>
TensorT<Scalar> operator-(const TensorT<Scalar>& a, const TensorT<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
TensorT<Scalar> operator*(const TensorT<Scalar>& a, const TensorT<Scalar>& b) { return mul(a, b); }

template <typename Scalar>
TensorT<Scalar> sum(const TensorT<Scalar>& x)
{
    return make_op<Scalar>("sum", {1}, Buffer<Scalar>::Constant(1, x.data().sum()), {x},
                           [x](Node<Scalar>& self) {
                               x.node()->accumulate(Buffer<Scalar>::Constant(x.numel(), self.grad[0]));
                           });
}

template <typename Scalar>
TensorT<Scalar> mean(const TensorT<Scalar>& x)
{
    const Scalar n = static_cast<Scalar>(x.numel());
    return make_op<Scalar>("mean", {1}, Buffer<Scalar>::Constant(1, x.data().sum() / n), {x},
                           [x, n](Node<Scalar>& self) {
                               x.node()->accumulate(Buffer<Scalar>::Constant(x.numel(), self.grad[0] / n));
                           });
}

template <typename Scalar>
TensorT<Scalar> reshape(const TensorT<Scalar>& x, Shape shape)
{
    if (element_count(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    return make_op<Scalar>("reshape", std::move(shape), x.data(), {x},
                           [x](Node<Scalar>& self) { x.node()->accumulate(self.grad); });
}

namespace detail {

template <typename Scalar>
void transpose_batches(const Buffer<Scalar>& src, Buffer<Scalar>& dst, Index batches, Index rows, Index cols)
{
    for (Index b = 0; b < batches; ++b) {
        Eigen::Map<const RowMatrix<Scalar>> in(src.data() + b * rows * cols, rows, cols);
        Eigen::Map<RowMatrix<Scalar>> out(dst.data() + b * rows * cols, cols, rows);
        out = in.transpose();
    }
}

}  // namespace detail

/// Swaps the last two axes of a rank-3 tensor.
template <typename Scalar>
TensorT<Scalar> transpose_last2(const TensorT<Scalar>& x)
{
    if (x.rank() != 3) throw ShapeError("transpose_last2 expects [B,M,N], got " + to_string(x.shape()));
    const Index batches = x.dim(0), rows = x.dim(1), cols = x.dim(2);
    Buffer<Scalar> out(x.numel());
    detail::transpose_batches(x.data(), out, batches, rows, cols);
    return make_op<Scalar>("transpose", {batches, cols, rows}, std::move(out), {x},
                           [x, batches, rows, cols](Node<Scalar>& self) {
                               Buffer<Scalar> g(self.grad.size());
                               detail::transpose_batches(self.grad, g, batches, cols, rows);
                               x.node()->accumulate(g);
                           });
}

/// Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N].
template <typename Scalar>
TensorT<Scalar> batch_dot(const TensorT<Scalar>& a, const TensorT<Scalar>& b)
{
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("batch_dot: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const Index batches = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Buffer<Scalar> out(batches * m * n);
    for (Index i = 0; i < batches; ++i) {
        Eigen::Map<const RowMatrix<Scalar>> lhs(a.data().data() + i * m * k, m, k);
        Eigen::Map<const RowMatrix<Scalar>> rhs(b.data().data() + i * k * n, k, n);
        Eigen::Map<RowMatrix<Scalar>> res(out.data() + i * m * n, m, n);
        res.noalias() = lhs * rhs;
    }
    return make_op<Scalar>("batch_dot", {batches, m, n}, std::move(out), {a, b},
                           [a, b, batches, m, k, n](Node<Scalar>& self) {
                               Scalar* ga = a.requires_grad() ? a.node()->grad_buffer().data() : nullptr;
                               Scalar* gb = b.requires_grad() ? b.node()->grad_buffer().data() : nullptr;
                               for (Index i = 0; i < batches; ++i) {
                                   Eigen::Map<const RowMatrix<Scalar>> dout(self.grad.data() + i * m * n, m, n);
                                   if (ga) {
                                       Eigen::Map<const RowMatrix<Scalar>> rhs(b.data().data() + i * k * n, k, n);
                                       Eigen::Map<RowMatrix<Scalar>>(ga + i * m * k, m, k).noalias() +=
                                           dout * rhs.transpose();
                                   }
                                   if (gb) {
                                       Eigen::Map<const RowMatrix<Scalar>> lhs(a.data().data() + i * m * k, m, k);
                                       Eigen::Map<RowMatrix<Scalar>>(gb + i * k * n, k, n).noalias() +=
                                           lhs.transpose() * dout;
                                   }
                               }
                           });
}

/// Numerically stable softmax along `axis` (max subtracted per slice).
template <typename Scalar>
TensorT<Scalar> softmax(const TensorT<Scalar>& x, int axis)
{
    const int a = detail::normalize_axis(axis, x.rank(), "softmax");
    Index outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.dim(i);
    for (int i = a + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const Index len = x.dim(a);

    Buffer<Scalar> out(x.numel());
    if (inner == 1) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> in(x.data().data(),
                                                                                                    outer, len);
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> res(out.data(), outer, len);
        for (Index r = 0; r < outer; ++r) {
            res.row(r) = (in.row(r) - in.row(r).maxCoeff()).exp();
            res.row(r) /= res.row(r).sum();
        }
    } else {
        for (Index o = 0; o < outer; ++o)
            for (Index i = 0; i < inner; ++i) {
                const Index base = o * len * inner + i;
                Scalar peak = -std::numeric_limits<Scalar>::infinity();
                for (Index j = 0; j < len; ++j) peak = std::max(peak, x.data()[base + j * inner]);
                Scalar total = 0;
                for (Index j = 0; j < len; ++j) {
                    out[base + j * inner] = std::exp(x.data()[base + j * inner] - peak);
                    total += out[base + j * inner];
                }
                for (Index j = 0; j < len; ++j) out[base + j * inner] /= total;
            }
    }

    return make_op<Scalar>("softmax", x.shape(), std::move(out), {x}, [x, outer, len, inner](Node<Scalar>& self) {
        // dx = y * (dy - <dy, y>) along the axis
        const Buffer<Scalar>& y = self.value;
        Buffer<Scalar>& gx = x.node()->grad_buffer();
        if (inner == 1) {
            for (Index r = 0; r < outer; ++r) {
                auto ys = y.segment(r * len, len);
                auto dys = self.grad.segment(r * len, len);
                const Scalar dot = (ys * dys).sum();
                gx.segment(r * len, len) += ys * (dys - dot);
            }
        } else {
            for (Index o = 0; o < outer; ++o)
                for (Index i = 0; i < inner; ++i) {
                    const Index base = o * len * inner + i;
                    Scalar dot = 0;
                    for (Index j = 0; j < len; ++j) dot += y[base + j * inner] * self.grad[base + j * inner];
                    for (Index j = 0; j < len; ++j)
                        gx[base + j * inner] += y[base + j * inner] * (self.grad[base + j * inner] - dot);
                }
        }
    });
}

/// Concatenates along axis 1 (channels). All other dims must agree.
template <typename Scalar>
TensorT<Scalar> concat_channels(const TensorT<Scalar>& a, const TensorT<Scalar>& b)
{
    if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0))
        throw ShapeError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    Index spatial = 1;
    for (int i = 2; i < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_channels: incompatible shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
        spatial *= a.dim(i);
    }
    const Index batches = a.dim(0);
    const Index sa = a.dim(1) * spatial, sb = b.dim(1) * spatial;
    Shape shape = a.shape();
    shape[1] = a.dim(1) + b.dim(1);
    Buffer<Scalar> out(a.numel() + b.numel());
    for (Index n = 0; n < batches; ++n) {
        out.segment(n * (sa + sb), sa) = a.data().segment(n * sa, sa);
        out.segment(n * (sa + sb) + sa, sb) = b.data().segment(n * sb, sb);
    }
    return make_op<Scalar>("concat", std::move(shape), std::move(out), {a, b},
                           [a, b, batches, sa, sb](Node<Scalar>& self) {
                               if (a.requires_grad()) {
                                   auto& g = a.node()->grad_buffer();
                                   for (Index n = 0; n < batches; ++n)
                                       g.segment(n * sa, sa) += self.grad.segment(n * (sa + sb), sa);
                               }
                               if (b.requires_grad()) {
                                   auto& g = b.node()->grad_buffer();
                                   for (Index n = 0; n < batches; ++n)
                                       g.segment(n * sb, sb) += self.grad.segment(n * (sa + sb) + sa, sb);
                               }
                           });
}

// Activations.

template <typename Scalar>
TensorT<Scalar> relu(const TensorT<Scalar>& x)
{
    return unary_map(
        x, "relu", [](Scalar v) { return v > 0 ? v : Scalar(0); }, [](Scalar v) { return v > 0 ? Scalar(1) : Scalar(0); });
}

/// min(max(0, x), 6)
template <typename Scalar>
TensorT<Scalar> relu6(const TensorT<Scalar>& x)
{
    return unary_map(
        x, "relu6", [](Scalar v) { return std::min(std::max(v, Scalar(0)), Scalar(6)); },
        [](Scalar v) { return (v > 0 && v < 6) ? Scalar(1) : Scalar(0); });
}

/// x * relu6(x + 3) / 6
template <typename Scalar>
TensorT<Scalar> h_swish(const TensorT<Scalar>& x)
{
    return unary_map(
        x, "h_swish",
        [](Scalar v) { return v * std::min(std::max(v + Scalar(3), Scalar(0)), Scalar(6)) / Scalar(6); },
        [](Scalar v) {
            if (v <= -3) return Scalar(0);
            if (v >= 3) return Scalar(1);
            return (Scalar(2) * v + Scalar(3)) / Scalar(6);
        });
}

/// relu6(x + 3) / 6, the gate used by squeeze-and-excitation.
template <typename Scalar>
TensorT<Scalar> hard_sigmoid(const TensorT<Scalar>& x)
{
    return unary_map(
        x, "hard_sigmoid", [](Scalar v) { return std::min(std::max(v + Scalar(3), Scalar(0)), Scalar(6)) / Scalar(6); },
        [](Scalar v) { return (v > -3 && v < 3) ? Scalar(1) / Scalar(6) : Scalar(0); });
}

template <typename Scalar>
TensorT<Scalar> sigmoid(const TensorT<Scalar>& x)
{
    Buffer<Scalar> out = x.data().unaryExpr([](Scalar v) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
    });
    return make_op<Scalar>("sigmoid", x.shape(), std::move(out), {x}, [x](Node<Scalar>& self) {
        x.node()->accumulate(self.grad * self.value * (Scalar(1) - self.value));
    });
}

}  // namespace dafdft
