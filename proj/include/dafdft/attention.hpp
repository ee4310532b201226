#pragma once

// Spatial self-attention with a learnable residual scale, and the
// parameter-free channel attention over the C x C Gram matrix.

#include "dafdft/layers.hpp"

namespace dafdft {

template <typename Scalar>
struct SelfAttentionParams {
    Conv2dParams<Scalar> key;    // W_f: C -> C/8, applied at source positions i
    Conv2dParams<Scalar> query;  // W_g: C -> C/8, applied at output positions j
    Conv2dParams<Scalar> value;  // W_h: C -> C
    TensorT<Scalar> gamma;       // [1], starts at exactly 0

    static SelfAttentionParams glorot(Index channels, Rng& rng)
    {
        if (channels < 8 || channels % 8 != 0)
            throw ShapeError("self-attention needs a channel count divisible by 8, got " + std::to_string(channels));
        SelfAttentionParams p;
        p.key = Conv2dParams<Scalar>::glorot(channels, channels / 8, 1, 1, true, rng);
        p.query = Conv2dParams<Scalar>::glorot(channels, channels / 8, 1, 1, true, rng);
        p.value = Conv2dParams<Scalar>::glorot(channels, channels, 1, 1, true, rng);
        p.gamma = TensorT<Scalar>::zeros({1}, true);
        return p;
    }

    Index channels() const { return value.in_channels(); }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        key.visit(prefix + ".key", f);
        query.visit(prefix + ".query", f);
        value.visit(prefix + ".value", f);
        f(prefix + ".gamma", gamma, ParamKind::Trainable);
    }
};

template <typename Scalar>
struct SelfAttentionOutput {
    TensorT<Scalar> y;      // [B,C,H,W]
    TensorT<Scalar> alpha;  // [B,N,N], row j is a distribution over source positions i
};

/// y = gamma * o + x with o_j = sum_i alpha[j,i] h(x_i) and
/// alpha[j,:] = softmax_i(f(x_i) . g(x_j)).
template <typename Scalar>
SelfAttentionOutput<Scalar> self_attention_forward(const TensorT<Scalar>& x, const SelfAttentionParams<Scalar>& p)
{
    detail::require_nchw(x, "self_attention");
    const Index batches = x.dim(0), channels = x.dim(1), positions = x.dim(2) * x.dim(3);
    if (channels % 8 != 0)
        throw ShapeError("self-attention needs a channel count divisible by 8, got " + to_string(x.shape()));
    const Index reduced = channels / 8;

    auto f = reshape(conv2d(x, p.key), {batches, reduced, positions});
    auto g = reshape(conv2d(x, p.query), {batches, reduced, positions});
    auto h = reshape(conv2d(x, p.value), {batches, channels, positions});

    auto alpha = softmax(batch_dot(transpose_last2(g), f), 2);  // [B, j, i]
    auto o = transpose_last2(batch_dot(alpha, transpose_last2(h)));
    auto y = add(scale(reshape(o, x.shape()), p.gamma), x);
    return {std::move(y), std::move(alpha)};
}

template <typename Scalar>
struct ChannelAttentionOutput {
    TensorT<Scalar> y;     // [B,C,H,W]
    TensorT<Scalar> beta;  // [B,C,C], row j is a distribution over source channels i
};

/// y = reshape(beta * X) + x with X = x as [B,C,N] and beta = softmax(X X^T).
template <typename Scalar>
ChannelAttentionOutput<Scalar> channel_attention_forward(const TensorT<Scalar>& x)
{
    detail::require_nchw(x, "channel_attention");
    auto flat = reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
    auto beta = softmax(batch_dot(flat, transpose_last2(flat)), 2);
    auto y = add(reshape(batch_dot(beta, flat), x.shape()), x);
    return {std::move(y), std::move(beta)};
}

}  // namespace dafdft
