#pragma once

// Network sections shared by the float model and the double-precision
// gradient checks: desk-scale backbones, the Fine-Tune Transformer and the
// MBblockV3 inverted residual.

#include "dafdft/attention.hpp"

#include <array>
#include <string_view>

namespace dafdft {

enum class BackboneKind { PlainCnn, SepCnn };

inline std::string_view to_string(BackboneKind kind)
{
    return kind == BackboneKind::PlainCnn ? "plain-cnn" : "sep-cnn";
}

inline BackboneKind parse_backbone_kind(std::string_view name)
{
    if (name == "plain-cnn") return BackboneKind::PlainCnn;
    if (name == "sep-cnn") return BackboneKind::SepCnn;
    throw std::invalid_argument("unknown backbone kind '" + std::string(name) + "' (expected plain-cnn or sep-cnn)");
}

/// Output widths of the four backbone blocks; blocks 1 and 3 downsample.
inline constexpr std::array<Index, 4> kBackboneChannels{16, 32, 32, 64};
inline constexpr std::array<int, 4> kBackboneStrides{2, 1, 2, 1};

template <typename Scalar>
struct BackboneBlock {
    Conv2dParams<Scalar> conv;        // plain-cnn
    SeparableConvParams<Scalar> sep;  // sep-cnn
    BatchNormState<Scalar> bn;

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        if (conv.weight.defined()) conv.visit(prefix + ".conv", f);
        if (sep.depthwise.defined()) sep.visit(prefix + ".sep", f);
        bn.visit(prefix + ".bn", f);
    }
};

template <typename Scalar>
struct BackboneParams {
    BackboneKind kind = BackboneKind::PlainCnn;
    std::vector<BackboneBlock<Scalar>> blocks;
    DenseParams<Scalar> head;  // standalone pretraining classifier

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f, bool with_head = true) const
    {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i), f);
        if (with_head) head.visit(prefix + ".head", f);
    }
};

/// Four conv+BN+ReLU blocks (separable convs for sep-cnn) ending at
/// [B,64,H/4,W/4], plus a GAP -> dense -> sigmoid head.
template <typename Scalar>
BackboneParams<Scalar> build_backbone(BackboneKind kind, Rng& rng)
{
    BackboneParams<Scalar> p;
    p.kind = kind;
    Index in = 3;
    for (std::size_t i = 0; i < kBackboneChannels.size(); ++i) {
        BackboneBlock<Scalar> block;
        if (kind == BackboneKind::PlainCnn)
            block.conv = Conv2dParams<Scalar>::glorot(in, kBackboneChannels[i], 3, kBackboneStrides[i], false, rng);
        else
            block.sep = SeparableConvParams<Scalar>::glorot(in, kBackboneChannels[i], kBackboneStrides[i], false, rng);
        block.bn = BatchNormState<Scalar>::identity(kBackboneChannels[i]);
        p.blocks.push_back(std::move(block));
        in = kBackboneChannels[i];
    }
    p.head = DenseParams<Scalar>::glorot(in, 1, rng);
    return p;
}

template <typename Scalar>
BackboneParams<Scalar> build_backbone(BackboneKind kind, std::uint64_t seed)
{
    Rng rng(seed);
    return build_backbone<Scalar>(kind, rng);
}

template <typename Scalar>
TensorT<Scalar> backbone_features(const TensorT<Scalar>& image, BackboneParams<Scalar>& p, Mode mode)
{
    TensorT<Scalar> z = image;
    for (auto& block : p.blocks) {
        z = block.conv.weight.defined() ? conv2d(z, block.conv) : separable_conv2d(z, block.sep);
        z = relu(batch_norm(z, block.bn, mode));
    }
    return z;
}

/// Fake probability [B,1] from the standalone pretraining head.
template <typename Scalar>
TensorT<Scalar> backbone_classify(const TensorT<Scalar>& image, BackboneParams<Scalar>& p, Mode mode)
{
    return sigmoid(dense(global_avg_pool(backbone_features(image, p, mode)), p.head));
}

// Fine-Tune Transformer.

template <typename Scalar>
struct FttStageParams {
    SelfAttentionParams<Scalar> attention;
    SeparableConvParams<Scalar> conv;  // stride 2
    BatchNormState<Scalar> bn;

    static FttStageParams create(Index in_channels, Index out_channels, Rng& rng)
    {
        FttStageParams s;
        s.attention = SelfAttentionParams<Scalar>::glorot(in_channels, rng);
        s.conv = SeparableConvParams<Scalar>::glorot(in_channels, out_channels, 2, false, rng);
        s.bn = BatchNormState<Scalar>::identity(out_channels);
        return s;
    }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        attention.visit(prefix + ".attention", f);
        conv.visit(prefix + ".conv", f);
        bn.visit(prefix + ".bn", f);
    }
};

template <typename Scalar>
struct FttParams {
    SeparableConvParams<Scalar> stem;
    BatchNormState<Scalar> stem_bn;
    std::vector<FttStageParams<Scalar>> stages;

    /// Stem 3 -> widths[0] at full resolution, then one stage per width.
    static FttParams create(const std::vector<int>& widths, Rng& rng)
    {
        if (widths.empty()) throw std::invalid_argument("FTT needs at least one stage width");
        FttParams p;
        p.stem = SeparableConvParams<Scalar>::glorot(3, widths.front(), 1, false, rng);
        p.stem_bn = BatchNormState<Scalar>::identity(widths.front());
        Index in = widths.front();
        for (int w : widths) {
            p.stages.push_back(FttStageParams<Scalar>::create(in, w, rng));
            in = w;
        }
        return p;
    }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        stem.visit(prefix + ".stem", f);
        stem_bn.visit(prefix + ".stem_bn", f);
        for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(prefix + ".stage" + std::to_string(i), f);
    }
};

/// self-attention -> separable 3x3 stride 2 -> BN -> ReLU. With
/// `bypass_attention` the attention module is replaced by the identity.
template <typename Scalar>
TensorT<Scalar> ftt_stage_forward(const TensorT<Scalar>& x, FttStageParams<Scalar>& s, Mode mode,
                                  bool bypass_attention = false)
{
    const TensorT<Scalar> attended = bypass_attention ? x : self_attention_forward(x, s.attention).y;
    return relu(batch_norm(separable_conv2d(attended, s.conv), s.bn, mode));
}

template <typename Scalar>
TensorT<Scalar> ftt_forward(const TensorT<Scalar>& image, FttParams<Scalar>& p, Mode mode, bool bypass_attention = false)
{
    detail::require_nchw(image, "ftt_forward");
    const Index factor = Index{1} << p.stages.size();
    if (image.dim(2) % factor != 0 || image.dim(3) % factor != 0)
        throw ShapeError("FTT with " + std::to_string(p.stages.size()) + " stages needs a resolution divisible by " +
                         std::to_string(factor) + ", got " + to_string(image.shape()));
    auto z = relu(batch_norm(separable_conv2d(image, p.stem), p.stem_bn, mode));
    for (auto& stage : p.stages) z = ftt_stage_forward(z, stage, mode, bypass_attention);
    return z;
}

// MBblockV3.

template <typename Scalar>
struct MBBlockParams {
    Conv2dParams<Scalar> expand;  // 1x1, C_in -> C_in * expansion
    BatchNormState<Scalar> expand_bn;
    TensorT<Scalar> depthwise;  // [hidden,1,3,3]
    BatchNormState<Scalar> depthwise_bn;
    SqueezeExciteParams<Scalar> se;
    Conv2dParams<Scalar> project;  // 1x1, hidden -> C_out
    BatchNormState<Scalar> project_bn;
    int stride = 1;

    static MBBlockParams create(Index in_channels, Index out_channels, int expansion, int se_ratio, int stride, Rng& rng)
    {
        if (stride != 1 && stride != 2) throw std::invalid_argument("MBblockV3 stride must be 1 or 2");
        const Index hidden = in_channels * expansion;
        MBBlockParams b;
        b.expand = Conv2dParams<Scalar>::glorot(in_channels, hidden, 1, 1, false, rng);
        b.expand_bn = BatchNormState<Scalar>::identity(hidden);
        b.depthwise = glorot_uniform<Scalar>({hidden, 1, 3, 3}, 9, 9, rng);
        b.depthwise_bn = BatchNormState<Scalar>::identity(hidden);
        b.se = SqueezeExciteParams<Scalar>::glorot(hidden, se_ratio, rng);
        b.project = Conv2dParams<Scalar>::glorot(hidden, out_channels, 1, 1, false, rng);
        b.project_bn = BatchNormState<Scalar>::identity(out_channels);
        b.stride = stride;
        return b;
    }

    Index in_channels() const { return expand.in_channels(); }
    Index out_channels() const { return project.out_channels(); }
    bool has_residual() const { return stride == 1 && in_channels() == out_channels(); }

    template <typename Visit>
    void visit(const std::string& prefix, Visit&& f) const
    {
        expand.visit(prefix + ".expand", f);
        expand_bn.visit(prefix + ".expand_bn", f);
        f(prefix + ".depthwise", depthwise, ParamKind::Trainable);
        depthwise_bn.visit(prefix + ".depthwise_bn", f);
        se.visit(prefix + ".se", f);
        project.visit(prefix + ".project", f);
        project_bn.visit(prefix + ".project_bn", f);
    }
};

/// expand -> BN -> h-swish -> depthwise 3x3 -> BN -> h-swish -> SE ->
/// project -> BN, plus the input when stride is 1 and widths match.
template <typename Scalar>
TensorT<Scalar> mbblock_forward(const TensorT<Scalar>& x, MBBlockParams<Scalar>& b, Mode mode)
{
    auto z = h_swish(batch_norm(conv2d(x, b.expand), b.expand_bn, mode));
    z = h_swish(batch_norm(depthwise_conv2d(z, b.depthwise, b.stride, Padding::Same), b.depthwise_bn, mode));
    z = squeeze_excite(z, b.se);
    z = batch_norm(conv2d(z, b.project), b.project_bn, mode);
    return b.has_residual() ? add(z, x) : z;
}

}  // namespace dafdft
