#include "dafdft/augment.hpp"

namespace dafdft {

void CutoutConfig::validate() const
{
    if (base_mask < 1) throw std::invalid_argument("cutout base mask must be positive");
    if (iterations < 1) throw std::invalid_argument("cutout iterations (alpha) must be at least 1");
    if (size_multiplier < 1) throw std::invalid_argument("cutout size multiplier (beta) must be at least 1");
}

std::vector<CutoutMask> sample_cutout_masks(const CutoutConfig& cfg, Index height, Index width, Rng& rng)
{
    cfg.validate();
    std::vector<CutoutMask> masks;
    masks.reserve(static_cast<std::size_t>(cfg.iterations));
    std::uniform_int_distribution<int> multiplier(1, cfg.size_multiplier);
    for (int i = 0; i < cfg.iterations; ++i) {
        CutoutMask m;
        m.side = static_cast<Index>(cfg.base_mask) * multiplier(rng);
        m.top = std::uniform_int_distribution<Index>(1 - m.side, height - 1)(rng);
        m.left = std::uniform_int_distribution<Index>(1 - m.side, width - 1)(rng);
        masks.push_back(m);
    }
    return masks;
}

void apply_cutout_masks(Buffer<float>& image, Index channels, Index height, Index width,
                        const std::vector<CutoutMask>& masks)
{
    for (const auto& m : masks) {
        const Index y0 = std::max<Index>(m.top, 0), y1 = std::min<Index>(m.top + m.side, height);
        const Index x0 = std::max<Index>(m.left, 0), x1 = std::min<Index>(m.left + m.side, width);
        for (Index c = 0; c < channels; ++c)
            for (Index y = y0; y < y1; ++y)
                for (Index x = x0; x < x1; ++x) image[(c * height + y) * width + x] = 0.0f;
    }
}

Tensor cutout(const Tensor& image, const CutoutConfig& cfg, Rng& rng)
{
    if (image.rank() != 3) throw ShapeError("cutout expects [C,H,W], got " + to_string(image.shape()));
    if (!cfg.enabled) return image.detach();
    Buffer<float> data = image.data();
    apply_cutout_masks(data, image.dim(0), image.dim(1), image.dim(2), sample_cutout_masks(cfg, image.dim(1), image.dim(2), rng));
    return Tensor(image.shape(), std::move(data));
}

Tensor augment_batch(const Tensor& batch, const CutoutConfig& cfg, std::uint64_t seed)
{
    if (batch.rank() != 4) throw ShapeError("augment_batch expects [B,C,H,W], got " + to_string(batch.shape()));
    Buffer<float> data = batch.data();
    if (!cfg.enabled) return Tensor(batch.shape(), std::move(data));
    const Index channels = batch.dim(1), height = batch.dim(2), width = batch.dim(3);
    const Index image_size = channels * height * width;
    for (Index i = 0; i < batch.dim(0); ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(i)};
        Rng rng(seq);
        Buffer<float> image = data.segment(i * image_size, image_size);
        apply_cutout_masks(image, channels, height, width, sample_cutout_masks(cfg, height, width, rng));
        data.segment(i * image_size, image_size) = image;
    }
    return Tensor(batch.shape(), std::move(data));
}

}  // namespace dafdft
