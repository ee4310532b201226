#pragma once

// Cutout augmentation applied during fine-tuning: `iterations` square zero
// masks per image, each of side base_mask * u with u uniform in
// {1, ..., size_multiplier}. A mask's top-left corner is uniform over every
// position where the mask still overlaps the image, so masks may hang over
// the border and get clipped. All channels are zeroed together.

#include "dafdft/layers.hpp"

#include <vector>

namespace dafdft {

struct CutoutConfig {
    int base_mask = 4;
    int iterations = 3;       // alpha
    int size_multiplier = 5;  // beta
    bool enabled = true;

    void validate() const;
};

struct CutoutMask {
    Index top = 0, left = 0;  // may be negative
    Index side = 0;
};

std::vector<CutoutMask> sample_cutout_masks(const CutoutConfig& cfg, Index height, Index width, Rng& rng);

/// Zeroes the clipped masks in-place on an image [C,H,W].
void apply_cutout_masks(Buffer<float>& image, Index channels, Index height, Index width,
                        const std::vector<CutoutMask>& masks);

/// Returns a masked copy of image [C,H,W]; identity when cfg.enabled is false.
Tensor cutout(const Tensor& image, const CutoutConfig& cfg, Rng& rng);

/// Cutout per image of [B,C,H,W], image i drawing from its own stream seeded
/// by (seed, i).
Tensor augment_batch(const Tensor& batch, const CutoutConfig& cfg, std::uint64_t seed);

}  // namespace dafdft
