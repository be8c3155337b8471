#pragma once

#include <cstdint>
#include <filesystem>

#include "psep/dataset.hpp"

namespace psep {

struct AugmentParams {
    double rotation = 0.0;  // radians
    double shear = 0.0;     // horizontal shear factor
    bool flip = false;      // horizontal
    double elastic = 0.0;   // peak displacement in pixels
};

/// Rotation within +-15 degrees, shear within +-0.1, a random flip and a smooth
/// elastic displacement of at most 1.5 px. Deterministic in (seed, image id, variant).
AugmentParams sample_augment_params(std::uint64_t seed, std::size_t image_id, std::size_t variant);

/// Warps an H x W x 3 image about its centre with bilinear sampling and edge clamping.
/// The displacement field is drawn from `field_seed`.
Tensor augment_image(const Tensor& image, const AugmentParams& p, std::uint64_t field_seed);

/// Copies `src` into `dst` and adds fold-1 warped variants of every training image
/// (train_<i>_v<k>.ppm next to the original). Test images are copied unchanged.
/// fold = 1 reproduces the input. Throws std::invalid_argument for fold = 0 or dst == src.
Dataset augment_dataset(const Dataset& src, std::size_t fold, std::uint64_t seed, const std::filesystem::path& dst);

}  // namespace psep
