#pragma once

#include <random>
#include <string>
#include <vector>

#include "psep/params.hpp"

namespace psep {

struct BackboneStage {
    std::size_t out_channels = 0;
    std::size_t convs = 0;
    bool operator==(const BackboneStage&) const = default;
};

/// Fully-convolutional feature extractor: every stage opens with a stride-2 3x3 conv,
/// followed by (convs - 1) stride-1 3x3 convs, each with bias and relu.
struct BackboneConfig {
    std::size_t input_size = 64;
    std::size_t input_channels = 3;
    std::vector<BackboneStage> stages{{16, 2}, {32, 2}, {64, 2}};

    std::size_t downsampling() const;
    std::size_t output_size() const;
    std::size_t output_channels() const;
    /// Throws std::invalid_argument when the config is unusable.
    void validate() const;

    bool operator==(const BackboneConfig&) const = default;
};

/// Feature map X of one image, [H, W, D'].
struct FeatureMap {
    Tensor values;
    std::size_t image_id = 0;
};

std::string backbone_conv_name(std::size_t stage, std::size_t conv);

void init_backbone(const BackboneConfig& cfg, ParamSet& params, std::mt19937_64& rng);
/// Parameters initialised to zero (useful for tests).
void zero_backbone(const BackboneConfig& cfg, ParamSet& params);

/// images [B, S, S, C] in [0,1] -> features [B, S/f, S/f, D'].
Var backbone_forward(const BackboneConfig& cfg, const Bindings& params, Var images);

/// Checks images lie in [0,1] and match the configured shape. Throws std::invalid_argument.
void check_images(const BackboneConfig& cfg, const Tensor& images);

/// Single image [S, S, C] -> FeatureMap.
FeatureMap extract(const BackboneConfig& cfg, const ParamSet& params, const Tensor& image, std::size_t image_id = 0);

}  // namespace psep
