#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "psep/model.hpp"

namespace psep {

/// Bilinear resize of an [h,w] map to [H,W] (pixel-centre alignment, edge clamping).
Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width);

/// Heatmap colouring blended over an image: out = (1-w)*image + w*colour(map/max).
Tensor overlay(const Tensor& image, const Tensor& map, double weight = 0.5);

struct HeatmapEntry {
    std::size_t rank = 0;
    std::size_t prototype = 0;
    std::size_t cls = 0;
    double score = 0.0;       // modulated, max-pooled similarity
    std::size_t peak_y = 0;   // location of the map maximum on the feature grid
    std::size_t peak_x = 0;
    std::string file;
    Tensor map;               // similarity map upsampled to the input size
};

struct HeatmapExport {
    std::vector<HeatmapEntry> entries;
    Tensor attention;   // upsampled attention map
    std::vector<double> scores;  // every prototype score, in prototype order
};

/// Similarity heatmaps of the top_n highest-scoring prototypes (clamped to m) on one
/// image [H,W,3], plus the attention overlay. When `dir` is non-empty, writes
/// <prefix>_attention.ppm, <prefix>_top<r>_p<id>.ppm and <prefix>_scores.csv.
HeatmapExport export_heatmaps(const Model& model, const Tensor& image, std::size_t top_n,
                              const std::filesystem::path& dir = {}, const std::string& prefix = "img");

/// One row per prototype: id, class, D vector entries, attention at the projection site,
/// and the source image id and location (empty when unprojected).
std::string prototype_vectors_csv(const Model& model);

struct PrototypeRow {
    std::size_t id = 0;
    std::size_t cls = 0;
    std::vector<double> vector;
    double attention = 0.0;
    bool projected = false;
};

std::vector<PrototypeRow> parse_prototype_csv(const std::string& text);

struct SeparationSummary {
    double intra = 0.0;           // mean distance between same-class prototypes
    double inter = 0.0;           // mean distance between prototypes of different classes
    double background = 0.0;      // mean pairwise distance among the lowest-attention prototypes
    double discriminative = 0.0;  // mean pairwise distance among the rest
    std::size_t background_count = 0;
};

/// Euclidean distances between prototype vectors; the `background_count` prototypes with the
/// lowest attention at their projection sites form the background set.
SeparationSummary separation_summary(const std::vector<PrototypeRow>& rows, std::size_t background_count);

}  // namespace psep
