#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "psep/tensor.hpp"

namespace psep {

/// Desk-scale fine-grained benchmark. Classes are grouped into families; every class
/// of a family shares the same base glyph and background texture statistics, and only
/// a small detail inside the glyph tells the classes apart. The glyph lands at a random
/// position, and a detail-free decoy glyph is added elsewhere.
struct SyntheticDatasetConfig {
    std::size_t classes = 8;
    std::size_t families = 2;
    std::size_t image_size = 64;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 50;
    std::size_t patch_size = 12;
    std::size_t decoys = 1;
    std::uint64_t texture_seed = 7;

    void validate() const;
};

struct DatasetEntry {
    std::string path;  // relative to the dataset root
    std::size_t label = 0;
    std::string split;  // "train" or "test"
};

/// Dataset on disk: one directory per class of 8-bit binary PPM images plus split.csv.
struct Dataset {
    std::filesystem::path root;
    std::vector<DatasetEntry> entries;

    std::size_t classes() const;
    /// Entry indices (image ids) belonging to `split`, in index order.
    std::vector<std::size_t> split(const std::string& name) const;
};

Dataset load_dataset(const std::filesystem::path& root);
void write_index(const Dataset& ds);

/// H x W x 3 tensor in [0,1] <-> binary PPM (P6, maxval 255). Writing rounds to 8 bits.
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

/// Deterministic rendering of one synthetic image, quantised to 8 bits.
Tensor render_synthetic_image(const SyntheticDatasetConfig& cfg, std::uint64_t seed, const std::string& split,
                              std::size_t label, std::size_t index);

/// Writes the whole synthetic dataset under `dir`. Throws std::runtime_error when unwritable.
Dataset gen_dataset(const SyntheticDatasetConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);

/// Images of one split held in memory as 8-bit values.
class ImageSet {
public:
    ImageSet() = default;
    ImageSet(const Dataset& ds, const std::string& split);

    std::size_t size() const { return labels_.size(); }
    std::size_t image_size() const { return side_; }
    const std::vector<std::size_t>& labels() const { return labels_; }
    const std::vector<std::size_t>& ids() const { return ids_; }

    /// [n, S, S, 3] batch of the given positions.
    Tensor batch(std::span<const std::size_t> positions) const;
    Tensor image(std::size_t position) const;
    std::vector<std::size_t> labels_of(std::span<const std::size_t> positions) const;
    /// Position of an image id within this set, or size() when absent.
    std::size_t position_of(std::size_t image_id) const;

    void add(const Tensor& image, std::size_t label, std::size_t id);

private:
    std::size_t side_ = 0;
    std::vector<std::uint8_t> pixels_;
    std::vector<std::size_t> labels_;
    std::vector<std::size_t> ids_;
};

/// Accuracy of a nearest-class-centroid classifier on raw pixels (train centroids, test accuracy).
double pixel_centroid_accuracy(const ImageSet& train, const ImageSet& test, std::size_t classes);

}  // namespace psep
