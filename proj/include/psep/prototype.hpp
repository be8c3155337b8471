#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "psep/params.hpp"

namespace psep {

inline constexpr double kDefaultGamma = 1e-5;

inline constexpr const char* kReduce1Weight = "reduce.c0.weight";
inline constexpr const char* kReduce1Bias = "reduce.c0.bias";
inline constexpr const char* kReduce2Weight = "reduce.c1.weight";
inline constexpr const char* kReduce2Bias = "reduce.c1.bias";
inline constexpr const char* kPrototypes = "prototypes";
inline constexpr const char* kClassifier = "classifier";

/// Training patch a prototype was projected onto.
struct PatchSource {
    std::size_t image_id = 0;
    std::size_t y = 0;
    std::size_t x = 0;
    /// Attention value at the patch location when it was projected.
    double attention = 0.0;
    bool operator==(const PatchSource&) const = default;
};

/// m = K*c class-assigned prototype vectors. Prototype l belongs to class l / c.
struct PrototypeBank {
    Tensor vectors;  // [m, D]
    std::vector<std::size_t> class_of;
    std::size_t classes = 0;
    std::size_t per_class = 0;
    double gamma = kDefaultGamma;
    std::vector<std::optional<PatchSource>> sources;

    std::size_t size() const { return class_of.size(); }
    std::size_t dim() const { return vectors.rank() == 2 ? vectors.dim(1) : 0; }
    void validate() const;
};

std::vector<std::size_t> prototype_classes(std::size_t classes, std::size_t per_class);

/// Uniform in (0,1)^D.
PrototypeBank make_prototype_bank(std::size_t classes, std::size_t per_class, std::size_t dim, double gamma,
                                  std::mt19937_64& rng);

/// W[k][l] = +1 if prototype l belongs to class k, else -0.5.
Tensor init_classifier(std::span<const std::size_t> class_of, std::size_t classes);

/// Two 1x1 convs D' -> mid -> D.
void init_reduction(std::size_t in_channels, std::size_t mid_channels, std::size_t out_channels, ParamSet& params,
                    std::mt19937_64& rng);

/// features [B,H,W,D'] -> Z [B,H,W,D] in (0,1): relu after the first conv, sigmoid after the second.
Var reduce(Var features, const Bindings& params);

/// Z [B,H,W,D], prototypes [m,D] -> log((d+1)/(d+gamma)) maps [B,H,W,m].
Var similarity(Var z, Var prototypes, double gamma);

struct ScoredMaps {
    Var modulated;  // [B,H,W,m]
    Var scores;     // [B,m]
};

/// attention [B,H,W,1] must be nonnegative; throws std::invalid_argument otherwise.
ScoredMaps modulate_and_score(Var maps, Var attention);

/// scores [B,m], weight [K,m] -> logits [B,K].
Var classify(Var scores, Var weight);

/// One image's reduced features and label, used for prototype projection.
struct LabeledPatches {
    Tensor z;  // [H,W,D]
    std::size_t label = 0;
    std::size_t image_id = 0;
};

/// Replaces every prototype with the nearest same-class training patch (squared L2,
/// first minimum in image order then row-major location). Records each patch source.
/// Throws std::invalid_argument when a class has no patches.
PrototypeBank project_prototypes(const PrototypeBank& bank, std::span<const LabeledPatches> patches);

/// Streaming variant of project_prototypes for large datasets.
class PrototypeProjector {
public:
    explicit PrototypeProjector(const PrototypeBank& bank);
    void add(const LabeledPatches& patches);
    PrototypeBank finish() const;

private:
    PrototypeBank bank_;
    std::vector<double> best_dist_;
    std::vector<std::vector<double>> best_vec_;
    std::vector<std::optional<PatchSource>> best_src_;
};

}  // namespace psep
