#include "psep/prototype.hpp"

#include <limits>
#include <stdexcept>
#include <string>

#include "psep/ops.hpp"

namespace psep {

void PrototypeBank::validate() const {
    if (!(gamma > 0.0)) throw std::invalid_argument("prototype bank: gamma must be positive");
    if (classes == 0 || per_class == 0) throw std::invalid_argument("prototype bank: empty");
    if (class_of.size() != classes * per_class) throw std::invalid_argument("prototype bank: m != K*c");
    if (vectors.rank() != 2 || vectors.dim(0) != class_of.size()) {
        throw std::invalid_argument("prototype bank: vectors " + to_string(vectors.shape()) + " do not hold " +
                                    std::to_string(class_of.size()) + " prototypes");
    }
    std::vector<std::size_t> count(classes, 0);
    for (std::size_t c : class_of) {
        if (c >= classes) throw std::invalid_argument("prototype bank: class index out of range");
        ++count[c];
    }
    for (std::size_t n : count) {
        if (n != per_class) throw std::invalid_argument("prototype bank: unequal prototypes per class");
    }
}

std::vector<std::size_t> prototype_classes(std::size_t classes, std::size_t per_class) {
    std::vector<std::size_t> out(classes * per_class);
    for (std::size_t l = 0; l < out.size(); ++l) out[l] = l / per_class;
    return out;
}

PrototypeBank make_prototype_bank(std::size_t classes, std::size_t per_class, std::size_t dim, double gamma,
                                  std::mt19937_64& rng) {
    PrototypeBank bank;
    bank.classes = classes;
    bank.per_class = per_class;
    bank.gamma = gamma;
    bank.class_of = prototype_classes(classes, per_class);
    bank.vectors = Tensor(Shape{classes * per_class, dim});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : bank.vectors.data()) v = u(rng);
    bank.sources.assign(bank.class_of.size(), std::nullopt);
    bank.validate();
    return bank;
}

Tensor init_classifier(std::span<const std::size_t> class_of, std::size_t classes) {
    const std::size_t m = class_of.size();
    Tensor w(Shape{classes, m});
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t l = 0; l < m; ++l) w[k * m + l] = class_of[l] == k ? 1.0 : -0.5;
    return w;
}

void init_reduction(std::size_t in_channels, std::size_t mid_channels, std::size_t out_channels, ParamSet& params,
                    std::mt19937_64& rng) {
    params[kReduce1Weight] = he_uniform(Shape{1, 1, in_channels, mid_channels}, in_channels, rng);
    params[kReduce1Bias] = Tensor(Shape{mid_channels});
    params[kReduce2Weight] = glorot_uniform(Shape{1, 1, mid_channels, out_channels}, mid_channels, out_channels, rng);
    params[kReduce2Bias] = Tensor(Shape{out_channels});
}

Var reduce(Var features, const Bindings& params) {
    Var h = ops::relu(ops::bias_add(ops::conv2d(features, params.at(kReduce1Weight)), params.at(kReduce1Bias)));
    return ops::sigmoid(ops::bias_add(ops::conv2d(h, params.at(kReduce2Weight)), params.at(kReduce2Bias)));
}

Var similarity(Var z, Var prototypes, double gamma) {
    return ops::log_ratio(ops::sq_l2_distance_maps(z, prototypes), gamma);
}

ScoredMaps modulate_and_score(Var maps, Var attention) {
    for (double a : attention.value().data()) {
        if (!(a >= 0.0)) throw std::invalid_argument("modulate_and_score: negative attention value " + std::to_string(a));
    }
    ScoredMaps out;
    out.modulated = ops::mul(maps, attention);
    out.scores = ops::spatial_max_pool(out.modulated);
    return out;
}

Var classify(Var scores, Var weight) { return ops::linear(scores, weight); }

PrototypeProjector::PrototypeProjector(const PrototypeBank& bank)
    : bank_(bank),
      best_dist_(bank.size(), std::numeric_limits<double>::infinity()),
      best_vec_(bank.size()),
      best_src_(bank.size()) {
    bank_.validate();
}

void PrototypeProjector::add(const LabeledPatches& p) {
    const std::size_t d = bank_.dim();
    if (p.z.rank() != 3 || p.z.dim(2) != d) {
        throw std::invalid_argument("project_prototypes: patches " + to_string(p.z.shape()) + " do not have dimension " +
                                    std::to_string(d));
    }
    const std::size_t w = p.z.dim(1), n = p.z.dim(0) * w;
    for (std::size_t l = 0; l < bank_.size(); ++l) {
        if (bank_.class_of[l] != p.label) continue;
        const double* proto = bank_.vectors.data().data() + l * d;
        for (std::size_t t = 0; t < n; ++t) {
            const double* z = p.z.data().data() + t * d;
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) dist += (z[j] - proto[j]) * (z[j] - proto[j]);
            if (dist < best_dist_[l]) {
                best_dist_[l] = dist;
                best_vec_[l].assign(z, z + d);
                best_src_[l] = PatchSource{p.image_id, t / w, t % w};
            }
        }
    }
}

PrototypeBank PrototypeProjector::finish() const {
    PrototypeBank out = bank_;
    const std::size_t d = bank_.dim();
    for (std::size_t l = 0; l < out.size(); ++l) {
        if (!best_src_[l]) {
            throw std::invalid_argument("project_prototypes: no training patches for class " +
                                        std::to_string(out.class_of[l]));
        }
        for (std::size_t j = 0; j < d; ++j) out.vectors[l * d + j] = best_vec_[l][j];
        out.sources[l] = best_src_[l];
    }
    return out;
}

PrototypeBank project_prototypes(const PrototypeBank& bank, std::span<const LabeledPatches> patches) {
    PrototypeProjector projector(bank);
    for (const auto& p : patches) projector.add(p);
    return projector.finish();
}

}  // namespace psep
