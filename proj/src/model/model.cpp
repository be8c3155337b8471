#include "psep/model.hpp"

#include <random>
#include <stdexcept>

#include "psep/ops.hpp"

namespace psep {

void ModelConfig::validate() const {
    backbone.validate();
    if (classes < 2) throw std::invalid_argument("model: at least two classes required");
    if (!attention_head && !prototype_head) throw std::invalid_argument("model: no head enabled");
    if (prototype_head) {
        if (per_class == 0 || proto_dim == 0 || reduce_mid == 0) throw std::invalid_argument("model: empty prototype layer");
        if (backbone.output_channels() < proto_dim) {
            throw std::invalid_argument("model: prototype dimension exceeds backbone channels");
        }
        if (!(gamma > 0.0)) throw std::invalid_argument("model: gamma must be positive");
    }
}

Variant parse_variant(const std::string& name) {
    if (name == "full") return Variant::Full;
    if (name == "baseline") return Variant::Baseline;
    if (name == "attention") return Variant::AttentionOnly;
    throw std::invalid_argument("unknown model variant '" + name + "' (expected full, baseline or attention)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::Baseline: return "baseline";
        case Variant::AttentionOnly: return "attention";
    }
    return "?";
}

ModelConfig apply_variant(ModelConfig cfg, Variant v) {
    switch (v) {
        case Variant::Full:
            cfg.attention_head = cfg.prototype_head = cfg.modulate = true;
            break;
        case Variant::Baseline:
            cfg.attention_head = false;
            cfg.prototype_head = true;
            cfg.modulate = false;
            break;
        case Variant::AttentionOnly:
            cfg.attention_head = true;
            cfg.prototype_head = false;
            cfg.modulate = false;
            break;
    }
    return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    init_backbone(cfg_.backbone, params_, rng);
    const std::size_t channels = cfg_.backbone.output_channels();
    if (cfg_.attention_head) init_attention(channels, cfg_.classes, params_, rng);
    if (cfg_.prototype_head) {
        init_reduction(channels, cfg_.reduce_mid, cfg_.proto_dim, params_, rng);
        PrototypeBank bank = make_prototype_bank(cfg_.classes, cfg_.per_class, cfg_.proto_dim, cfg_.gamma, rng);
        params_[kPrototypes] = bank.vectors;
        params_[kClassifier] = init_classifier(bank.class_of, cfg_.classes);
        class_of_ = bank.class_of;
        sources_ = bank.sources;
    }
    for (auto& [name, t] : params_) t.round_to_float();
}

void Model::set_sources(std::vector<std::optional<PatchSource>> sources) {
    if (sources.size() != class_of_.size()) throw std::invalid_argument("model: patch source count mismatch");
    sources_ = std::move(sources);
}

PrototypeBank Model::bank() const {
    if (!cfg_.prototype_head) throw std::logic_error("model has no prototype head");
    PrototypeBank b;
    b.vectors = params_.at(kPrototypes);
    b.class_of = class_of_;
    b.classes = cfg_.classes;
    b.per_class = cfg_.per_class;
    b.gamma = cfg_.gamma;
    b.sources = sources_;
    return b;
}

void Model::set_bank(const PrototypeBank& bank) {
    bank.validate();
    if (bank.class_of != class_of_ || bank.vectors.shape() != params_.at(kPrototypes).shape()) {
        throw std::invalid_argument("model: prototype bank does not match model layout");
    }
    params_[kPrototypes] = bank.vectors;
    params_[kPrototypes].round_to_float();
    sources_ = bank.sources;
    sources_.resize(class_of_.size());
}

std::map<std::string, Shape> Model::parameter_shapes() const {
    std::map<std::string, Shape> out;
    for (const auto& [name, t] : params_) out[name] = t.shape();
    return out;
}

Forward forward(const Model& model, const Bindings& params, Var images) {
    const ModelConfig& cfg = model.config();
    Forward f;
    f.features = backbone_forward(cfg.backbone, params, images);
    if (cfg.attention_head) f.attention = attention_forward(f.features, params);
    if (cfg.prototype_head) {
        Graph& g = images.graph();
        f.z = reduce(f.features, params);
        f.distances = ops::sq_l2_distance_maps(f.z, params.at(kPrototypes));
        f.maps = ops::log_ratio(f.distances, cfg.gamma);
        if (cfg.attention_head && cfg.modulate) {
            f.weights = f.attention.attention;
        } else {
            const Shape& zs = f.z.shape();
            f.weights = g.constant(Tensor(Shape{zs[0], zs[1], zs[2], 1}, 1.0));
        }
        ScoredMaps s = modulate_and_score(f.maps, f.weights);
        f.modulated = s.modulated;
        f.scores = s.scores;
        f.proto_logits = classify(f.scores, params.at(kClassifier));
    }
    return f;
}

LossBreakdown total_loss(const Model& model, const Forward& fwd, std::span<const std::size_t> labels,
                         const LossConfig& cfg) {
    LossBreakdown out;
    std::vector<Var> terms;
    if (fwd.attention.logits.valid()) {
        out.ce_att = ops::softmax_cross_entropy(fwd.attention.logits, labels);
        terms.push_back(out.ce_att);
    }
    if (fwd.proto_logits.valid()) {
        out.ce_reg = ops::softmax_cross_entropy(fwd.proto_logits, labels);
        terms.push_back(out.ce_reg);
        if (cfg.lambda1 != 0.0 || cfg.lambda2 != 0.0) {
            BatchRegularization r = batch_regularization_loss(fwd.distances, fwd.weights, model.class_of(), labels, cfg);
            out.reg = r.loss;
            out.reg_per_sample = std::move(r.per_sample);
            terms.push_back(out.reg);
        }
    }
    out.total = terms.at(0);
    for (std::size_t i = 1; i < terms.size(); ++i) out.total = ops::add(out.total, terms[i]);
    return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[r * k + j] > logits[r * k + best]) best = j;
        out[r] = best;
    }
    return out;
}

Predictions predict(const Model& model, const Tensor& images) {
    Graph g;
    Bindings b(g, model.params(), nullptr);
    Forward f = forward(model, b, g.constant(images));
    Predictions p;
    if (f.attention.logits.valid()) p.attention = argmax_rows(f.attention.logits.value());
    if (f.proto_logits.valid()) p.prototype = argmax_rows(f.proto_logits.value());
    return p;
}

}  // namespace psep
