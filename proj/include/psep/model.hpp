#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psep/attention.hpp"
#include "psep/backbone.hpp"
#include "psep/losses.hpp"
#include "psep/prototype.hpp"

namespace psep {

/// Which heads a network carries and how the prototype branch is weighted.
struct ModelConfig {
    BackboneConfig backbone;
    std::size_t classes = 8;
    std::size_t per_class = 10;
    std::size_t proto_dim = 32;
    std::size_t reduce_mid = 32;
    double gamma = kDefaultGamma;
    bool attention_head = true;
    bool prototype_head = true;
    /// When false (or without an attention head) the similarity maps are weighted by A = 1.
    bool modulate = true;

    std::size_t prototypes() const { return classes * per_class; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Named network variants.
enum class Variant { Full, Baseline, AttentionOnly };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
/// Heads/modulation for a variant on top of an existing config.
ModelConfig apply_variant(ModelConfig cfg, Variant v);

class Model {
public:
    Model() = default;
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    const std::vector<std::size_t>& class_of() const { return class_of_; }
    const std::vector<std::optional<PatchSource>>& sources() const { return sources_; }
    void set_sources(std::vector<std::optional<PatchSource>> sources);

    PrototypeBank bank() const;
    /// Installs projected prototypes and their patch sources.
    void set_bank(const PrototypeBank& bank);

    /// Expected parameter names and shapes for this config.
    std::map<std::string, Shape> parameter_shapes() const;

private:
    ModelConfig cfg_;
    ParamSet params_;
    std::vector<std::size_t> class_of_;
    std::vector<std::optional<PatchSource>> sources_;
};

/// Every intermediate a forward pass exposes. Vars of absent heads are invalid.
struct Forward {
    Var features;             // X  [B,h,w,D']
    AttentionVars attention;  // attention branch
    Var z;                    // reduced features [B,h,w,D]
    Var distances;            // [B,h,w,m]
    Var maps;                 // similarity maps [B,h,w,m]
    Var weights;              // attention used to modulate, [B,h,w,1]
    Var modulated;            // [B,h,w,m]
    Var scores;               // [B,m]
    Var proto_logits;         // [B,K]
};

Forward forward(const Model& model, const Bindings& params, Var images);

struct LossBreakdown {
    Var total;
    Var ce_att;
    Var ce_reg;
    Var reg;
    std::vector<double> reg_per_sample;

    double value(const Var& v) const { return v.valid() ? v.value().item() : 0.0; }
};

/// L = CE_att + CE_reg + L_reg; absent heads contribute nothing.
LossBreakdown total_loss(const Model& model, const Forward& fwd, std::span<const std::size_t> labels,
                         const LossConfig& cfg);

/// Per-sample argmax predictions of the attention and prototype heads (empty when absent).
struct Predictions {
    std::vector<std::size_t> attention;
    std::vector<std::size_t> prototype;
};

std::vector<std::size_t> argmax_rows(const Tensor& logits);
Predictions predict(const Model& model, const Tensor& images);

}  // namespace psep
