#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "psep/attacks.hpp"
#include "psep/dataset.hpp"
#include "psep/losses.hpp"
#include "psep/model.hpp"

namespace psep {

/// Three-phase schedule: warmup (backbone and prototype classifier frozen), joint
/// training (prototype classifier frozen, step decay), then prototype projection
/// followed by classifier-only training.
struct TrainSchedule {
    std::size_t warmup_epochs = 5;
    double warmup_lr = 3e-4;
    std::size_t joint_epochs = 25;
    double joint_lr = 3e-3;
    double lr_decay = 0.1;
    std::size_t decay_every = 10;
    std::size_t classifier_epochs = 15;
    double classifier_lr = 3e-3;

    void validate() const;
    std::size_t projection_epoch() const { return warmup_epochs + joint_epochs; }
    std::size_t total_epochs() const { return warmup_epochs + joint_epochs + classifier_epochs; }
};

/// Fast adversarial training: one FGSM step from a uniform random start.
struct AdversarialTraining {
    bool enabled = false;
    double eps = 8.0 / 255.0;
    double alpha = 10.0 / 255.0;  // 1.25 * eps
};

struct TrainConfig {
    ModelConfig model;
    Variant variant = Variant::Full;
    LossConfig loss;
    TrainSchedule schedule;
    AdversarialTraining adv;
    std::uint64_t seed = 42;

    /// Applies the variant to the model config and checks every part.
    void validate() const;
    ModelConfig resolved_model() const { return apply_variant(model, variant); }
    /// The baseline trains without the regularizer whatever the lambdas say.
    LossConfig resolved_loss() const;
};

/// Flat key=value text. Lines starting with '#' and blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

/// Fills fields from recognised keys; unknown keys throw std::invalid_argument
/// unless `allow_unknown` is set.
void apply_keys(TrainConfig& cfg, const KeyValues& kv, bool allow_unknown = false);
void apply_keys(AttackConfig& cfg, const KeyValues& kv, bool allow_unknown = false);
void apply_keys(SyntheticDatasetConfig& cfg, const KeyValues& kv, bool allow_unknown = false);

/// Throws std::invalid_argument naming the first key no config section recognises.
void check_known_keys(const KeyValues& kv);

KeyValues to_key_values(const TrainConfig& cfg);
KeyValues to_key_values(const AttackConfig& cfg);

std::string format_stages(const std::vector<BackboneStage>& stages);
std::vector<BackboneStage> parse_stages(const std::string& text);

}  // namespace psep
