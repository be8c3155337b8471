#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "psep/checkpoint.hpp"
#include "psep/dataset.hpp"

namespace psep {

enum class Phase { Warmup, Joint, Classifier, Done };
std::string to_string(Phase p);

Phase phase_at(const TrainSchedule& s, std::size_t epoch);
double learning_rate_at(const TrainSchedule& s, std::size_t epoch);

struct EpochMetrics {
    std::size_t epoch = 0;
    Phase phase = Phase::Warmup;
    double lr = 0.0;
    double loss = 0.0;
    double ce_att = 0.0;
    double ce_reg = 0.0;
    double reg = 0.0;
    double acc_att = 0.0;    // training accuracy of the attention head, percent
    double acc_proto = 0.0;  // training accuracy of the prototype head, percent
};

std::string format_metrics(const EpochMetrics& m);

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Drives the three-phase schedule over an in-memory training split.
/// All randomness is derived from (seed, epoch, batch), so resuming at any epoch
/// boundary reproduces an uninterrupted run.
class Trainer {
public:
    Trainer(TrainConfig cfg, const ImageSet& train);
    /// Continues from a checkpoint that carries training state.
    Trainer(const Checkpoint& resume, const ImageSet& train);

    /// Runs epochs until `until_epoch` (exclusive) or the end of the schedule.
    void run(std::size_t until_epoch = static_cast<std::size_t>(-1),
             const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

    bool finished() const { return next_epoch_ >= cfg_.schedule.total_epochs(); }
    std::size_t next_epoch() const { return next_epoch_; }
    const Model& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<EpochMetrics>& log() const { return log_; }
    Checkpoint checkpoint() const;

    /// One optimisation step on a batch; exposed for tests. Returns the batch loss.
    double step(const Tensor& images, std::span<const std::size_t> labels, Phase phase, double lr,
                std::uint64_t batch_seed);

    /// Projects prototypes onto the nearest same-class training patch.
    void project();

private:
    EpochMetrics run_epoch(std::size_t epoch);
    EpochMetrics run_classifier_epoch(std::size_t epoch);
    bool trainable(const std::string& name, Phase phase) const;

    TrainConfig cfg_;
    const ImageSet& train_;
    Model model_;
    Adam adam_;
    std::size_t next_epoch_ = 0;
    std::vector<EpochMetrics> log_;
    std::optional<Tensor> cached_scores_;
};

/// Fast adversarial example: x + clip_eps(delta + alpha * sign(grad)) with delta ~ U(-eps, eps),
/// clipped to [0,1]. Uses the joint objective.
Tensor fast_adversarial_example(const Model& model, const Tensor& images, std::span<const std::size_t> labels,
                                double eps, double alpha, std::uint64_t seed);

}  // namespace psep
