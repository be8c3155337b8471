#pragma once

#include <string>
#include <vector>

#include "psep/attacks.hpp"
#include "psep/dataset.hpp"
#include "psep/model.hpp"

namespace psep {

/// Accuracy table: one row per evaluated head, one column per attack setting.
struct RobustnessReport {
    struct Row {
        std::string name;
        std::vector<double> values;  // percent, one per column
    };
    std::vector<std::string> columns;
    std::vector<Row> rows;

    std::string to_text() const;
    std::string to_csv() const;
    /// Value at (row name, column name); throws std::out_of_range when absent.
    double at(const std::string& row, const std::string& column) const;
};

/// A model whose adversaries are transferred to the evaluated model.
struct Substitute {
    std::string name;
    const Model* model = nullptr;
    AttackConfig attack = AttackConfig::standard(AttackKind::PGD, 8.0 / 255.0);
};

struct EvalOptions {
    std::size_t batch = 32;
    /// Worker threads; 0 picks the hardware concurrency. Results do not depend on it.
    std::size_t threads = 0;
    /// Evaluate only the first `subset` images when nonzero.
    std::size_t subset = 0;
};

/// FGSM, BIM, PGD and MIM at eps 2/255 and 8/255 in report order.
std::vector<AttackConfig> standard_attack_matrix(std::uint64_t seed = 0);

/// Report order: Clean, then attacks grouped FGSM, BIM, PGD, MIM with increasing eps.
std::vector<AttackConfig> ordered_attacks(std::vector<AttackConfig> attacks);

/// Clean and per-attack accuracy of each head of `model` (rows "<name>-A" and "<name>-FR"),
/// followed by one "BB-<substitute>" column per substitute. Attack configs are validated
/// before any computation. Both heads see the same adversarial inputs.
RobustnessReport evaluate(const Model& model, const std::string& name, const ImageSet& data,
                          const std::vector<AttackConfig>& attacks, const std::vector<Substitute>& substitutes = {},
                          const EvalOptions& opt = {});

struct HeadAccuracy {
    double attention = -1.0;  // percent; negative when the head is absent
    double prototype = -1.0;
};

/// Accuracy of `target` on adversaries crafted against `source`.
HeadAccuracy transfer_eval(const Model& source, const Model& target, const ImageSet& data, const AttackConfig& cfg,
                           const EvalOptions& opt = {});

/// Accuracy of `model` on adversaries crafted against itself with `cfg`.
HeadAccuracy attack_accuracy(const Model& model, const ImageSet& data, const AttackConfig& cfg,
                             const EvalOptions& opt = {});

HeadAccuracy clean_accuracy(const Model& model, const ImageSet& data, const EvalOptions& opt = {});

/// Runs `fn(batch_index, positions)` over consecutive batches on worker threads.
void for_each_batch(std::size_t n, const EvalOptions& opt,
                    const std::function<void(std::size_t, std::span<const std::size_t>)>& fn);

}  // namespace psep
