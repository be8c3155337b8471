#pragma once

#include <span>
#include <vector>

#include "psep/autograd.hpp"
#include "psep/prototype.hpp"

namespace psep {

struct LossConfig {
    double lambda1 = 10.0;   // clustering weight
    double lambda2 = 0.08;   // separation weight
    std::size_t batch = 16;
    /// When false the attention maps enter the regularizer as constants.
    bool reg_attention_grad = false;

    /// Weights may be zero (unregularised baselines) but not negative.
    void validate() const;
};

// Graph-level terms. `distances` is [B,H,W,m] squared distances between reduced
// features and prototypes, `attention` is [B,H,W,1]. Results are summed over the batch.

/// sum_t a^t * min over own-class prototypes of the squared distance.
Var attentional_cluster_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                             std::span<const std::size_t> labels);
/// -sum_t a^t * min over other-class prototypes of the squared distance.
Var attentional_separation_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                                std::span<const std::size_t> labels);

struct BatchRegularization {
    Var loss;                       // mean over samples i
    std::vector<double> per_sample; // L_reg(I_i)
};

/// For each sample i: sum_j sum_t a_j^t (lambda1 * own_min_i^t - lambda2 * other_min_i^t).
/// Throws std::invalid_argument when the batch is empty or spatial shapes differ.
BatchRegularization batch_regularization_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                                              std::span<const std::size_t> labels, const LossConfig& cfg);

// Single-sample conveniences. z [H,W,D], attention [H,W].
double attentional_cluster_loss(const Tensor& z, const Tensor& attention, const PrototypeBank& bank, std::size_t label);
double attentional_separation_loss(const Tensor& z, const Tensor& attention, const PrototypeBank& bank,
                                   std::size_t label);

/// Batch form over explicit per-sample tensors. zs[i] is [H,W,D], attentions[i] is [H,W].
std::vector<double> batch_regularization_loss(std::span<const Tensor> zs, std::span<const Tensor> attentions,
                                              std::span<const std::size_t> labels, const PrototypeBank& bank,
                                              const LossConfig& cfg);

}  // namespace psep
