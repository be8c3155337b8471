#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "psep/model.hpp"

namespace psep {

enum class AttackKind { FGSM, BIM, PGD, MIM };
enum class AttackTarget { Joint, Attention };

AttackKind parse_attack_kind(const std::string& s);
AttackTarget parse_attack_target(const std::string& s);
std::string to_string(AttackKind k);
std::string to_string(AttackTarget t);

/// l-infinity attack settings. eps and alpha are in [0,1] pixel units.
struct AttackConfig {
    AttackKind kind = AttackKind::PGD;
    double eps = 8.0 / 255.0;
    double alpha = 2.0 / 255.0;
    std::size_t steps = 10;
    double mu = 1.0;
    AttackTarget target = AttackTarget::Joint;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument on a malformed config.
    void validate() const;
    /// "PGD(10,8)": kind, steps and eps in 1/255 units.
    std::string label() const;

    /// Evaluation defaults: PGD uses alpha 1/255 at eps 2/255 and 2/255 at eps 8/255;
    /// BIM and MIM use 10 steps of eps/10; FGSM one step of eps.
    static AttackConfig standard(AttackKind kind, double eps);
};

struct LossGradient {
    double loss = 0.0;
    Tensor grad;  // same shape as the input
};

/// Differentiable objective to ascend: images [B,...] and labels -> loss and d loss / d images.
using Objective = std::function<LossGradient(const Tensor& images, std::span<const std::size_t> labels)>;

/// Joint: CE_att + CE_reg (whichever heads exist). Attention: CE_att only, or the single head
/// of a model without an attention head.
double attack_objective(const Model& model, const Tensor& images, std::span<const std::size_t> labels, AttackTarget mode);
Objective model_objective(const Model& model, AttackTarget mode);

/// sign with sign(0) = 0.
double sign0(double v);

/// Projects onto the eps-ball around `origin`, then clips to [0,1].
void project_and_clip(Tensor& x, const Tensor& origin, double eps);

Tensor fgsm(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps);
Tensor bim(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps);
/// Random start uniform in the eps-ball drawn from `seed`, then BIM iterations.
Tensor pgd(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps, std::uint64_t seed);
/// BIM iterations from an explicit starting perturbation.
Tensor pgd_from(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
                std::size_t steps, const Tensor& init_delta);
/// Momentum iterative method. Per-sample gradients are L1-normalised before accumulation
/// unless they are all zero.
Tensor mim(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps, double mu);

Tensor run_attack(const AttackConfig& cfg, const Objective& f, const Tensor& x, std::span<const std::size_t> y);

/// Uniform(-eps, eps) perturbation of the given shape.
Tensor uniform_delta(const Shape& shape, double eps, std::mt19937_64& rng);

}  // namespace psep
