#include "psep/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "psep/ops.hpp"

namespace psep {

AttackKind parse_attack_kind(const std::string& s) {
    if (s == "fgsm" || s == "FGSM") return AttackKind::FGSM;
    if (s == "bim" || s == "BIM") return AttackKind::BIM;
    if (s == "pgd" || s == "PGD") return AttackKind::PGD;
    if (s == "mim" || s == "MIM") return AttackKind::MIM;
    throw std::invalid_argument("unknown attack '" + s + "' (expected fgsm, bim, pgd or mim)");
}

AttackTarget parse_attack_target(const std::string& s) {
    if (s == "joint") return AttackTarget::Joint;
    if (s == "attention") return AttackTarget::Attention;
    throw std::invalid_argument("unknown attack target '" + s + "' (expected joint or attention)");
}

std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::FGSM: return "FGSM";
        case AttackKind::BIM: return "BIM";
        case AttackKind::PGD: return "PGD";
        case AttackKind::MIM: return "MIM";
    }
    return "?";
}

std::string to_string(AttackTarget t) { return t == AttackTarget::Joint ? "joint" : "attention"; }

void AttackConfig::validate() const {
    if (!(eps >= 0.0) || eps > 1.0) throw std::invalid_argument("attack: eps must lie in [0,1]");
    if (mu < 0.0) throw std::invalid_argument("attack: momentum decay must be >= 0");
    if (kind == AttackKind::FGSM) {
        if (steps != 1) throw std::invalid_argument("attack: FGSM takes exactly one step");
        return;
    }
    if (steps == 0) throw std::invalid_argument("attack: steps must be >= 1");
    if (eps > 0.0 && !(alpha > 0.0 && alpha <= eps + 1e-12)) {
        throw std::invalid_argument("attack: step size must satisfy 0 < alpha <= eps");
    }
}

std::string AttackConfig::label() const {
    std::ostringstream os;
    os << to_string(kind) << '(' << steps << ',' << std::round(eps * 255.0 * 100.0) / 100.0 << ')';
    return os.str();
}

AttackConfig AttackConfig::standard(AttackKind kind, double eps) {
    AttackConfig c;
    c.kind = kind;
    c.eps = eps;
    switch (kind) {
        case AttackKind::FGSM:
            c.steps = 1;
            c.alpha = eps;
            break;
        case AttackKind::PGD:
            c.steps = 10;
            c.alpha = eps <= 2.0 / 255.0 + 1e-12 ? 1.0 / 255.0 : 2.0 / 255.0;
            c.alpha = std::min(c.alpha, eps);
            break;
        case AttackKind::BIM:
        case AttackKind::MIM:
            c.steps = 10;
            c.alpha = eps / 10.0;
            break;
    }
    return c;
}

double attack_objective(const Model& model, const Tensor& images, std::span<const std::size_t> labels,
                        AttackTarget mode) {
    return model_objective(model, mode)(images, labels).loss;
}

Objective model_objective(const Model& model, AttackTarget mode) {
    return [&model, mode](const Tensor& images, std::span<const std::size_t> labels) {
        Graph g;
        Bindings b(g, model.params(), nullptr);
        Var x = g.leaf(images, true, "images");
        Forward f = forward(model, b, x);
        Var loss;
        if (f.attention.logits.valid()) loss = ops::softmax_cross_entropy(f.attention.logits, labels);
        if ((mode == AttackTarget::Joint || !loss.valid()) && f.proto_logits.valid()) {
            Var ce = ops::softmax_cross_entropy(f.proto_logits, labels);
            loss = loss.valid() ? ops::add(loss, ce) : ce;
        }
        if (!loss.valid()) throw std::invalid_argument("attack objective: model has no classification head");
        g.backward(loss);
        return LossGradient{loss.value().item(), x.grad()};
    };
}

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void project_and_clip(Tensor& x, const Tensor& origin, double eps) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lo = origin[i] - eps, hi = origin[i] + eps;
        x[i] = std::clamp(std::clamp(x[i], lo, hi), 0.0, 1.0);
    }
}

namespace {

void signed_step(Tensor& x, const Tensor& direction, double alpha) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * sign0(direction[i]);
}

}  // namespace

Tensor fgsm(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps) {
    Tensor adv = x;
    if (eps == 0.0) return adv;
    signed_step(adv, f(x, y).grad, eps);
    project_and_clip(adv, x, eps);
    return adv;
}

Tensor pgd_from(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
                std::size_t steps, const Tensor& init_delta) {
    if (init_delta.shape() != x.shape()) throw ShapeError("pgd: initial perturbation shape mismatch");
    Tensor adv = x;
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += init_delta[i];
    project_and_clip(adv, x, eps);
    if (eps == 0.0) return adv;
    for (std::size_t s = 0; s < steps; ++s) {
        signed_step(adv, f(adv, y).grad, alpha);
        project_and_clip(adv, x, eps);
    }
    return adv;
}

Tensor bim(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps) {
    return pgd_from(f, x, y, eps, alpha, steps, Tensor(x.shape()));
}

Tensor uniform_delta(const Shape& shape, double eps, std::mt19937_64& rng) {
    Tensor d(shape);
    if (eps == 0.0) return d;
    std::uniform_real_distribution<double> u(-eps, eps);
    for (double& v : d.data()) v = u(rng);
    return d;
}

Tensor pgd(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return pgd_from(f, x, y, eps, alpha, steps, uniform_delta(x.shape(), eps, rng));
}

Tensor mim(const Objective& f, const Tensor& x, std::span<const std::size_t> y, double eps, double alpha,
           std::size_t steps, double mu) {
    Tensor adv = x;
    if (eps == 0.0) return adv;
    const std::size_t batch = x.rank() > 0 ? x.dim(0) : 1;
    const std::size_t per = x.size() / batch;
    Tensor g(x.shape());
    for (std::size_t s = 0; s < steps; ++s) {
        const Tensor grad = f(adv, y).grad;
        for (std::size_t b = 0; b < batch; ++b) {
            double l1 = 0.0;
            for (std::size_t i = 0; i < per; ++i) l1 += std::abs(grad[b * per + i]);
            const double inv = l1 > 0.0 ? 1.0 / l1 : 1.0;
            for (std::size_t i = 0; i < per; ++i) g[b * per + i] = mu * g[b * per + i] + grad[b * per + i] * inv;
        }
        signed_step(adv, g, alpha);
        project_and_clip(adv, x, eps);
    }
    return adv;
}

Tensor run_attack(const AttackConfig& cfg, const Objective& f, const Tensor& x, std::span<const std::size_t> y) {
    cfg.validate();
    switch (cfg.kind) {
        case AttackKind::FGSM: return fgsm(f, x, y, cfg.eps);
        case AttackKind::BIM: return bim(f, x, y, cfg.eps, cfg.alpha, cfg.steps);
        case AttackKind::PGD: return pgd(f, x, y, cfg.eps, cfg.alpha, cfg.steps, cfg.seed);
        case AttackKind::MIM: return mim(f, x, y, cfg.eps, cfg.alpha, cfg.steps, cfg.mu);
    }
    throw std::logic_error("unreachable attack kind");
}

}  // namespace psep
