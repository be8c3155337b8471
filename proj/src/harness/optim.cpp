#include "psep/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace psep {

void Adam::step(ParamSet& params, const std::map<std::string, Tensor>& grads, double lr) {
    ++state_.steps;
    const double t = static_cast<double>(state_.steps);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("adam: unknown parameter '" + name + "'");
        Tensor& p = it->second;
        if (g.shape() != p.shape()) throw ShapeError("adam: gradient shape mismatch for " + name);
        auto [mit, m_new] = state_.m.try_emplace(name, p.shape());
        auto [vit, v_new] = state_.v.try_emplace(name, p.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float mi = static_cast<float>(beta1 * m[i] + (1.0 - beta1) * g[i]);
            const float vi = static_cast<float>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
            m[i] = mi;
            v[i] = vi;
            const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            p[i] = static_cast<float>(p[i] - update);
        }
    }
}

}  // namespace psep
