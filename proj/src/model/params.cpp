#include "psep/params.hpp"

#include <cmath>
#include <stdexcept>

namespace psep {

Bindings::Bindings(Graph& graph, const ParamSet& params, const std::function<bool(const std::string&)>& trainable) {
    for (const auto& [name, value] : params) vars_.emplace(name, graph.leaf(value, trainable && trainable(name), name));
}

Var Bindings::at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

void Bindings::rebind(const std::string& name, Var v) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    if (v.shape() != it->second.shape()) {
        throw ShapeError("rebind '" + name + "': " + to_string(v.shape()) + " vs " + to_string(it->second.shape()));
    }
    it->second = v;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
}

Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
}

}  // namespace psep
