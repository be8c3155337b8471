#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>

#include "psep/autograd.hpp"

namespace psep {

/// Named model parameters. Ordered by name so iteration order is stable.
using ParamSet = std::map<std::string, Tensor>;

/// Parameters bound as leaves of one graph.
class Bindings {
public:
    Bindings() = default;
    Bindings(Graph& graph, const ParamSet& params, const std::function<bool(const std::string&)>& trainable);

    Var at(const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    const std::map<std::string, Var>& vars() const { return vars_; }
    /// Replaces the binding of an existing parameter, e.g. with a gradient-checked leaf.
    void rebind(const std::string& name, Var v);

private:
    std::map<std::string, Var> vars_;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
/// Uniform in +-sqrt(6 / fan_in); keeps activation scale through relu layers.
Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace psep
