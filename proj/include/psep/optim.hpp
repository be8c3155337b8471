#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "psep/params.hpp"

namespace psep {

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
/// Parameters and moment estimates are rounded to single precision after each
/// update so that a float32 checkpoint captures the optimiser exactly.
class Adam {
public:
    struct State {
        std::map<std::string, Tensor> m;
        std::map<std::string, Tensor> v;
        std::uint64_t steps = 0;
    };

    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Updates every parameter named in `grads`.
    void step(ParamSet& params, const std::map<std::string, Tensor>& grads, double lr);

    State& state() { return state_; }
    const State& state() const { return state_; }
    void reset() { state_ = State{}; }

private:
    State state_;
};

}  // namespace psep
