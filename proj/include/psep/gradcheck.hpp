#pragma once

#include <functional>

#include "psep/autograd.hpp"

namespace psep {

struct GradCheckResult {
    bool passed = false;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Builds a scalar-valued graph from a single input leaf.
using ScalarClosure = std::function<Var(Graph&, Var input)>;

/// Compares the autodiff gradient of `f` at `input` against central differences
/// (f(x+h) - f(x-h)) / 2h, entry by entry. The error is the discrepancy in excess of the
/// roundoff bound 16 eps max(1, |f(x+-h)|) / h, relative to max(|analytic|, |numeric|, 1e-8).
/// Never throws on mismatch.
GradCheckResult finite_diff_check(const ScalarClosure& f, const Tensor& input, double h, double tol);

}  // namespace psep
