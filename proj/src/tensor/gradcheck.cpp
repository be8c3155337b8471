#include "psep/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace psep {

namespace {

double evaluate(const ScalarClosure& f, const Tensor& input) {
    Graph g;
    Var x = g.leaf(input, false);
    return f(g, x).value().item();
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarClosure& f, const Tensor& input, double h, double tol) {
    GradCheckResult r;
    Graph g;
    Var x = g.leaf(input, true, "input");
    Var loss = f(g, x);
    g.backward(loss);
    const Tensor analytic = x.grad();

    Tensor probe = input;
    for (std::size_t i = 0; i < input.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = evaluate(f, probe);
        probe[i] = orig - h;
        const double down = evaluate(f, probe);
        probe[i] = orig;
        const double numeric = (up - down) / (2.0 * h);
        // Differences below the roundoff of the quotient itself are not resolvable.
        const double noise =
            16.0 * std::numeric_limits<double>::epsilon() * std::max({1.0, std::abs(up), std::abs(down)}) / h;
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        double err = std::max(0.0, std::abs(analytic[i] - numeric) - noise) / denom;
        if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
        if (i == 0 || err > r.max_rel_error) {
            r.max_rel_error = err;
            r.worst_index = i;
            r.analytic = analytic[i];
            r.numeric = numeric;
        }
    }
    r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < tol;
    return r;
}

}  // namespace psep
