#include <doctest.h>

#include <cmath>
#include <random>

#include "psep/gradcheck.hpp"
#include "psep/ops.hpp"

using namespace psep;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(shape);
    for (double& v : t.data()) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("tensor construction checks the element count") {
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t(Shape{2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(numel(Shape{2, 3, 4}) == 24);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
    CHECK_THROWS(t.item());
    CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
}

TEST_CASE("round_to_float stores single-precision values") {
    Tensor t = Tensor::vector({0.1, 1.0 / 3.0});
    t.round_to_float();
    CHECK(t[0] == static_cast<double>(0.1f));
    CHECK(t[1] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}

TEST_CASE("relu zeroes negative entries") {
    Graph g;
    Var y = ops::relu(g.constant(Tensor::vector({-1, 2})));
    CHECK(y.value() == Tensor::vector({0, 2}));
}

TEST_CASE("log_ratio at zero distance is log(1/gamma)") {
    Graph g;
    Var y = ops::log_ratio(g.constant(Tensor::vector({0.0})), 1e-5);
    CHECK(std::abs(y.value()[0] - std::log(1e5)) < 1e-12);
    CHECK(std::abs(y.value()[0] - 11.512925) < 1e-6);
    CHECK_THROWS_AS(ops::log_ratio(g.constant(Tensor::vector({0.0})), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(ops::log_ratio(g.constant(Tensor::vector({0.0})), -1.0), std::invalid_argument);
}

TEST_CASE("identity 1x1 convolution returns its input") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor(Shape{2, 4, 5, 3}, rng);
    Tensor k(Shape{1, 1, 3, 3});
    for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
    Graph g;
    Var y = ops::conv2d(g.constant(x), g.constant(k));
    CHECK(y.value() == x);
}

TEST_CASE("conv2d output shape follows stride and padding") {
    Graph g;
    Var x = g.constant(Tensor(Shape{1, 8, 8, 2}));
    CHECK(ops::conv2d(x, g.constant(Tensor(Shape{3, 3, 2, 5})), 2, 1).shape() == Shape{1, 4, 4, 5});
    CHECK(ops::conv2d(x, g.constant(Tensor(Shape{3, 3, 2, 5})), 1, 0).shape() == Shape{1, 6, 6, 5});
}

TEST_CASE("shape errors name the operands") {
    Graph g;
    Var a = g.constant(Tensor(Shape{2, 3}));
    Var b = g.constant(Tensor(Shape{3, 2}));
    try {
        ops::add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[3x2]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::mul(a, b), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(g.constant(Tensor(Shape{1, 4, 4, 2})), g.constant(Tensor(Shape{1, 1, 3, 1}))),
                    ShapeError);
    CHECK_THROWS_AS(ops::linear(a, g.constant(Tensor(Shape{4, 2}))), ShapeError);
    CHECK_THROWS_AS(ops::sq_l2_distance_maps(g.constant(Tensor(Shape{1, 2, 2, 3})), g.constant(Tensor(Shape{4, 2}))),
                    ShapeError);
}

TEST_CASE("scalar broadcasting in add and mul") {
    Graph g;
    Var x = g.constant(Tensor::vector({1, 2, 3}));
    Var s = g.constant(Tensor::vector({2}));
    CHECK(ops::add(x, s).value() == Tensor::vector({3, 4, 5}));
    CHECK(ops::mul(s, x).value() == Tensor::vector({2, 4, 6}));
}

TEST_CASE("backward of sum of squares") {
    Graph g;
    Var x = g.leaf(Tensor::vector({3}), true);
    Var loss = ops::sum(ops::mul(x, x));
    g.backward(loss);
    CHECK(x.grad() == Tensor::vector({6}));
}

TEST_CASE("relu backward is zero at an inactive unit and at the kink") {
    Graph g;
    Var x = g.leaf(Tensor::vector({-1, 0, 2}), true);
    g.backward(ops::sum(ops::relu(x)));
    CHECK(x.grad() == Tensor::vector({0, 0, 1}));
}

TEST_CASE("softmax cross-entropy gradient on uniform logits") {
    Graph g;
    Var x = g.leaf(Tensor(Shape{1, 2}, std::vector<double>{0, 0}), true);
    const std::size_t label[] = {0};
    Var loss = ops::softmax_cross_entropy(x, label);
    CHECK(std::abs(loss.value().item() - std::log(2.0)) < 1e-12);
    g.backward(loss);
    CHECK(std::abs(x.grad()[0] + 0.5) < 1e-15);
    CHECK(std::abs(x.grad()[1] - 0.5) < 1e-15);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Graph g;
    Var x = g.leaf(Tensor::vector({1, 2}), true);
    CHECK_THROWS_AS(g.backward(ops::relu(x)), std::invalid_argument);
}

TEST_CASE("leaves that do not reach the loss get a zero gradient") {
    Graph g;
    Var x = g.leaf(Tensor::vector({1, 2}), true);
    Var unused = g.leaf(Tensor::vector({5, 6, 7}), true);
    g.backward(ops::sum(x));
    CHECK(unused.grad() == Tensor(Shape{3}));
}

TEST_CASE("max pool ties route to the first maximum") {
    Graph g;
    Var x = g.leaf(Tensor(Shape{1, 2, 2, 1}, std::vector<double>{1, 3, 3, 0}), true);
    g.backward(ops::sum(ops::spatial_max_pool(x)));
    CHECK(x.grad() == Tensor(Shape{1, 2, 2, 1}, std::vector<double>{0, 1, 0, 0}));

    Graph h;
    Var c = h.leaf(Tensor(Shape{1, 1, 1, 3}, std::vector<double>{2, 2, 1}), true);
    h.backward(ops::sum(ops::channel_max(c)));
    CHECK(c.grad() == Tensor(Shape{1, 1, 1, 3}, std::vector<double>{1, 0, 0}));
}

TEST_CASE("finite_diff_check examples") {
    const auto square = [](Graph&, Var x) { return ops::sum(ops::mul(x, x)); };
    const auto r = finite_diff_check(square, Tensor::vector({2.0}), 1e-5, 1e-4);
    CHECK(r.passed);
    CHECK(std::abs(r.analytic - 4.0) < 1e-12);
    CHECK(std::abs(r.numeric - 4.0) < 1e-6);

    const auto lr = [](Graph&, Var u) { return ops::sum(ops::log_ratio(u, 1e-5)); };
    CHECK(finite_diff_check(lr, Tensor::vector({0.5}), 1e-6, 1e-4).passed);

    std::mt19937_64 rng(3);
    const Tensor p = random_tensor(Shape{4, 3}, rng);
    const Tensor z = random_tensor(Shape{1, 2, 2, 3}, rng);
    const auto wrt_z = [&](Graph& g, Var v) { return ops::sum(ops::sq_l2_distance_maps(v, g.constant(p))); };
    const auto wrt_p = [&](Graph& g, Var v) { return ops::sum(ops::sq_l2_distance_maps(g.constant(z), v)); };
    CHECK(finite_diff_check(wrt_z, z, 1e-6, 1e-4).passed);
    CHECK(finite_diff_check(wrt_p, p, 1e-6, 1e-4).passed);
}

TEST_CASE("finite_diff_check reports a wrong gradient without throwing") {
    // relu at its kink: subgradient 0 against a central difference of 0.5.
    const auto kinked = [](Graph&, Var x) { return ops::sum(ops::relu(x)); };
    GradCheckResult r;
    CHECK_NOTHROW(r = finite_diff_check(kinked, Tensor::vector({0.0}), 1e-6, 1e-4));
    CHECK_FALSE(r.passed);
    CHECK(r.analytic == 0.0);
    CHECK(std::abs(r.numeric - 0.5) < 1e-9);
}

TEST_CASE("finite_diff_check tolerates roundoff but not small real errors") {
    // A tiny slope on a large offset: the quotient is pure roundoff noise.
    const auto offset = [](Graph& g, Var x) {
        return ops::add(g.constant(Tensor::vector({1e3})), ops::scale(ops::sum(x), 1e-9));
    };
    CHECK(finite_diff_check(offset, Tensor::vector({0.3}), 1e-6, 1e-4).passed);

    // A gradient off by 1e-3 relative on a well-scaled function is still caught.
    const auto biased = [](Graph&, Var x) { return ops::sum(ops::scale(ops::detach(x), 1e-3)); };
    const auto wrong = [&](Graph& g, Var x) { return ops::add(ops::sum(x), ops::scale(biased(g, x), -1.0)); };
    const GradCheckResult r = finite_diff_check(wrong, Tensor::vector({0.7}), 1e-6, 1e-4);
    CHECK_FALSE(r.passed);
    CHECK(std::abs(r.max_rel_error - 1e-3) < 1e-5);
}

TEST_CASE("elementwise algebra properties") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Graph g;
        Var a = g.constant(random_tensor(Shape{2, 3, 3, 2}, rng));
        Var b = g.constant(random_tensor(Shape{2, 3, 3, 2}, rng));
        CHECK(ops::add(a, b).value() == ops::add(b, a).value());
        CHECK(ops::mul(a, b).value() == ops::mul(b, a).value());
        CHECK(ops::scale(a, 1.0).value() == a.value());
        const Tensor mx = ops::spatial_max_pool(a).value();
        const Tensor avg = ops::spatial_avg_pool(a).value();
        for (std::size_t i = 0; i < mx.size(); ++i) CHECK(mx[i] >= avg[i]);
    }
}

TEST_CASE("backward is linear in the loss") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x0 = random_tensor(Shape{1, 4, 4, 2}, rng);
        const Tensor k0 = random_tensor(Shape{3, 3, 2, 3}, rng);
        const Tensor w0 = random_tensor(Shape{1, 4, 4, 3}, rng);
        const auto loss1 = [&](Graph& g, Var x) {
            return ops::sum(ops::mul(ops::relu(ops::conv2d(x, g.constant(k0), 1, 1)), g.constant(w0)));
        };
        const auto loss2 = [&](Graph&, Var x) { return ops::sum(ops::sigmoid(x)); };
        auto grad_of = [&](const std::function<Var(Graph&, Var)>& f) {
            Graph g;
            Var x = g.leaf(x0, true);
            g.backward(f(g, x));
            return x.grad();
        };
        const Tensor g1 = grad_of(loss1);
        const Tensor g2 = grad_of(loss2);
        const Tensor g12 = grad_of([&](Graph& g, Var x) { return ops::add(loss1(g, x), loss2(g, x)); });
        double worst = 0.0;
        for (std::size_t i = 0; i < g12.size(); ++i) worst = std::max(worst, std::abs(g12[i] - (g1[i] + g2[i])));
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("detach blocks gradient flow") {
    Graph g;
    Var x = g.leaf(Tensor::vector({2.0}), true);
    Var y = ops::mul(ops::detach(x), x);
    g.backward(ops::sum(y));
    CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("max_normalize divides each sample by its maximum") {
    Graph g;
    Var x = g.constant(Tensor(Shape{2, 2}, std::vector<double>{1, 4, 2, 0}));
    const Tensor y = ops::max_normalize(x, 1e-300).value();
    CHECK(y == Tensor(Shape{2, 2}, std::vector<double>{0.25, 1, 1, 0}));
}

TEST_CASE("class_min_distance picks own and other class minima") {
    Graph g;
    // One location, four prototypes: classes 0,0,1,1.
    Var d = g.constant(Tensor(Shape{1, 1, 1, 4}, std::vector<double>{4, 1, 9, 16}));
    const std::size_t class_of[] = {0, 0, 1, 1};
    const std::size_t labels[] = {0};
    CHECK(ops::class_min_distance(d, class_of, labels, true).value()[0] == 1.0);
    CHECK(ops::class_min_distance(d, class_of, labels, false).value()[0] == 9.0);
}
