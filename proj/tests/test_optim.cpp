#include <doctest.h>

#include <cmath>

#include "dp/nn.hpp"
#include "dp/optim.hpp"

using namespace dp;

namespace {
Tensor param_with_grad(double w, double g) {
    Tensor p = Tensor::from_data({1}, {w}, true);
    p.grad_mutable()[0] = g;
    return p;
}
}  // namespace

TEST_CASE("sgd momentum: w=1, g=0.5, lr=0.1, v=0 gives w'=0.95") {
    Tensor p = param_with_grad(1.0, 0.5);
    Optimizer opt = Optimizer::sgd_momentum({p}, 0.1, 0.9);
    opt.step();
    CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-12));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("two sgd momentum steps with constant gradient reproduce the hand recurrence") {
    const double g = 0.5, lr = 0.1, mu = 0.9;
    Tensor p = param_with_grad(1.0, g);
    Optimizer opt = Optimizer::sgd_momentum({p}, lr, mu);
    opt.step();  // v1 = g
    p.grad_mutable()[0] = g;
    // grads were already populated; step again with the same gradient
    opt.step();  // v2 = mu*g + g
    const double v1 = g;
    const double v2 = mu * g + g;
    CHECK(v2 == doctest::Approx(1.9 * g));
    CHECK(p.item() == doctest::Approx(1.0 - lr * v1 - lr * v2).epsilon(1e-12));
}

TEST_CASE("adam first step moves by about lr in the gradient direction") {
    for (double g : {0.5, -2.0, 10.0}) {
        Tensor p = param_with_grad(1.0, g);
        Optimizer opt = Optimizer::adam({p}, 1e-4);
        opt.step();
        const double delta = 1.0 - p.item();
        CHECK(std::abs(delta - std::copysign(1e-4, g)) < 1e-7);
    }
}

TEST_CASE("optimizer requires populated gradients") {
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    Optimizer opt = Optimizer::sgd_momentum({p}, 0.1, 0.9);
    CHECK_THROWS_AS(opt.step(), UsageError);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    Tensor p = param_with_grad(1.2345678901234567, 3.21);
    const double before = p.item();
    Optimizer opt = Optimizer::sgd_momentum({p}, 0.0, 0.9);
    opt.step();
    CHECK(p.item() == before);
    Tensor q = param_with_grad(9.87654321, -1.5);
    const double qbefore = q.item();
    Optimizer aopt = Optimizer::adam({q}, 0.0);
    aopt.step();
    CHECK(q.item() == qbefore);
}

TEST_CASE("optimizer steps are deterministic functions of params, grads and state") {
    auto run = [] {
        Tensor p = param_with_grad(1.0, 0.25);
        Optimizer opt = Optimizer::adam({p}, 1e-3);
        for (int i = 0; i < 5; ++i) {
            p.grad_mutable()[0] = 0.25 + i * 0.1;
            opt.step();
        }
        return p.item();
    };
    CHECK(run() == run());
}

TEST_CASE("lr schedule: 1e-4 decays to 1e-5 at 15 and 1e-6 at 30") {
    const LrSchedule s{1e-4, 15, 0.1};
    CHECK(lr_at(s, 0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(s, 14) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(s, 15) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(lr_at(s, 29) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(lr_at(s, 30) == doctest::Approx(1e-6).epsilon(1e-12));
    CHECK(lr_at(s, 34) == doctest::Approx(1e-6).epsilon(1e-12));
}

TEST_CASE("lr schedule is non-increasing in epoch") {
    const LrSchedule s{1e-3, 7, 0.5};
    double prev = lr_at(s, 0);
    for (int e = 1; e < 60; ++e) {
        const double cur = lr_at(s, e);
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(lr_at(s, -1), UsageError);
}
