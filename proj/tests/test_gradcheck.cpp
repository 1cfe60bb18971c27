#include <doctest.h>

#include <random>

#include "dp/nn.hpp"
#include "dp/verify.hpp"

using namespace dp;

TEST_CASE("every differentiable op passes finite-difference checks over 20 seeds") {
    const SuiteResult r = suite_gradcheck(1234, 20);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("full conv->pool->dense->CE pipeline grads match finite differences") {
    const SuiteResult r = suite_pipeline_gradcheck(99, 5);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("a corrupted backward pass is caught by the checker") {
    std::mt19937_64 rng(17);
    Tensor x = Tensor::randn({3}, 1.0, rng, true);
    // Op with a deliberately wrong gradient: forward x*x, backward pretends
    // the derivative is 3x instead of 2x.
    auto broken_square = [](const Tensor& in) {
        std::vector<double> v(in.data().begin(), in.data().end());
        for (auto& a : v) a = a * a;
        Tensor out = Tensor::from_data(in.shape(), std::move(v), true);
        auto parent = in.node();
        out.node()->parents = {parent};
        out.node()->backward = [parent](detail::Node& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = 3.0 * parent->data[i] * self.grad[i];
            parent->accumulate_grad(g);
        };
        return out;
    };
    const double err = max_grad_rel_error(
        [&](const std::vector<Tensor>& in) { return sum_all(broken_square(in[0])); }, {x});
    CHECK(err > 1e-2);
}
