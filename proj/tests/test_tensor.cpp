#include <doctest.h>

#include "dp/nn.hpp"
#include "dp/tensor.hpp"

using namespace dp;

TEST_CASE("construction checks shape/data consistency") {
    CHECK_NOTHROW(Tensor::from_data({2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(Tensor::from_data({2, 3}, std::vector<double>(5, 0.0)), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
    CHECK(Tensor::zeros({4, 5}).size() == 20);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor w = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor loss = sum_all(w);
    loss.backward();
    for (double g : w.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("gradient doubles when a tensor is used twice additively") {
    Tensor w = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor loss = sum_all(add(w, w));
    loss.backward();
    for (double g : w.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("grads accumulate across backward calls until zeroed") {
    Tensor w = Tensor::from_data({2}, {1, 1}, true);
    sum_all(w).backward();
    sum_all(w).backward();
    for (double g : w.grad()) CHECK(g == doctest::Approx(2.0));
    w.zero_grad();
    for (double g : w.grad()) CHECK(g == doctest::Approx(0.0));
}

TEST_CASE("backward requires a scalar") {
    Tensor w = Tensor::from_data({2}, {1, 1}, true);
    Tensor y = add(w, w);
    CHECK_THROWS_AS(y.backward(), UsageError);
}

TEST_CASE("parameters not reachable from the loss stay untouched") {
    Tensor used = Tensor::from_data({2}, {1, 1}, true);
    Tensor unused = Tensor::from_data({2}, {1, 1}, true);
    sum_all(used).backward();
    CHECK(used.has_grad());
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("finiteness check flags NaN and Inf") {
    Tensor ok = Tensor::from_data({2}, {1.0, 2.0});
    CHECK(ok.all_finite());
    Tensor bad = Tensor::from_data({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_FALSE(bad.all_finite());
    CHECK_THROWS_AS(bad.assert_finite("test tensor"), InvariantError);
}

TEST_CASE("detach_copy drops the graph") {
    Tensor w = Tensor::from_data({2}, {3, 4}, true);
    Tensor y = mul_scalar(w, 2.0);
    Tensor d = y.detach_copy();
    CHECK_FALSE(d.requires_grad());
    CHECK(d.at({0}) == doctest::Approx(6.0));
}

TEST_CASE("tensor handles alias the same storage") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = a;
    b.data()[0] = 9;
    CHECK(a.at({0}) == doctest::Approx(9.0));
}
