#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dp/common.hpp"

namespace dp {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Graph node behind a Tensor handle. Nodes reference their parents, so a
// root keeps its whole backward graph alive; parents never reference
// children and no cycles form.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward reaches this node
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void accumulate_grad(std::span<const double> g);
};

}  // namespace detail

/// Dense n-dimensional tensor of 64-bit floats with reverse-mode autodiff.
/// Copying a Tensor aliases the underlying node (shared values and grad).
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// Gaussian init, mean 0.
    static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    std::int64_t dim(int i) const;
    std::int64_t size() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;  // requires size() == 1
    double at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_mutable();
    void zero_grad();

    /// Reverse-mode sweep from a scalar. Grads sum across multiple uses of a
    /// node; nodes not reachable from this root are untouched.
    void backward() const;

    /// Deep copy of values, detached from any graph.
    Tensor detach_copy() const;

    void set_name(std::string name);
    const std::string& name() const;

    /// Throws InvariantError naming `what` if any value (or grad) is NaN/Inf.
    void assert_finite(const char* what) const;
    bool all_finite() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

  private:
    std::shared_ptr<detail::Node> node_;
};

}  // namespace dp
