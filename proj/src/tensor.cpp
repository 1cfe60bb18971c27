#include "dp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dp {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor shape must have positive dims, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

void Node::accumulate_grad(std::span<const double> g) {
    if (!requires_grad) return;
    if (static_cast<std::int64_t>(g.size()) != numel())
        throw DimensionError("gradient size mismatch for " + (name.empty() ? shape_str(shape) : name));
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size()))
        throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    return wrap(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    return wrap(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    return wrap(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : v) x = dist(rng);
    return wrap(make_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : v) x = dist(rng);
    return wrap(make_node(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const {
    if (!node_) throw UsageError("use of undefined tensor");
    return node_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw IndexError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::size() const {
    if (!node_) throw UsageError("use of undefined tensor");
    return node_->numel();
}

std::span<double> Tensor::data() {
    if (!node_) throw UsageError("use of undefined tensor");
    return node_->data;
}

std::span<const double> Tensor::data() const {
    if (!node_) throw UsageError("use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (size() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size())
        throw IndexError("expected " + std::to_string(s.size()) + " indices for " + shape_str(s));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : index) {
        if (i < 0 || i >= s[k]) throw IndexError("index out of range in dim " + std::to_string(k));
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    if (!node_) throw UsageError("use of undefined tensor");
    node_->requires_grad = v;
    if (!v) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw UsageError("tensor has no gradient (backward not run?)");
    return node_->grad;
}

std::span<double> Tensor::grad_mutable() {
    if (!node_) throw UsageError("use of undefined tensor");
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) return;
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (!node_) throw UsageError("backward on undefined tensor");
    if (node_->numel() != 1) throw UsageError("backward requires a scalar loss, got " + shape_str(node_->shape));
    if (!node_->requires_grad) throw UsageError("backward on a tensor without a graph");

    // Iterative post-order DFS: parents first, so the reversed list visits
    // every consumer before its producers.
    std::vector<detail::Node*> topo;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::Node* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    node_->accumulate_grad(std::vector<double>{1.0});
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

Tensor Tensor::detach_copy() const {
    if (!node_) throw UsageError("use of undefined tensor");
    return from_data(node_->shape, node_->data, false);
}

void Tensor::set_name(std::string name) {
    if (!node_) throw UsageError("use of undefined tensor");
    node_->name = std::move(name);
}

const std::string& Tensor::name() const {
    static const std::string empty;
    return node_ ? node_->name : empty;
}

bool Tensor::all_finite() const {
    if (!node_) return false;
    for (double v : node_->data)
        if (!std::isfinite(v)) return false;
    for (double v : node_->grad)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::assert_finite(const char* what) const {
    if (!all_finite())
        throw InvariantError(std::string("non-finite values in ") + what);
}

}  // namespace dp
