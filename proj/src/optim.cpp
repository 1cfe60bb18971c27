#include "dp/optim.hpp"

#include <cmath>

namespace dp {

double lr_at(const LrSchedule& schedule, int epoch) {
    if (epoch < 0) throw UsageError("lr_at: epoch must be >= 0");
    if (schedule.step_size <= 0) throw UsageError("lr_at: step_size must be positive");
    return schedule.base_lr * std::pow(schedule.decay, static_cast<double>(epoch / schedule.step_size));
}

Optimizer Optimizer::sgd_momentum(std::vector<Tensor> params, double lr, double momentum) {
    Optimizer o;
    o.kind_ = OptimKind::sgd_momentum;
    o.lr_ = lr;
    o.momentum_ = momentum;
    o.params_ = std::move(params);
    o.m_.reserve(o.params_.size());
    for (const auto& p : o.params_) o.m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    return o;
}

Optimizer Optimizer::adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double epsilon) {
    Optimizer o;
    o.kind_ = OptimKind::adam;
    o.lr_ = lr;
    o.beta1_ = beta1;
    o.beta2_ = beta2;
    o.epsilon_ = epsilon;
    o.params_ = std::move(params);
    o.m_.reserve(o.params_.size());
    o.v_.reserve(o.params_.size());
    for (const auto& p : o.params_) {
        o.m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        o.v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
    return o;
}

void Optimizer::step() {
    for (const auto& p : params_)
        if (!p.has_grad())
            throw UsageError("optimizer step with missing gradient for parameter '" + p.name() + "'");

    ++step_count_;
    if (kind_ == OptimKind::sgd_momentum) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto w = params_[i].data();
            const auto g = params_[i].grad();
            auto& v = m_[i];
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                w[j] -= lr_ * v[j];
            }
        }
        return;
    }
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i].data();
        const auto g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= lr_ * mhat / (std::sqrt(vhat) + epsilon_);
        }
    }
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace dp
