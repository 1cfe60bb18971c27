#pragma once

#include <cstdint>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

enum class OptimKind { sgd_momentum, adam };

/// Step-decay schedule: lr(epoch) = base_lr * decay^floor(epoch / step_size).
struct LrSchedule {
    double base_lr = 1e-4;
    int step_size = 15;
    double decay = 0.1;
};

double lr_at(const LrSchedule& schedule, int epoch);

/// Holds per-parameter moment buffers for a fixed registered parameter set.
/// Steps are deterministic functions of (params, grads, state).
class Optimizer {
  public:
    static Optimizer sgd_momentum(std::vector<Tensor> params, double lr, double momentum);
    static Optimizer adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                          double epsilon = 1e-8);

    OptimKind kind() const { return kind_; }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::int64_t step_count() const { return step_count_; }
    const std::vector<Tensor>& params() const { return params_; }

    /// Applies one update. Throws UsageError if any registered parameter has
    /// no populated gradient.
    void step();
    void zero_grad();

  private:
    Optimizer() = default;

    OptimKind kind_ = OptimKind::sgd_momentum;
    double lr_ = 0.0;
    double momentum_ = 0.9;
    double beta1_ = 0.9, beta2_ = 0.999, epsilon_ = 1e-8;
    std::int64_t step_count_ = 0;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;  // momentum / first moment
    std::vector<std::vector<double>> v_;  // second moment (adam only)
};

}  // namespace dp
