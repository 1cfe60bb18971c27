#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

/// Builds a scalar loss from the given leaf tensors; called repeatedly by
/// the checker, so it must rebuild the graph from the tensors' current data.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite differences (step h) against the analytic backward pass.
/// Returns the max elementwise error |a - n| / max(1, |a|, |n|) over all
/// inputs with requires_grad.
double max_grad_rel_error(const ScalarFn& fn, std::vector<Tensor> inputs, double h = 1e-5);

struct SuiteResult {
    std::string name;
    bool pass = false;
    double seconds = 0;
    std::string detail;
};

SuiteResult suite_gradcheck(std::uint64_t seed, int seeds_per_op, double tolerance = 1e-4);
SuiteResult suite_pipeline_gradcheck(std::uint64_t seed, int seeds, double tolerance = 1e-3);
SuiteResult suite_shape_traces();
SuiteResult suite_ma_oracle(std::uint64_t seed, int cases);
SuiteResult suite_energy_monotonic(std::uint64_t seed);

/// All property suites at CLI-friendly sizes.
std::vector<SuiteResult> run_verification_suites(std::uint64_t seed);

}  // namespace dp
