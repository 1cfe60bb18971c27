#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

// Elementwise / reduction plumbing. All ops build backward closures only
// when some input requires grad, so frozen-parameter forwards record no
// graph at all.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sum_all(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten_batch(const Tensor& a);  // [B, ...] -> [B, N]

/// 2-D convolution, NCHW input, OIHW weight, per-output-channel bias.
/// Output spatial size: floor((H + 2*padding - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::int64_t stride, std::int64_t padding);

enum class PoolMode { max, avg_adaptive };

struct PoolParams {
    std::int64_t kernel = 0;  // max mode
    std::int64_t stride = 0;  // max mode
    std::int64_t out_h = 0;   // avg_adaptive mode
    std::int64_t out_w = 0;   // avg_adaptive mode
};

Tensor pool2d(const Tensor& input, PoolMode mode, const PoolParams& params);
Tensor max_pool2d(const Tensor& input, std::int64_t kernel, std::int64_t stride);
Tensor adaptive_avg_pool2d(const Tensor& input, std::int64_t out_h, std::int64_t out_w);

/// Affine map: input [B,N] x weight [M,N] + bias [M] -> [B,M].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class Activation { relu, softmax_lastdim, sigmoid, tanh };

Tensor activate(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);

/// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);

/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

enum class Reduction { sum, mean };

Tensor mse_loss(const Tensor& pred, const Tensor& target, Reduction reduction);

/// LSTM cell parameters. The 4H gate axis is sliced in the order
/// input, forget, cell-candidate, output.
struct LstmCellParams {
    Tensor w_input;   // [4H, N]
    Tensor w_hidden;  // [4H, H]
    Tensor bias;      // [4H]
};

/// One step of the standard LSTM recurrence; returns (h', c').
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmCellParams& params);

}  // namespace dp
