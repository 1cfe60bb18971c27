#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dp/dataset.hpp"
#include "dp/model.hpp"

namespace dp {

/// Running per-class moving-average accumulators over one video sequence,
/// plus the per-step MA trace for plotting.
struct MAState {
    std::vector<double> shape_sum = std::vector<double>(kShapeClassCount, 0.0);
    std::vector<double> weight_sum = std::vector<double>(kWeightClassCount, 0.0);
    std::int64_t windows = 0;
    std::vector<std::vector<double>> shape_trace;   // MA vector after each window
    std::vector<std::vector<double>> weight_trace;

    std::vector<double> shape_ma() const;
    std::vector<double> weight_ma() const;
};

/// Folds one window's probability vectors into the running means.
void update_ma(MAState& state, std::span<const double> shape_probs, std::span<const double> weight_probs);

struct SequenceDecision {
    int shape_class = 0;
    int weight_class = 0;
    bool shape_tie = false;
    bool weight_tie = false;
};

/// Argmax of the final MA vector per head; ties go to the lowest class index
/// and are flagged.
SequenceDecision decide(const MAState& state);

/// Probability vectors (shape[5], weight[3]) for one 3-frame window:
/// softmax over each head's logits on the predicted t+3 latent.
std::pair<std::vector<double>, std::vector<double>> window_predict(const GarmentNet& model,
                                                                   const SequenceWindow& window);

using WindowPredictor =
    std::function<std::pair<std::vector<double>, std::vector<double>>(const SequenceWindow&)>;
using FramePredictor =
    std::function<std::pair<std::vector<double>, std::vector<double>>(const Tensor& frame)>;

struct SequenceOutcome {
    std::string garment_id;
    int sequence_index = 0;
    ShapeClass true_shape = ShapeClass::pant;
    WeightClass true_weight = WeightClass::light;
    SequenceDecision decision;
    MAState ma;
};

struct EvalResult {
    // Confusion matrices indexed [true][predicted]; rows sum to the number of
    // decisions (sequences, or frames in single-shot mode) per true class.
    std::vector<std::vector<std::int64_t>> shape_confusion;
    std::vector<std::vector<std::int64_t>> weight_confusion;
    std::vector<double> shape_class_acc;
    std::vector<double> weight_class_acc;
    double shape_avg_acc = 0;  // mean of per-class accuracies
    double weight_avg_acc = 0;
    std::int64_t decision_count = 0;
    std::vector<SequenceOutcome> sequences;  // continuous mode only

    void write_json(const std::filesystem::path& path) const;
    /// One CSV per sequence: window_index plus one MA column per class.
    void write_ma_traces(const std::filesystem::path& dir) const;
};

/// One MA decision per test sequence (stride-1 windows, frame_count - 2 of
/// them), aggregated into confusion matrices.
EvalResult evaluate_continuous(const WindowPredictor& predictor,
                               const std::vector<std::shared_ptr<LoadedSequence>>& sequences);
EvalResult evaluate_continuous(const GarmentNet& model,
                               const std::vector<std::shared_ptr<LoadedSequence>>& sequences);

/// Per-frame predictions from the stage-1 model (no LSTM, no MA); the
/// Table 1/2-style ablation baseline.
EvalResult single_shot_eval(const FramePredictor& predictor,
                            const std::vector<std::shared_ptr<LoadedSequence>>& sequences);
EvalResult single_shot_eval(const GarmentNet& model,
                            const std::vector<std::shared_ptr<LoadedSequence>>& sequences);

}  // namespace dp
