#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dp/dataset.hpp"
#include "dp/model.hpp"
#include "dp/optim.hpp"

namespace dp {

enum class Stage { stage1 = 1, stage2 = 2 };

struct TrainConfig {
    Stage stage = Stage::stage1;
    int epochs = 35;
    int batch_size = 16;
    double lr = -1.0;  // < 0: stage default (1e-3 stage 1, 1e-4 stage 2)
    double momentum = 0.9;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int lr_step_size = 15;   // stage 2 step schedule
    double lr_decay = 0.1;   // stage 2 step schedule
    double ce_weight = 1000.0;
    std::uint64_t seed = 0;
    bool cache_latents = false;  // stage 2: precompute frozen-extractor latents
    // Early exit once the target is reached; < 0 disables.
    double stop_at_train_shape_acc = -1.0;
    double stop_at_val_shape_acc = -1.0;
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints written

    double effective_lr() const { return lr >= 0 ? lr : (stage == Stage::stage1 ? 1e-3 : 1e-4); }
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double ce_shape = 0;
    double ce_weight_head = 0;  // stage 1 only
    double mse_sum = 0;         // stage 2: mean over windows of per-window sum MSE
    double mse_mean = 0;        // mse_sum / latent element count
    double train_shape_acc = 0;
    double train_weight_acc = 0;
    double val_shape_acc = -1;  // -1 when no validation split
    double val_weight_acc = -1;
    double wall_s = 0;
};

struct TrainReport {
    Stage stage = Stage::stage1;
    std::vector<EpochRecord> epochs;

    void write_jsonl(const std::filesystem::path& path) const;
    const EpochRecord& last() const;
};

using SequenceSet = std::vector<std::shared_ptr<LoadedSequence>>;

/// Stage 1: SGD-momentum training of extractor + both heads on single
/// frames; loss is the unit-weighted sum of the two cross-entropies.
TrainReport train_stage1(GarmentNet& model, const SequenceSet& train, const SequenceSet& val,
                         const TrainConfig& config);

/// Stage 2: extractor and heads frozen (checksum-verified every epoch), Adam
/// on the LSTM + projection with the sum-MSE + ce_weight * shape-CE loss,
/// averaged over the batch.
TrainReport train_stage2(GarmentNet& model, const SequenceSet& train, const SequenceSet& val,
                         const TrainConfig& config);

struct CombinedLoss {
    Tensor total;
    double mse_sum = 0;
    double ce = 0;
};

/// sumMSE(pred, target) + ce_weight * crossEntropy(logits, labels), with the
/// components reported separately.
CombinedLoss combined_loss(const Tensor& pred_latent, const Tensor& target_latent, const Tensor& logits,
                           const std::vector<std::int64_t>& labels, double ce_weight);

/// Stacks [C,H,W] frames into one [B,C,H,W] batch tensor.
Tensor stack_frames(const std::vector<const Tensor*>& frames);

/// Splits off the last sequence of every garment as the validation set.
void split_validation(const SequenceSet& all, SequenceSet& train, SequenceSet& val);

}  // namespace dp
