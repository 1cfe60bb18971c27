#include "dp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

namespace dp {

using json = nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Temporarily drops requires_grad so metric/validation forwards record no
// graph; restores the previous flags on scope exit.
class NoGradGuard {
  public:
    explicit NoGradGuard(std::vector<Tensor> params) : params_(std::move(params)) {
        flags_.reserve(params_.size());
        for (auto& p : params_) {
            flags_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~NoGradGuard() {
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(flags_[i]);
    }

  private:
    std::vector<Tensor> params_;
    std::vector<bool> flags_;
};

std::vector<Tensor> all_params(const GarmentNet& model) {
    std::vector<Tensor> out;
    for (auto& [name, p] : model.named_params()) out.push_back(p);
    return out;
}

int argmax_row(std::span<const double> row) {
    int best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
        if (row[k] > row[best]) best = static_cast<int>(k);
    return best;
}

struct FrameRef {
    const LoadedSequence* seq;
    std::int64_t frame;
};

std::vector<FrameRef> collect_frames(const SequenceSet& seqs) {
    std::vector<FrameRef> out;
    for (const auto& s : seqs)
        for (std::int64_t f = 0; f < static_cast<std::int64_t>(s->frames.size()); ++f)
            out.push_back({s.get(), f});
    return out;
}

struct HeadAccuracy {
    double shape = 0, weight = 0;
};

// Frame-level argmax accuracy of both heads over a sequence set.
HeadAccuracy frame_accuracy(const GarmentNet& model, const SequenceSet& seqs, int batch_size) {
    const auto frames = collect_frames(seqs);
    if (frames.empty()) throw UsageError("accuracy over an empty sequence set");
    std::int64_t shape_hits = 0, weight_hits = 0;
    for (std::size_t begin = 0; begin < frames.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(frames.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<const Tensor*> batch;
        for (std::size_t i = begin; i < end; ++i)
            batch.push_back(&frames[i].seq->frames[static_cast<std::size_t>(frames[i].frame)]);
        const Tensor x = stack_frames(batch);
        const Tensor latents = model.features(x);
        const Tensor shape_logits = model.classify_batch(latents, Head::shape);
        const Tensor weight_logits = model.classify_batch(latents, Head::weight);
        const std::int64_t k5 = shape_logits.dim(1), k3 = weight_logits.dim(1);
        for (std::size_t i = begin; i < end; ++i) {
            const auto row = static_cast<std::int64_t>(i - begin);
            const auto sd = shape_logits.data().subspan(static_cast<std::size_t>(row * k5), static_cast<std::size_t>(k5));
            const auto wd = weight_logits.data().subspan(static_cast<std::size_t>(row * k3), static_cast<std::size_t>(k3));
            shape_hits += argmax_row(sd) == static_cast<int>(frames[i].seq->shape_class);
            weight_hits += argmax_row(wd) == static_cast<int>(frames[i].seq->weight_class);
        }
    }
    const double n = static_cast<double>(frames.size());
    return {shape_hits / n, weight_hits / n};
}

void maybe_save(const GarmentNet& model, const TrainConfig& config, int stage, const char* name) {
    if (config.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(config.checkpoint_dir);
    model.save(config.checkpoint_dir / name, stage);
}

}  // namespace

Tensor stack_frames(const std::vector<const Tensor*>& frames) {
    if (frames.empty()) throw UsageError("stack_frames: empty batch");
    const Shape& fs = frames.front()->shape();
    if (fs.size() != 3) throw DimensionError("stack_frames: frames must be [C,H,W]");
    std::vector<double> data;
    data.reserve(frames.size() * static_cast<std::size_t>(frames.front()->size()));
    for (const Tensor* f : frames) {
        if (f->shape() != fs) throw DimensionError("stack_frames: inconsistent frame shapes");
        const auto d = f->data();
        data.insert(data.end(), d.begin(), d.end());
    }
    return Tensor::from_data({static_cast<std::int64_t>(frames.size()), fs[0], fs[1], fs[2]}, std::move(data));
}

void split_validation(const SequenceSet& all, SequenceSet& train, SequenceSet& val) {
    std::map<std::string, std::vector<std::shared_ptr<LoadedSequence>>> by_garment;
    for (const auto& s : all) by_garment[s->garment_id].push_back(s);
    train.clear();
    val.clear();
    for (auto& [id, seqs] : by_garment) {
        std::sort(seqs.begin(), seqs.end(),
                  [](const auto& a, const auto& b) { return a->sequence_index < b->sequence_index; });
        if (seqs.size() < 2) {
            train.insert(train.end(), seqs.begin(), seqs.end());
            continue;
        }
        val.push_back(seqs.back());
        train.insert(train.end(), seqs.begin(), seqs.end() - 1);
    }
}

void TrainReport::write_jsonl(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write report: " + path.string());
    for (const auto& e : epochs) {
        json j;
        j["epoch"] = e.epoch;
        j["lr"] = e.lr;
        j["ce_shape"] = e.ce_shape;
        j["ce_weight"] = e.ce_weight_head;
        j["mse_sum"] = e.mse_sum;
        j["mse_mean"] = e.mse_mean;
        j["train_shape_acc"] = e.train_shape_acc;
        j["train_weight_acc"] = e.train_weight_acc;
        j["val_shape_acc"] = e.val_shape_acc;
        j["val_weight_acc"] = e.val_weight_acc;
        j["wall_s"] = e.wall_s;
        os << j.dump() << '\n';
    }
}

const EpochRecord& TrainReport::last() const {
    if (epochs.empty()) throw UsageError("empty train report");
    return epochs.back();
}

TrainReport train_stage1(GarmentNet& model, const SequenceSet& train, const SequenceSet& val,
                         const TrainConfig& config) {
    if (config.stage != Stage::stage1) throw UsageError("train_stage1 called with a stage-2 config");
    if (train.empty()) throw UsageError("train_stage1: no training sequences");
    if (config.epochs <= 0 || config.batch_size <= 0) throw UsageError("train_stage1: bad epochs/batch_size");

    model.set_all_trainable();
    std::vector<Tensor> params;
    for (auto& p : model.extractor_params()) params.push_back(p);
    for (auto& p : model.head_params()) params.push_back(p);
    Optimizer opt = Optimizer::sgd_momentum(params, config.effective_lr(), config.momentum);

    const auto frames = collect_frames(train);
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);

    TrainReport report;
    report.stage = Stage::stage1;
    double best_val = -1.0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::mt19937_64 rng(derive_seed(config.seed, 0x51a6e1 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double ce_shape_sum = 0, ce_weight_sum = 0;
        std::int64_t batches = 0, shape_hits = 0, weight_hits = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            std::vector<const Tensor*> batch;
            std::vector<std::int64_t> shape_labels, weight_labels;
            for (std::size_t i = begin; i < end; ++i) {
                const FrameRef& ref = frames[order[i]];
                batch.push_back(&ref.seq->frames[static_cast<std::size_t>(ref.frame)]);
                shape_labels.push_back(static_cast<std::int64_t>(ref.seq->shape_class));
                weight_labels.push_back(static_cast<std::int64_t>(ref.seq->weight_class));
            }
            const Tensor x = stack_frames(batch);
            const Tensor latents = model.features(x);
            const Tensor shape_logits = model.classify_batch(latents, Head::shape);
            const Tensor weight_logits = model.classify_batch(latents, Head::weight);
            const Tensor loss = add(cross_entropy(shape_logits, shape_labels),
                                    cross_entropy(weight_logits, weight_labels));
            if (!std::isfinite(loss.item()))
                throw InvariantError("NaN loss in stage 1 at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches) + " (lr=" + std::to_string(opt.lr()) + ")");
            opt.zero_grad();
            loss.backward();
            opt.step();

            const Tensor ce_s = cross_entropy(shape_logits.detach_copy(), shape_labels);
            const Tensor ce_w = cross_entropy(weight_logits.detach_copy(), weight_labels);
            ce_shape_sum += ce_s.item();
            ce_weight_sum += ce_w.item();
            ++batches;
            const std::int64_t k5 = shape_logits.dim(1), k3 = weight_logits.dim(1);
            for (std::size_t i = begin; i < end; ++i) {
                const auto row = static_cast<std::int64_t>(i - begin);
                shape_hits += argmax_row(shape_logits.data().subspan(static_cast<std::size_t>(row * k5),
                                                                     static_cast<std::size_t>(k5))) ==
                              static_cast<int>(shape_labels[static_cast<std::size_t>(row)]);
                weight_hits += argmax_row(weight_logits.data().subspan(static_cast<std::size_t>(row * k3),
                                                                       static_cast<std::size_t>(k3))) ==
                               static_cast<int>(weight_labels[static_cast<std::size_t>(row)]);
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr();
        rec.ce_shape = ce_shape_sum / static_cast<double>(batches);
        rec.ce_weight_head = ce_weight_sum / static_cast<double>(batches);
        rec.train_shape_acc = static_cast<double>(shape_hits) / static_cast<double>(frames.size());
        rec.train_weight_acc = static_cast<double>(weight_hits) / static_cast<double>(frames.size());
        if (!val.empty()) {
            NoGradGuard guard(all_params(model));
            const HeadAccuracy acc = frame_accuracy(model, val, config.batch_size);
            rec.val_shape_acc = acc.shape;
            rec.val_weight_acc = acc.weight;
        }
        rec.wall_s = seconds_since(t0);
        report.epochs.push_back(rec);

        const double score = rec.val_shape_acc >= 0 ? rec.val_shape_acc : rec.train_shape_acc;
        if (score > best_val) {
            best_val = score;
            maybe_save(model, config, 1, "checkpoint_best.dptc");
        }
        if (config.stop_at_train_shape_acc > 0 && rec.train_shape_acc >= config.stop_at_train_shape_acc) break;
        if (config.stop_at_val_shape_acc > 0 && rec.val_shape_acc >= config.stop_at_val_shape_acc) break;
    }

    maybe_save(model, config, 1, "checkpoint_final.dptc");
    return report;
}

CombinedLoss combined_loss(const Tensor& pred_latent, const Tensor& target_latent, const Tensor& logits,
                           const std::vector<std::int64_t>& labels, double ce_weight) {
    if (!(ce_weight >= 0)) throw UsageError("combined_loss: ce_weight must be >= 0");
    const Tensor mse = mse_loss(pred_latent, target_latent, Reduction::sum);
    const Tensor ce = cross_entropy(logits, labels);
    CombinedLoss out;
    out.mse_sum = mse.item();
    out.ce = ce.item();
    out.total = add(mse, mul_scalar(ce, ce_weight));
    return out;
}

namespace {

struct WindowBatchSource {
    // Flattened latents per (sequence, frame); filled lazily per epoch when
    // caching is off, or once up front when it is on.
    const GarmentNet& model;
    bool cached = false;
    std::map<const LoadedSequence*, std::vector<std::vector<double>>> cache;

    explicit WindowBatchSource(const GarmentNet& m) : model(m) {}

    void precompute(const SequenceSet& seqs, int batch_size) {
        NoGradGuard guard([&] {
            std::vector<Tensor> ps;
            for (auto& [n, p] : model.named_params()) ps.push_back(p);
            return ps;
        }());
        for (const auto& seq : seqs) {
            auto& rows = cache[seq.get()];
            rows.resize(seq->frames.size());
            for (std::size_t begin = 0; begin < seq->frames.size();
                 begin += static_cast<std::size_t>(batch_size)) {
                const std::size_t end = std::min(seq->frames.size(), begin + static_cast<std::size_t>(batch_size));
                std::vector<const Tensor*> batch;
                for (std::size_t f = begin; f < end; ++f) batch.push_back(&seq->frames[f]);
                const Tensor latents = model.features(stack_frames(batch));
                const std::int64_t n = latents.size() / latents.dim(0);
                for (std::size_t f = begin; f < end; ++f) {
                    const auto row = latents.data().subspan(static_cast<std::size_t>(f - begin) * static_cast<std::size_t>(n),
                                                            static_cast<std::size_t>(n));
                    rows[f].assign(row.begin(), row.end());
                }
            }
        }
        cached = true;
    }

    // Returns [B,N] flattened latents for frame offset `k` of each window.
    Tensor latents_for(const std::vector<SequenceWindow>& windows, const std::vector<std::size_t>& idx,
                       std::size_t begin, std::size_t end, int k) const {
        const std::int64_t n = model.preset().latent_len();
        if (cached) {
            std::vector<double> data;
            data.reserve((end - begin) * static_cast<std::size_t>(n));
            for (std::size_t i = begin; i < end; ++i) {
                const SequenceWindow& w = windows[idx[i]];
                const auto& rows = cache.at(&w.sequence());
                const auto& row = rows[static_cast<std::size_t>(w.start() + k)];
                data.insert(data.end(), row.begin(), row.end());
            }
            return Tensor::from_data({static_cast<std::int64_t>(end - begin), n}, std::move(data));
        }
        std::vector<const Tensor*> batch;
        for (std::size_t i = begin; i < end; ++i) {
            const SequenceWindow& w = windows[idx[i]];
            batch.push_back(k < 3 ? &w.frame(k) : &w.target_frame());
        }
        const Tensor latents = model.features(stack_frames(batch));
        return reshape(latents, {latents.dim(0), n});
    }
};

}  // namespace

TrainReport train_stage2(GarmentNet& model, const SequenceSet& train, const SequenceSet& val,
                         const TrainConfig& config) {
    if (config.stage != Stage::stage2) throw UsageError("train_stage2 called with a stage-1 config");
    if (train.empty()) throw UsageError("train_stage2: no training sequences");
    if (config.epochs <= 0 || config.batch_size <= 0) throw UsageError("train_stage2: bad epochs/batch_size");
    if (!(config.ce_weight > 0)) throw UsageError("train_stage2: ce_weight must be > 0");

    model.set_stage2_trainable();
    const std::uint64_t frozen_before = model.frozen_checksum();

    Optimizer opt = Optimizer::adam(model.lstm_params(), config.effective_lr(), config.adam_beta1,
                                    config.adam_beta2, config.adam_eps);
    const LrSchedule schedule{config.effective_lr(), config.lr_step_size, config.lr_decay};

    std::vector<SequenceWindow> windows;
    for (const auto& seq : train)
        for (auto& w : make_windows(seq, true)) windows.push_back(std::move(w));
    std::vector<SequenceWindow> val_windows;
    for (const auto& seq : val)
        for (auto& w : make_windows(seq, true)) val_windows.push_back(std::move(w));

    WindowBatchSource source(model);
    if (config.cache_latents) {
        SequenceSet all = train;
        all.insert(all.end(), val.begin(), val.end());
        source.precompute(all, config.batch_size);
    }

    const std::int64_t latent_len = model.preset().latent_len();
    const Shape latent_shape{model.preset().latent_channels, model.preset().latent_h, model.preset().latent_w};

    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);

    auto eval_windows = [&](const std::vector<SequenceWindow>& ws) -> HeadAccuracy {
        NoGradGuard guard(all_params(model));
        std::int64_t shape_hits = 0, weight_hits = 0;
        std::vector<std::size_t> idx(ws.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t begin = 0; begin < ws.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(ws.size(), begin + static_cast<std::size_t>(config.batch_size));
            const Tensor x0 = source.latents_for(ws, idx, begin, end, 0);
            const Tensor x1 = source.latents_for(ws, idx, begin, end, 1);
            const Tensor x2 = source.latents_for(ws, idx, begin, end, 2);
            const Tensor pred = model.predict_next_flat(x0, x1, x2);
            Shape batched = latent_shape;
            batched.insert(batched.begin(), pred.dim(0));
            const Tensor latents = reshape(pred, batched);
            const Tensor shape_logits = model.classify_batch(latents, Head::shape);
            const Tensor weight_logits = model.classify_batch(latents, Head::weight);
            const std::int64_t k5 = shape_logits.dim(1), k3 = weight_logits.dim(1);
            for (std::size_t i = begin; i < end; ++i) {
                const auto row = static_cast<std::int64_t>(i - begin);
                shape_hits += argmax_row(shape_logits.data().subspan(static_cast<std::size_t>(row * k5),
                                                                     static_cast<std::size_t>(k5))) ==
                              static_cast<int>(ws[i].shape_class());
                weight_hits += argmax_row(weight_logits.data().subspan(static_cast<std::size_t>(row * k3),
                                                                       static_cast<std::size_t>(k3))) ==
                               static_cast<int>(ws[i].weight_class());
            }
        }
        const double n = static_cast<double>(ws.size());
        return {shape_hits / n, weight_hits / n};
    };

    TrainReport report;
    report.stage = Stage::stage2;
    double best_val = -2.0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.set_lr(lr_at(schedule, epoch));
        std::mt19937_64 rng(derive_seed(config.seed, 0x52a6e2 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double mse_sum_acc = 0, ce_acc = 0;
        std::int64_t batches = 0, shape_hits = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            const std::int64_t b = static_cast<std::int64_t>(end - begin);
            const Tensor x0 = source.latents_for(windows, order, begin, end, 0);
            const Tensor x1 = source.latents_for(windows, order, begin, end, 1);
            const Tensor x2 = source.latents_for(windows, order, begin, end, 2);
            const Tensor target = source.latents_for(windows, order, begin, end, 3);
            std::vector<std::int64_t> labels;
            for (std::size_t i = begin; i < end; ++i)
                labels.push_back(static_cast<std::int64_t>(windows[order[i]].shape_class()));

            const Tensor pred = model.predict_next_flat(x0, x1, x2);
            Shape batched = latent_shape;
            batched.insert(batched.begin(), b);
            const Tensor pred_latents = reshape(pred, batched);
            const Tensor shape_logits = model.classify_batch(pred_latents, Head::shape);

            const Tensor mse = mse_loss(pred, target, Reduction::sum);
            const Tensor ce = cross_entropy(shape_logits, labels);
            // Batch-averaged variant of the combined loss: sum-MSE per window
            // averaged over the batch, CE already a batch mean.
            const Tensor loss = add(mul_scalar(mse, 1.0 / static_cast<double>(b)),
                                    mul_scalar(ce, config.ce_weight));
            if (!std::isfinite(loss.item()))
                throw InvariantError("NaN loss in stage 2 at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches) + " (lr=" + std::to_string(opt.lr()) + ")");
            opt.zero_grad();
            loss.backward();
            opt.step();

            mse_sum_acc += mse.item() / static_cast<double>(b);
            ce_acc += ce.item();
            ++batches;
            const std::int64_t k5 = shape_logits.dim(1);
            for (std::int64_t row = 0; row < b; ++row)
                shape_hits += argmax_row(shape_logits.data().subspan(static_cast<std::size_t>(row * k5),
                                                                     static_cast<std::size_t>(k5))) ==
                              static_cast<int>(labels[static_cast<std::size_t>(row)]);
        }

        if (model.frozen_checksum() != frozen_before)
            throw InvariantError("stage 2 mutated frozen extractor/classifier parameters at epoch " +
                                 std::to_string(epoch));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr();
        rec.mse_sum = mse_sum_acc / static_cast<double>(batches);
        rec.mse_mean = rec.mse_sum / static_cast<double>(latent_len);
        rec.ce_shape = ce_acc / static_cast<double>(batches);
        rec.train_shape_acc = static_cast<double>(shape_hits) / static_cast<double>(windows.size());
        rec.train_weight_acc = 0;
        if (!val_windows.empty()) {
            const HeadAccuracy acc = eval_windows(val_windows);
            rec.val_shape_acc = acc.shape;
            rec.val_weight_acc = acc.weight;
        }
        rec.wall_s = seconds_since(t0);
        report.epochs.push_back(rec);

        const double score = rec.val_shape_acc >= 0 ? rec.val_shape_acc : -rec.mse_mean;
        if (score > best_val) {
            best_val = score;
            maybe_save(model, config, 2, "checkpoint_best.dptc");
        }
        if (config.stop_at_val_shape_acc > 0 && rec.val_shape_acc >= config.stop_at_val_shape_acc) break;
    }

    maybe_save(model, config, 2, "checkpoint_final.dptc");
    return report;
}

}  // namespace dp
