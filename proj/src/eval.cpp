#include "dp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace dp {

using json = nlohmann::json;

std::vector<double> MAState::shape_ma() const {
    if (windows == 0) throw UsageError("MA over zero windows");
    std::vector<double> out(shape_sum);
    for (auto& v : out) v /= static_cast<double>(windows);
    return out;
}

std::vector<double> MAState::weight_ma() const {
    if (windows == 0) throw UsageError("MA over zero windows");
    std::vector<double> out(weight_sum);
    for (auto& v : out) v /= static_cast<double>(windows);
    return out;
}

void update_ma(MAState& state, std::span<const double> shape_probs, std::span<const double> weight_probs) {
    if (shape_probs.size() != state.shape_sum.size() || weight_probs.size() != state.weight_sum.size())
        throw DimensionError("update_ma: probability vector sizes do not match the class counts");
    for (std::size_t i = 0; i < shape_probs.size(); ++i) state.shape_sum[i] += shape_probs[i];
    for (std::size_t i = 0; i < weight_probs.size(); ++i) state.weight_sum[i] += weight_probs[i];
    ++state.windows;
    state.shape_trace.push_back(state.shape_ma());
    state.weight_trace.push_back(state.weight_ma());
}

namespace {

std::pair<int, bool> argmax_with_tie(const std::vector<double>& v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    bool tie = false;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (static_cast<int>(i) != best && v[i] == v[static_cast<std::size_t>(best)]) tie = true;
    return {best, tie};
}

std::vector<double> softmax_vec(const Tensor& logits) {
    const auto d = logits.data();
    double mx = d[0];
    for (double v : d) mx = std::max(mx, v);
    std::vector<double> out(d.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        out[i] = std::exp(d[i] - mx);
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return out;
}

struct ConfusionAccumulator {
    std::vector<std::vector<std::int64_t>> shape =
        std::vector<std::vector<std::int64_t>>(kShapeClassCount, std::vector<std::int64_t>(kShapeClassCount, 0));
    std::vector<std::vector<std::int64_t>> weight =
        std::vector<std::vector<std::int64_t>>(kWeightClassCount, std::vector<std::int64_t>(kWeightClassCount, 0));
    std::int64_t count = 0;

    void add(ShapeClass true_shape, int pred_shape, WeightClass true_weight, int pred_weight) {
        shape[static_cast<std::size_t>(true_shape)][static_cast<std::size_t>(pred_shape)] += 1;
        weight[static_cast<std::size_t>(true_weight)][static_cast<std::size_t>(pred_weight)] += 1;
        ++count;
    }

    void finish(EvalResult& result) const {
        result.shape_confusion = shape;
        result.weight_confusion = weight;
        result.decision_count = count;
        auto per_class = [](const std::vector<std::vector<std::int64_t>>& cm, std::vector<double>& accs) {
            double sum = 0;
            int classes_seen = 0;
            accs.assign(cm.size(), 0.0);
            for (std::size_t c = 0; c < cm.size(); ++c) {
                std::int64_t row = 0;
                for (std::int64_t v : cm[c]) row += v;
                if (row == 0) {
                    accs[c] = 0.0;
                    continue;
                }
                accs[c] = static_cast<double>(cm[c][c]) / static_cast<double>(row);
                sum += accs[c];
                ++classes_seen;
            }
            return classes_seen > 0 ? sum / classes_seen : 0.0;
        };
        result.shape_avg_acc = per_class(shape, result.shape_class_acc);
        result.weight_avg_acc = per_class(weight, result.weight_class_acc);
    }
};

}  // namespace

SequenceDecision decide(const MAState& state) {
    if (state.windows == 0) throw UsageError("decide: no windows aggregated");
    SequenceDecision d;
    const auto [s, st] = argmax_with_tie(state.shape_ma());
    const auto [w, wt] = argmax_with_tie(state.weight_ma());
    d.shape_class = s;
    d.shape_tie = st;
    d.weight_class = w;
    d.weight_tie = wt;
    return d;
}

std::pair<std::vector<double>, std::vector<double>> window_predict(const GarmentNet& model,
                                                                   const SequenceWindow& window) {
    const std::int64_t n = model.preset().latent_len();
    auto flat = [&](const Tensor& frame) {
        const LatentMap lm = model.extract_features(frame);
        return reshape(lm.values, {1, n});
    };
    const Tensor pred = model.predict_next_flat(flat(window.frame(0)), flat(window.frame(1)), flat(window.frame(2)));
    const Tensor latents = reshape(
        pred, {1, model.preset().latent_channels, model.preset().latent_h, model.preset().latent_w});
    const Tensor shape_logits = model.classify_batch(latents, Head::shape);
    const Tensor weight_logits = model.classify_batch(latents, Head::weight);
    return {softmax_vec(shape_logits), softmax_vec(weight_logits)};
}

EvalResult evaluate_continuous(const WindowPredictor& predictor,
                               const std::vector<std::shared_ptr<LoadedSequence>>& sequences) {
    if (sequences.empty()) throw UsageError("evaluate_continuous: empty test set");
    EvalResult result;
    ConfusionAccumulator acc;
    for (const auto& seq : sequences) {
        const auto windows = make_windows(seq, false);
        SequenceOutcome outcome;
        outcome.garment_id = seq->garment_id;
        outcome.sequence_index = seq->sequence_index;
        outcome.true_shape = seq->shape_class;
        outcome.true_weight = seq->weight_class;
        for (const auto& w : windows) {
            const auto [shape_probs, weight_probs] = predictor(w);
            update_ma(outcome.ma, shape_probs, weight_probs);
        }
        outcome.decision = decide(outcome.ma);
        acc.add(outcome.true_shape, outcome.decision.shape_class, outcome.true_weight,
                outcome.decision.weight_class);
        result.sequences.push_back(std::move(outcome));
    }
    acc.finish(result);
    return result;
}

EvalResult evaluate_continuous(const GarmentNet& model,
                               const std::vector<std::shared_ptr<LoadedSequence>>& sequences) {
    return evaluate_continuous(
        [&model](const SequenceWindow& w) { return window_predict(model, w); }, sequences);
}

EvalResult single_shot_eval(const FramePredictor& predictor,
                            const std::vector<std::shared_ptr<LoadedSequence>>& sequences) {
    if (sequences.empty()) throw UsageError("single_shot_eval: empty test set");
    EvalResult result;
    ConfusionAccumulator acc;
    for (const auto& seq : sequences)
        for (const auto& frame : seq->frames) {
            const auto [shape_probs, weight_probs] = predictor(frame);
            acc.add(seq->shape_class, argmax_with_tie(shape_probs).first, seq->weight_class,
                    argmax_with_tie(weight_probs).first);
        }
    acc.finish(result);
    return result;
}

EvalResult single_shot_eval(const GarmentNet& model,
                            const std::vector<std::shared_ptr<LoadedSequence>>& sequences) {
    return single_shot_eval(
        [&model](const Tensor& frame) {
            const LatentMap lm = model.extract_features(frame);
            const Tensor latents = reshape(lm.values, {1, lm.values.dim(0), lm.values.dim(1), lm.values.dim(2)});
            return std::pair{softmax_vec(model.classify_batch(latents, Head::shape)),
                             softmax_vec(model.classify_batch(latents, Head::weight))};
        },
        sequences);
}

void EvalResult::write_json(const std::filesystem::path& path) const {
    json j;
    j["decision_count"] = decision_count;
    j["shape_confusion"] = shape_confusion;
    j["weight_confusion"] = weight_confusion;
    j["shape_class_acc"] = shape_class_acc;
    j["weight_class_acc"] = weight_class_acc;
    j["shape_avg_acc"] = shape_avg_acc;
    j["weight_avg_acc"] = weight_avg_acc;
    json seqs = json::array();
    for (const auto& s : sequences) {
        json js;
        js["garment_id"] = s.garment_id;
        js["sequence_index"] = s.sequence_index;
        js["true_shape"] = to_string(s.true_shape);
        js["true_weight"] = to_string(s.true_weight);
        js["pred_shape"] = to_string(static_cast<ShapeClass>(s.decision.shape_class));
        js["pred_weight"] = to_string(static_cast<WeightClass>(s.decision.weight_class));
        js["shape_tie"] = s.decision.shape_tie;
        js["weight_tie"] = s.decision.weight_tie;
        js["windows"] = s.ma.windows;
        seqs.push_back(std::move(js));
    }
    j["sequences"] = std::move(seqs);
    std::ofstream os(path);
    if (!os) throw DataError("cannot write eval result: " + path.string());
    os << j.dump(2) << '\n';
}

void EvalResult::write_ma_traces(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& s : sequences) {
        char name[96];
        std::snprintf(name, sizeof(name), "ma_%s_seq%02d.csv", s.garment_id.c_str(), s.sequence_index);
        std::ofstream os(dir / name);
        if (!os) throw DataError("cannot write MA trace in " + dir.string());
        os << "window_index";
        for (int c = 0; c < kShapeClassCount; ++c) os << ",shape_" << to_string(static_cast<ShapeClass>(c));
        for (int c = 0; c < kWeightClassCount; ++c) os << ",weight_" << to_string(static_cast<WeightClass>(c));
        os << '\n';
        for (std::size_t i = 0; i < s.ma.shape_trace.size(); ++i) {
            os << i;
            for (double v : s.ma.shape_trace[i]) os << ',' << v;
            for (double v : s.ma.weight_trace[i]) os << ',' << v;
            os << '\n';
        }
    }
}

}  // namespace dp
