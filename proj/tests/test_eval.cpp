#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <random>

#include "dp/eval.hpp"
#include "dp/train.hpp"
#include "dp/verify.hpp"

using namespace dp;

namespace {

std::shared_ptr<LoadedSequence> flat_sequence(ShapeClass shape, WeightClass weight, int frames, int index = 0) {
    auto seq = std::make_shared<LoadedSequence>();
    seq->garment_id = std::string(to_string(shape)) + "_x";
    seq->sequence_index = index;
    seq->shape_class = shape;
    seq->weight_class = weight;
    for (int f = 0; f < frames; ++f)
        seq->frames.push_back(Tensor::full({1, 8, 8}, 0.1 * static_cast<double>(f % 7)));
    return seq;
}

std::vector<double> one_hot(int k, int n) {
    std::vector<double> v(static_cast<std::size_t>(n), 0.0);
    v[static_cast<std::size_t>(k)] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("update_ma: constant probabilities stay fixed at that vector") {
    MAState state;
    const std::vector<double> sp{0.2, 0.3, 0.1, 0.25, 0.15};
    const std::vector<double> wp{0.5, 0.3, 0.2};
    for (int i = 0; i < 17; ++i) update_ma(state, sp, wp);
    const auto ma = state.shape_ma();
    for (int k = 0; k < 5; ++k) CHECK(ma[static_cast<std::size_t>(k)] == doctest::Approx(sp[static_cast<std::size_t>(k)]).epsilon(1e-12));
}

TEST_CASE("update_ma: two windows average elementwise") {
    MAState state;
    update_ma(state, std::vector<double>{0.6, 0.4, 0, 0, 0}, std::vector<double>{1, 0, 0});
    update_ma(state, std::vector<double>{0.2, 0.8, 0, 0, 0}, std::vector<double>{0, 1, 0});
    const auto ma = state.shape_ma();
    CHECK(ma[0] == doctest::Approx(0.4));
    CHECK(ma[1] == doctest::Approx(0.6));
    const auto wa = state.weight_ma();
    CHECK(wa[0] == doctest::Approx(0.5));
}

TEST_CASE("MA of 198 random probability vectors matches the brute-force mean to 1e-12") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    MAState state;
    std::vector<double> sacc(5, 0), wacc(3, 0);
    for (int i = 0; i < 198; ++i) {
        std::vector<double> sp(5), wp(3);
        double ss = 0, ws = 0;
        for (auto& v : sp) ss += (v = u(rng) + 1e-6);
        for (auto& v : sp) v /= ss;
        for (auto& v : wp) ws += (v = u(rng) + 1e-6);
        for (auto& v : wp) v /= ws;
        for (int k = 0; k < 5; ++k) sacc[static_cast<std::size_t>(k)] += sp[static_cast<std::size_t>(k)];
        for (int k = 0; k < 3; ++k) wacc[static_cast<std::size_t>(k)] += wp[static_cast<std::size_t>(k)];
        update_ma(state, sp, wp);
    }
    const auto ma = state.shape_ma();
    for (int k = 0; k < 5; ++k)
        CHECK(std::abs(ma[static_cast<std::size_t>(k)] - sacc[static_cast<std::size_t>(k)] / 198.0) < 1e-12);
    CHECK(state.windows == 198);
    CHECK(state.shape_trace.size() == 198);
}

TEST_CASE("MA vectors of probability inputs sum to one within 1e-9") {
    const SuiteResult r = suite_ma_oracle(5, 50);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("decide: argmax, documented tie-break to the lowest index") {
    MAState state;
    update_ma(state, std::vector<double>{0.1, 0.2, 0.5, 0.1, 0.1}, std::vector<double>{0.5, 0.5, 0.0});
    const SequenceDecision d = decide(state);
    CHECK(d.shape_class == 2);
    CHECK_FALSE(d.shape_tie);
    CHECK(d.weight_class == 0);
    CHECK(d.weight_tie);
    MAState empty;
    CHECK_THROWS_AS(decide(empty), UsageError);
}

TEST_CASE("decide is invariant under positive rescaling of the MA vector") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
        MAState a, b;
        std::vector<double> sp(5), wp(3);
        for (auto& v : sp) v = u(rng);
        for (auto& v : wp) v = u(rng);
        std::vector<double> sp2 = sp, wp2 = wp;
        const double scale = 7.5;
        for (auto& v : sp2) v *= scale;
        for (auto& v : wp2) v *= scale;
        update_ma(a, sp, wp);
        update_ma(b, sp2, wp2);
        CHECK(decide(a).shape_class == decide(b).shape_class);
        CHECK(decide(a).weight_class == decide(b).weight_class);
    }
}

TEST_CASE("MA aggregation is order-invariant") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<std::vector<double>> sps, wps;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> sp(5), wp(3);
        for (auto& v : sp) v = u(rng);
        for (auto& v : wp) v = u(rng);
        sps.push_back(sp);
        wps.push_back(wp);
    }
    MAState fwd;
    for (int i = 0; i < 40; ++i) update_ma(fwd, sps[static_cast<std::size_t>(i)], wps[static_cast<std::size_t>(i)]);
    MAState rev;
    for (int i = 39; i >= 0; --i) update_ma(rev, sps[static_cast<std::size_t>(i)], wps[static_cast<std::size_t>(i)]);
    const auto a = fwd.shape_ma(), b = rev.shape_ma();
    for (int k = 0; k < 5; ++k)
        CHECK(a[static_cast<std::size_t>(k)] == doctest::Approx(b[static_cast<std::size_t>(k)]).epsilon(1e-12));
    CHECK(decide(fwd).shape_class == decide(rev).shape_class);
}

TEST_CASE("window_predict produces normalized probabilities deterministically") {
    GarmentNet model(ModelPreset::toy(), 3);
    auto seq = std::make_shared<LoadedSequence>();
    seq->shape_class = ShapeClass::shirt;
    seq->weight_class = WeightClass::medium;
    std::mt19937_64 rng(5);
    for (int f = 0; f < 4; ++f) seq->frames.push_back(Tensor::uniform({1, 64, 64}, 0, 1, rng));
    const auto windows = make_windows(seq, false);
    const auto [sp, wp] = window_predict(model, windows[0]);
    double ss = 0, ws = 0;
    for (double v : sp) ss += v;
    for (double v : wp) ws += v;
    CHECK(std::abs(ss - 1.0) < 1e-12);
    CHECK(std::abs(ws - 1.0) < 1e-12);
    const auto [sp2, wp2] = window_predict(model, windows[0]);
    for (std::size_t i = 0; i < sp.size(); ++i) CHECK(sp[i] == sp2[i]);
}

TEST_CASE("evaluate_continuous: one decision per sequence, frame_count-2 windows each") {
    std::vector<std::shared_ptr<LoadedSequence>> seqs;
    for (int c = 0; c < 5; ++c)
        seqs.push_back(flat_sequence(static_cast<ShapeClass>(c), static_cast<WeightClass>(c % 3), 20, c));
    const WindowPredictor perfect = [](const SequenceWindow& w) {
        return std::pair{one_hot(static_cast<int>(w.shape_class()), 5),
                         one_hot(static_cast<int>(w.weight_class()), 3)};
    };
    const EvalResult r = evaluate_continuous(perfect, seqs);
    CHECK(r.decision_count == 5);
    for (const auto& s : r.sequences) CHECK(s.ma.windows == 18);
    // perfect stub: identity confusion, accuracy 1
    CHECK(r.shape_avg_acc == doctest::Approx(1.0));
    CHECK(r.weight_avg_acc == doctest::Approx(1.0));
    for (int c = 0; c < 5; ++c)
        CHECK(r.shape_confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)] == 1);
    // confusion matrix total equals the number of test sequences
    std::int64_t total = 0;
    for (const auto& row : r.shape_confusion)
        for (auto v : row) total += v;
    CHECK(total == 5);
}

TEST_CASE("evaluate_continuous: empty test set is a usage error") {
    CHECK_THROWS_AS(evaluate_continuous(WindowPredictor{[](const SequenceWindow&) {
                        return std::pair{std::vector<double>(5, 0.2), std::vector<double>(3, 1.0 / 3)};
                    }}, {}),
                    UsageError);
}

TEST_CASE("uniform-random stub lands at chance level within 3 sigma") {
    // 300 sequences, shape chance 0.2, weight chance 1/3.
    std::vector<std::shared_ptr<LoadedSequence>> seqs;
    for (int i = 0; i < 300; ++i)
        seqs.push_back(flat_sequence(static_cast<ShapeClass>(i % 5), static_cast<WeightClass>(i % 3), 6, i));
    auto rng = std::make_shared<std::mt19937_64>(99);
    const WindowPredictor random_stub = [rng](const SequenceWindow&) {
        std::uniform_int_distribution<int> s5(0, 4), s3(0, 2);
        return std::pair{one_hot(s5(*rng), 5), one_hot(s3(*rng), 3)};
    };
    const EvalResult r = evaluate_continuous(random_stub, seqs);
    // overall accuracy: mean over classes = overall here (balanced classes)
    const double n = 300.0;
    const double shape_sigma = std::sqrt(0.2 * 0.8 / n);
    const double weight_sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / n);
    CHECK(std::abs(r.shape_avg_acc - 0.2) <= 3 * shape_sigma + 0.02);
    CHECK(std::abs(r.weight_avg_acc - 1.0 / 3) <= 3 * weight_sigma + 0.02);
}

TEST_CASE("single-shot eval: truth stub gives 100%, chance stub about 20%/33%") {
    std::vector<std::shared_ptr<LoadedSequence>> seqs;
    for (int i = 0; i < 30; ++i)
        seqs.push_back(flat_sequence(static_cast<ShapeClass>(i % 5), static_cast<WeightClass>(i % 3), 50, i));

    int call = 0;
    std::vector<std::pair<int, int>> truth;
    for (const auto& s : seqs)
        for (std::size_t f = 0; f < s->frames.size(); ++f)
            truth.emplace_back(static_cast<int>(s->shape_class), static_cast<int>(s->weight_class));
    const FramePredictor perfect = [&](const Tensor&) {
        const auto [sc, wc] = truth[static_cast<std::size_t>(call++)];
        return std::pair{one_hot(sc, 5), one_hot(wc, 3)};
    };
    const EvalResult r = single_shot_eval(perfect, seqs);
    CHECK(r.decision_count == 30 * 50);
    CHECK(r.shape_avg_acc == doctest::Approx(1.0));
    CHECK(r.weight_avg_acc == doctest::Approx(1.0));

    auto rng = std::make_shared<std::mt19937_64>(17);
    const FramePredictor chance = [rng](const Tensor&) {
        std::uniform_int_distribution<int> s5(0, 4), s3(0, 2);
        return std::pair{one_hot(s5(*rng), 5), one_hot(s3(*rng), 3)};
    };
    const EvalResult c = single_shot_eval(chance, seqs);
    CHECK(std::abs(c.shape_avg_acc - 0.2) < 0.05);
    CHECK(std::abs(c.weight_avg_acc - 1.0 / 3) < 0.06);
}

TEST_CASE("eval result serializes with matrices and traces") {
    std::vector<std::shared_ptr<LoadedSequence>> seqs{flat_sequence(ShapeClass::towel, WeightClass::heavy, 8)};
    const WindowPredictor stub = [](const SequenceWindow&) {
        return std::pair{one_hot(3, 5), one_hot(2, 3)};
    };
    const EvalResult r = evaluate_continuous(stub, seqs);
    const auto dir = std::filesystem::temp_directory_path() / "dp_eval_out";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    r.write_json(dir / "result.json");
    r.write_ma_traces(dir / "traces");
    CHECK(std::filesystem::exists(dir / "result.json"));
    int csvs = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "traces")) {
        ++csvs;
        (void)e;
    }
    CHECK(csvs == 1);
    std::filesystem::remove_all(dir);
}
