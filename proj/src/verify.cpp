#include "dp/verify.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "dp/cloth.hpp"
#include "dp/eval.hpp"
#include "dp/model.hpp"
#include "dp/nn.hpp"

namespace dp {

double max_grad_rel_error(const ScalarFn& fn, std::vector<Tensor> inputs, double h) {
    for (auto& t : inputs) t.zero_grad();
    const Tensor loss = fn(inputs);
    if (loss.size() != 1) throw UsageError("gradcheck: fn must return a scalar");
    loss.backward();

    double worst = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const auto analytic = t.grad();
        auto data = t.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = fn(inputs).item();
            data[i] = saved - h;
            const double down = fn(inputs).item();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) /
                               std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

namespace {

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

Tensor weighted_sum(const Tensor& t, const Tensor& weights) { return sum_all(mul(t, weights)); }

struct OpCase {
    std::string name;
    double worst = 0.0;
};

double check_all_ops(std::uint64_t seed, int seeds_per_op, double tolerance, std::string& failing) {
    double worst_overall = 0.0;
    auto note = [&](const char* name, double worst) {
        if (worst > worst_overall) {
            worst_overall = worst;
            if (worst > tolerance) failing = name;
        }
    };

    for (int s = 0; s < seeds_per_op; ++s) {
        std::mt19937_64 rng(derive_seed(seed, 0x9c0de + static_cast<std::uint64_t>(s)));

        {
            Tensor a = Tensor::randn({3, 4}, 1.0, rng, true);
            Tensor b = Tensor::randn({3, 4}, 1.0, rng, true);
            Tensor w = Tensor::randn({3, 4}, 1.0, rng);
            note("add", max_grad_rel_error(
                            [&](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), w); },
                            {a, b}));
            note("mul", max_grad_rel_error(
                            [&](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1]), w); },
                            {a, b}));
        }
        {
            Tensor x = Tensor::randn({1, 1, 5, 5}, 1.0, rng, true);
            Tensor k = Tensor::randn({1, 1, 3, 3}, 1.0, rng, true);
            Tensor b = Tensor::randn({1}, 1.0, rng, true);
            Tensor w = Tensor::randn({1, 1, 3, 3}, 1.0, rng);
            note("conv2d", max_grad_rel_error(
                               [&](const std::vector<Tensor>& in) {
                                   return weighted_sum(conv2d(in[0], in[1], in[2], 1, 0), w);
                               },
                               {x, k, b}));
            Tensor w2 = Tensor::randn({1, 1, 3, 3}, 1.0, rng);
            note("conv2d_strided", max_grad_rel_error(
                                       [&](const std::vector<Tensor>& in) {
                                           return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1), w2);
                                       },
                                       {x, k, b}));
        }
        {
            Tensor x = Tensor::randn({1, 2, 6, 6}, 1.0, rng, true);
            Tensor w = Tensor::randn({1, 2, 3, 3}, 1.0, rng);
            note("max_pool2d", max_grad_rel_error(
                                   [&](const std::vector<Tensor>& in) {
                                       return weighted_sum(max_pool2d(in[0], 2, 2), w);
                                   },
                                   {x}));
            Tensor w2 = Tensor::randn({1, 2, 2, 2}, 1.0, rng);
            note("adaptive_avg_pool2d", max_grad_rel_error(
                                            [&](const std::vector<Tensor>& in) {
                                                return weighted_sum(adaptive_avg_pool2d(in[0], 2, 2), w2);
                                            },
                                            {x}));
        }
        {
            Tensor x = Tensor::randn({2, 5}, 1.0, rng, true);
            Tensor wt = Tensor::randn({3, 5}, 1.0, rng, true);
            Tensor b = Tensor::randn({3}, 1.0, rng, true);
            Tensor w = Tensor::randn({2, 3}, 1.0, rng);
            note("dense", max_grad_rel_error(
                              [&](const std::vector<Tensor>& in) {
                                  return weighted_sum(dense(in[0], in[1], in[2]), w);
                              },
                              {x, wt, b}));
        }
        {
            Tensor x = Tensor::randn({2, 5}, 1.0, rng, true);
            Tensor w = Tensor::randn({2, 5}, 1.0, rng);
            note("relu", max_grad_rel_error(
                             [&](const std::vector<Tensor>& in) { return weighted_sum(relu(in[0]), w); }, {x}));
            note("sigmoid",
                 max_grad_rel_error(
                     [&](const std::vector<Tensor>& in) { return weighted_sum(sigmoid(in[0]), w); }, {x}));
            note("tanh", max_grad_rel_error(
                             [&](const std::vector<Tensor>& in) { return weighted_sum(tanh_op(in[0]), w); }, {x}));
            note("softmax_lastdim",
                 max_grad_rel_error(
                     [&](const std::vector<Tensor>& in) { return weighted_sum(softmax_lastdim(in[0]), w); }, {x}));
            const std::uint64_t drop_seed = derive_seed(seed, 77 + static_cast<std::uint64_t>(s));
            note("dropout", max_grad_rel_error(
                                [&, drop_seed](const std::vector<Tensor>& in) {
                                    std::mt19937_64 drng(drop_seed);
                                    return weighted_sum(dropout(in[0], 0.4, drng, true), w);
                                },
                                {x}));
        }
        {
            Tensor logits = Tensor::randn({2, 3}, 1.0, rng, true);
            const std::vector<std::int64_t> targets{static_cast<std::int64_t>(rng() % 3),
                                                    static_cast<std::int64_t>(rng() % 3)};
            note("cross_entropy", max_grad_rel_error(
                                      [&](const std::vector<Tensor>& in) {
                                          return cross_entropy(in[0], targets);
                                      },
                                      {logits}));
        }
        {
            Tensor pred = Tensor::randn({2, 4}, 1.0, rng, true);
            Tensor target = Tensor::randn({2, 4}, 1.0, rng);
            note("mse_sum", max_grad_rel_error(
                                [&](const std::vector<Tensor>& in) {
                                    return mse_loss(in[0], target, Reduction::sum);
                                },
                                {pred}));
            note("mse_mean", max_grad_rel_error(
                                 [&](const std::vector<Tensor>& in) {
                                     return mse_loss(in[0], target, Reduction::mean);
                                 },
                                 {pred}));
        }
        {
            // Three chained LSTM steps, N=4, H=3.
            const std::int64_t n = 4, hsize = 3;
            Tensor x0 = Tensor::randn({2, n}, 1.0, rng, true);
            Tensor x1 = Tensor::randn({2, n}, 1.0, rng, true);
            Tensor x2 = Tensor::randn({2, n}, 1.0, rng, true);
            Tensor wx = Tensor::randn({4 * hsize, n}, 0.5, rng, true);
            Tensor wh = Tensor::randn({4 * hsize, hsize}, 0.5, rng, true);
            Tensor bias = Tensor::randn({4 * hsize}, 0.5, rng, true);
            Tensor w = Tensor::randn({2, hsize}, 1.0, rng);
            note("lstm_cell_x3", max_grad_rel_error(
                                     [&](const std::vector<Tensor>& in) {
                                         LstmCellParams p{in[3], in[4], in[5]};
                                         Tensor h = Tensor::zeros({2, hsize});
                                         Tensor c = Tensor::zeros({2, hsize});
                                         for (const Tensor* step : {&in[0], &in[1], &in[2]}) {
                                             auto [h2, c2] = lstm_cell(*step, h, c, p);
                                             h = h2;
                                             c = c2;
                                         }
                                         return weighted_sum(h, w);
                                     },
                                     {x0, x1, x2, wx, wh, bias}));
        }
    }
    return worst_overall;
}

double check_pipeline(std::uint64_t seed, int seeds, std::string& failing) {
    // conv -> pool -> dense -> cross-entropy on an 8x8 toy input; checks
    // every parameter gradient end to end.
    double worst = 0.0;
    for (int s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(derive_seed(seed, 0x715e + static_cast<std::uint64_t>(s)));
        Tensor x = Tensor::randn({2, 1, 8, 8}, 1.0, rng, true);
        Tensor k = Tensor::randn({2, 1, 3, 3}, 0.7, rng, true);
        Tensor kb = Tensor::randn({2}, 0.3, rng, true);
        Tensor wt = Tensor::randn({3, 18}, 0.5, rng, true);
        Tensor b = Tensor::randn({3}, 0.3, rng, true);
        const std::vector<std::int64_t> targets{static_cast<std::int64_t>(rng() % 3),
                                                static_cast<std::int64_t>(rng() % 3)};
        const double err = max_grad_rel_error(
            [&](const std::vector<Tensor>& in) {
                Tensor y = conv2d(in[0], in[1], in[2], 1, 0);
                y = relu(y);
                y = max_pool2d(y, 2, 2);
                y = flatten_batch(y);
                y = dense(y, in[3], in[4]);
                return cross_entropy(y, targets);
            },
            {x, k, kb, wt, b});
        worst = std::max(worst, err);
    }
    if (worst > 1e-3) failing = "pipeline";
    return worst;
}

}  // namespace

SuiteResult suite_gradcheck(std::uint64_t seed, int seeds_per_op, double tolerance) {
    SuiteResult r;
    r.name = "gradcheck";
    const double t0 = now_s();
    std::string failing;
    const double worst = check_all_ops(seed, seeds_per_op, tolerance, failing);
    r.seconds = now_s() - t0;
    r.pass = worst <= tolerance;
    std::ostringstream os;
    os << "max rel err " << worst << " over " << seeds_per_op << " seeds/op";
    if (!r.pass) os << " (failing op: " << failing << ")";
    r.detail = os.str();
    return r;
}

SuiteResult suite_pipeline_gradcheck(std::uint64_t seed, int seeds, double tolerance) {
    SuiteResult r;
    r.name = "pipeline-gradcheck";
    const double t0 = now_s();
    std::string failing;
    const double worst = check_pipeline(seed, seeds, failing);
    r.seconds = now_s() - t0;
    r.pass = worst <= tolerance;
    std::ostringstream os;
    os << "max rel err " << worst << " over " << seeds << " seeds";
    r.detail = os.str();
    return r;
}

SuiteResult suite_shape_traces() {
    SuiteResult r;
    r.name = "shape-traces";
    const double t0 = now_s();
    try {
        const ModelPreset paper = ModelPreset::paper();
        const auto chain = paper.trace_spatial();
        const bool dims_ok = chain.front() == std::array<std::int64_t, 2>{256, 256} &&
                             chain[1] == std::array<std::int64_t, 2>{31, 31} &&
                             chain.back() == std::array<std::int64_t, 2>{15, 15} &&
                             paper.flatten_len() == 9216 && paper.classifier_mid == 512;
        const ModelPreset toy = ModelPreset::toy();
        const bool toy_ok = toy.latent_channels == 32 && toy.latent_h == 6 && toy.flatten_len() == 1152;
        r.pass = dims_ok && toy_ok;
        r.detail = r.pass ? "paper 256->63->31->15, flatten 9216; toy latent [32,6,6], flatten 1152"
                          : "preset trace mismatch";
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = e.what();
    }
    r.seconds = now_s() - t0;
    return r;
}

SuiteResult suite_ma_oracle(std::uint64_t seed, int cases) {
    SuiteResult r;
    r.name = "ma-oracle";
    const double t0 = now_s();
    std::mt19937_64 rng(derive_seed(seed, 0x3a0));
    std::uniform_int_distribution<int> len_dist(1, 198);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double worst = 0.0;
    bool decisions_ok = true;
    for (int cs = 0; cs < cases; ++cs) {
        const int steps = len_dist(rng);
        MAState state;
        std::vector<double> shape_acc(kShapeClassCount, 0.0), weight_acc(kWeightClassCount, 0.0);
        for (int t = 0; t < steps; ++t) {
            auto draw = [&](int k) {
                std::vector<double> p(static_cast<std::size_t>(k));
                double sum = 0;
                for (auto& v : p) {
                    v = u01(rng) + 1e-9;
                    sum += v;
                }
                for (auto& v : p) v /= sum;
                return p;
            };
            const auto sp = draw(kShapeClassCount);
            const auto wp = draw(kWeightClassCount);
            for (int i = 0; i < kShapeClassCount; ++i) shape_acc[static_cast<std::size_t>(i)] += sp[static_cast<std::size_t>(i)];
            for (int i = 0; i < kWeightClassCount; ++i) weight_acc[static_cast<std::size_t>(i)] += wp[static_cast<std::size_t>(i)];
            update_ma(state, sp, wp);
        }
        const auto ma_s = state.shape_ma();
        const auto ma_w = state.weight_ma();
        int brute_s = 0, brute_w = 0;
        for (int i = 0; i < kShapeClassCount; ++i) {
            worst = std::max(worst, std::abs(ma_s[static_cast<std::size_t>(i)] -
                                             shape_acc[static_cast<std::size_t>(i)] / steps));
            if (shape_acc[static_cast<std::size_t>(i)] > shape_acc[static_cast<std::size_t>(brute_s)]) brute_s = i;
        }
        for (int i = 0; i < kWeightClassCount; ++i) {
            worst = std::max(worst, std::abs(ma_w[static_cast<std::size_t>(i)] -
                                             weight_acc[static_cast<std::size_t>(i)] / steps));
            if (weight_acc[static_cast<std::size_t>(i)] > weight_acc[static_cast<std::size_t>(brute_w)]) brute_w = i;
        }
        const SequenceDecision d = decide(state);
        decisions_ok = decisions_ok && d.shape_class == brute_s && d.weight_class == brute_w;
    }
    r.seconds = now_s() - t0;
    r.pass = worst < 1e-12 && decisions_ok;
    std::ostringstream os;
    os << "max |ma - brute mean| = " << worst << " over " << cases << " sequences"
       << (decisions_ok ? "" : "; decision mismatch");
    r.detail = os.str();
    return r;
}

SuiteResult suite_energy_monotonic(std::uint64_t seed) {
    SuiteResult r;
    r.name = "energy-monotonic";
    const double t0 = now_s();
    double worst_gain = -1e300;
    bool pass = true;
    std::string where;
    for (int cls = 0; cls < kShapeClassCount && pass; ++cls) {
        for (double mass : {120.0, 400.0}) {
            const ClothTemplate tmpl = default_template(static_cast<ShapeClass>(cls), mass);
            const SimParams params;
            ClothMesh mesh = build_mesh(tmpl);
            const DropResult drop = simulate_drop(tmpl, derive_seed(seed, static_cast<std::uint64_t>(cls)), 60,
                                                  params);
            ClothSim probe(mesh, params);
            double prev = 0.0;
            bool have_prev = false;
            for (std::size_t i = params.substeps; i <= drop.states.size(); i += params.substeps) {
                const SimState& st = drop.states[i - 1];
                if (st.pinned >= 0) continue;  // post-release only
                probe.state() = st;
                const double e = probe.energy();
                if (have_prev) {
                    worst_gain = std::max(worst_gain, e - prev);
                    if (e - prev > 1e-9) {
                        pass = false;
                        where = std::string(to_string(static_cast<ShapeClass>(cls))) + " mass " +
                                std::to_string(mass);
                    }
                }
                prev = e;
                have_prev = true;
            }
        }
    }
    r.seconds = now_s() - t0;
    r.pass = pass;
    std::ostringstream os;
    os << "max per-frame energy gain " << worst_gain << " J";
    if (!pass) os << " (" << where << ")";
    r.detail = os.str();
    return r;
}

std::vector<SuiteResult> run_verification_suites(std::uint64_t seed) {
    return {suite_gradcheck(seed, 5), suite_pipeline_gradcheck(seed, 3), suite_shape_traces(),
            suite_ma_oracle(seed, 100), suite_energy_monotonic(seed)};
}

}  // namespace dp
