#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dp/cloth.hpp"
#include "dp/dataset.hpp"
#include "dp/eval.hpp"
#include "dp/model.hpp"
#include "dp/train.hpp"
#include "dp/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInvariant = 3;

void write_run_meta(const fs::path& out_dir, const std::string& command, std::uint64_t seed,
                    const json& config) {
    json meta;
    meta["command"] = command;
    meta["seed"] = seed;
    meta["config"] = config;
    meta["version"] = dp::version_string();
    std::ofstream os(out_dir / "run_meta.json");
    if (!os) throw dp::DataError("cannot write run metadata in " + out_dir.string());
    os << meta.dump(2) << '\n';
}

std::pair<std::string, std::string> split_kv(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw dp::UsageError("--set expects key=value, got '" + kv + "'");
    return {kv.substr(0, eq), kv.substr(eq + 1)};
}

void apply_spec_override(dp::DatasetSpec& spec, const std::string& key, const std::string& value) {
    auto as_int = [&] {
        try {
            return std::stoi(value);
        } catch (const std::exception&) {
            throw dp::UsageError("--set " + key + ": expected integer, got '" + value + "'");
        }
    };
    if (key == "garments_per_class") spec.garments_per_class = as_int();
    else if (key == "sequences_per_garment") spec.sequences_per_garment = as_int();
    else if (key == "frames_per_sequence") spec.frames_per_sequence = as_int();
    else if (key == "image_size") spec.image_size = as_int();
    else if (key == "substeps") spec.sim.substeps = as_int();
    else if (key == "heavy_stiffness_boost") spec.heavy_stiffness_boost = value == "1" || value == "true";
    else if (key == "emit_rgb") spec.emit_rgb = value == "1" || value == "true";
    else if (key == "emit_masks") spec.emit_masks = value == "1" || value == "true";
    else throw dp::UsageError("unknown dataset spec key '" + key + "'");
}

dp::ModelPreset resolve_preset(const std::string& preset_name, const std::string& preset_file,
                               const std::vector<std::string>& overrides) {
    dp::ModelPreset preset =
        preset_file.empty() ? dp::ModelPreset::by_name(preset_name) : dp::load_preset_file(preset_file);
    for (const auto& kv : overrides) {
        const auto [k, v] = split_kv(kv);
        preset.apply_override(k, v);
    }
    return preset;
}

std::vector<std::string> fold_ids(const dp::GarmentManifest& manifest, int fold, bool test_side) {
    if (fold < 0) {
        if (test_side) throw dp::UsageError("eval needs --fold >= 0 to select held-out garments");
        std::vector<std::string> ids;
        for (const auto& g : manifest.garments) ids.push_back(g.id);
        return ids;
    }
    const auto folds = dp::leave_one_out_folds(manifest);
    if (fold >= static_cast<int>(folds.size()))
        throw dp::UsageError("fold " + std::to_string(fold) + " out of range; dataset has " +
                             std::to_string(folds.size()) + " folds");
    return test_side ? folds[static_cast<std::size_t>(fold)].test_garment_ids
                     : folds[static_cast<std::size_t>(fold)].train_garment_ids;
}

int cmd_generate(const std::string& spec_name, const fs::path& out, std::uint64_t seed,
                 const std::vector<std::string>& overrides) {
    dp::DatasetSpec spec = spec_name == "paper" ? dp::DatasetSpec::paper_scale() : dp::DatasetSpec::toy();
    json cfg;
    cfg["spec"] = spec_name;
    for (const auto& kv : overrides) {
        const auto [k, v] = split_kv(kv);
        apply_spec_override(spec, k, v);
        cfg["overrides"][k] = v;
    }
    const dp::GarmentManifest manifest = dp::generate_dataset(spec, out, seed);
    write_run_meta(out, "generate", seed, cfg);
    std::cout << (out / "manifest.json").string() << '\n';
    std::cout << "garments: " << manifest.garments.size() << ", depth frames: " << spec.total_depth_frames()
              << '\n';
    return kExitOk;
}

int cmd_train(int stage, const fs::path& dataset, int fold, const std::string& preset_name,
              const std::string& preset_file, std::uint64_t seed, const fs::path& out,
              const fs::path& stage1_checkpoint, dp::TrainConfig config,
              const std::vector<std::string>& preset_overrides, double max_range_m, double v_threshold) {
    if (stage != 1 && stage != 2) throw dp::UsageError("--stage must be 1 or 2");
    config.stage = stage == 1 ? dp::Stage::stage1 : dp::Stage::stage2;
    config.seed = seed;
    config.checkpoint_dir = out;

    const dp::ModelPreset preset = resolve_preset(preset_name, preset_file, preset_overrides);
    dp::GarmentNet model(preset, seed);

    if (config.stage == dp::Stage::stage2) {
        if (stage1_checkpoint.empty())
            throw dp::UsageError("stage 2 requires --stage1-checkpoint from a completed stage 1 run");
        model.load(stage1_checkpoint);
    } else if (!stage1_checkpoint.empty()) {
        model.load(stage1_checkpoint);
    }

    const dp::GarmentManifest manifest = dp::load_manifest(dataset);
    dp::PreprocessOptions opts;
    opts.max_range_m = max_range_m;
    opts.v_threshold = v_threshold;
    const auto ids = fold_ids(manifest, fold, false);
    const auto all = dp::load_garment_sequences(manifest, ids, preset, opts);
    dp::SequenceSet train, val;
    dp::split_validation(all, train, val);

    fs::create_directories(out);
    const dp::TrainReport report = config.stage == dp::Stage::stage1
                                       ? dp::train_stage1(model, train, val, config)
                                       : dp::train_stage2(model, train, val, config);
    report.write_jsonl(out / "report.jsonl");

    json cfg;
    cfg["stage"] = stage;
    cfg["dataset"] = dataset.string();
    cfg["fold"] = fold;
    cfg["preset"] = preset.name;
    cfg["input_channels"] = preset.input_channels;
    cfg["epochs"] = config.epochs;
    cfg["batch_size"] = config.batch_size;
    cfg["lr"] = config.effective_lr();
    cfg["ce_weight"] = config.ce_weight;
    cfg["cache_latents"] = config.cache_latents;
    write_run_meta(out, "train", seed, cfg);

    const auto& last = report.last();
    std::printf("stage %d done: %zu epochs, train shape acc %.3f", stage, report.epochs.size(),
                last.train_shape_acc);
    if (last.val_shape_acc >= 0) std::printf(", val shape acc %.3f", last.val_shape_acc);
    if (stage == 2) std::printf(", mse_mean %.6g", last.mse_mean);
    std::printf("\ncheckpoints: %s\n", (out / "checkpoint_final.dptc").string().c_str());
    return kExitOk;
}

int cmd_eval(const std::string& mode, const fs::path& checkpoint, const fs::path& dataset, int fold,
             const std::string& preset_name, const std::string& preset_file, const fs::path& out,
             const std::vector<std::string>& preset_overrides, double max_range_m, double v_threshold) {
    if (mode != "continuous" && mode != "single_shot")
        throw dp::UsageError("--mode must be continuous or single_shot");
    if (!fs::exists(checkpoint)) throw dp::UsageError("checkpoint does not exist: " + checkpoint.string());

    const dp::ModelPreset preset = resolve_preset(preset_name, preset_file, preset_overrides);
    dp::GarmentNet model(preset, 0);
    const int stage = model.load(checkpoint);
    if (mode == "continuous" && stage < 2)
        throw dp::UsageError("continuous eval needs a stage-2 checkpoint (got stage " + std::to_string(stage) +
                             ")");

    const dp::GarmentManifest manifest = dp::load_manifest(dataset);
    dp::PreprocessOptions opts;
    opts.max_range_m = max_range_m;
    opts.v_threshold = v_threshold;
    const auto ids = fold_ids(manifest, fold, true);
    const auto sequences = dp::load_garment_sequences(manifest, ids, preset, opts);

    const dp::EvalResult result = mode == "continuous" ? dp::evaluate_continuous(model, sequences)
                                                       : dp::single_shot_eval(model, sequences);
    fs::create_directories(out);
    result.write_json(out / "result.json");
    if (mode == "continuous") result.write_ma_traces(out / "ma_traces");

    json cfg;
    cfg["mode"] = mode;
    cfg["checkpoint"] = checkpoint.string();
    cfg["dataset"] = dataset.string();
    cfg["fold"] = fold;
    cfg["preset"] = preset.name;
    write_run_meta(out, "eval", 0, cfg);

    std::printf("%s eval over %lld decisions\n", mode.c_str(),
                static_cast<long long>(result.decision_count));
    std::printf("shape avg acc %.3f | per class:", result.shape_avg_acc);
    for (int c = 0; c < dp::kShapeClassCount; ++c)
        std::printf(" %s %.2f", dp::to_string(static_cast<dp::ShapeClass>(c)),
                    result.shape_class_acc[static_cast<std::size_t>(c)]);
    std::printf("\nweight avg acc %.3f | per class:", result.weight_avg_acc);
    for (int c = 0; c < dp::kWeightClassCount; ++c)
        std::printf(" %s %.2f", dp::to_string(static_cast<dp::WeightClass>(c)),
                    result.weight_class_acc[static_cast<std::size_t>(c)]);
    std::printf("\nresults: %s\n", (out / "result.json").string().c_str());
    return kExitOk;
}

int cmd_verify(std::uint64_t seed) {
    const auto suites = dp::run_verification_suites(seed);
    bool all_pass = true;
    for (const auto& s : suites) {
        std::printf("%-22s %s  %7.2fs  %s\n", s.name.c_str(), s.pass ? "PASS" : "FAIL", s.seconds,
                    s.detail.c_str());
        all_pass = all_pass && s.pass;
    }
    return all_pass ? kExitOk : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continuous garment shape/weight perception from depth video"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Generate a synthetic cloth-drop dataset");
    std::string gen_spec = "toy";
    fs::path gen_out;
    std::uint64_t gen_seed = 0;
    std::vector<std::string> gen_overrides;
    gen->add_option("--spec", gen_spec, "Dataset spec: toy or paper")->check(CLI::IsMember({"toy", "paper"}));
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", gen_seed, "Generator seed")->required();
    gen->add_option("--set", gen_overrides, "Spec override key=value (repeatable)");

    // train
    auto* train = app.add_subcommand("train", "Train stage 1 (extractor+heads) or stage 2 (LSTM)");
    int train_stage = 1;
    fs::path train_dataset, train_out, stage1_ckpt;
    int train_fold = -1;
    std::string train_preset = "toy", train_preset_file;
    std::uint64_t train_seed = 0;
    dp::TrainConfig tconf;
    std::vector<std::string> train_overrides;
    double train_max_range = 2.0, train_v_threshold = -1.0;
    train->add_option("--stage", train_stage, "1 or 2")->required();
    train->add_option("--dataset", train_dataset, "Path to manifest.json")->required();
    train->add_option("--fold", train_fold, "Leave-one-out fold index; -1 trains on all garments");
    train->add_option("--preset", train_preset, "Model preset: toy or paper");
    train->add_option("--preset-file", train_preset_file, "Key/value preset file");
    train->add_option("--seed", train_seed, "Training seed")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--stage1-checkpoint", stage1_ckpt, "Stage-1 checkpoint (required for --stage 2)");
    train->add_option("--epochs", tconf.epochs, "Epochs (default 35)");
    train->add_option("--batch-size", tconf.batch_size, "Batch size (default 16)");
    train->add_option("--lr", tconf.lr, "Learning rate (default 1e-3 stage 1, 1e-4 stage 2)");
    train->add_option("--ce-weight", tconf.ce_weight, "Stage-2 cross-entropy weight (default 1000)");
    train->add_flag("--cache-latents", tconf.cache_latents, "Stage 2: precompute frozen-extractor latents");
    train->add_option("--stop-train-acc", tconf.stop_at_train_shape_acc,
                      "Stop when train shape accuracy reaches this");
    train->add_option("--stop-val-acc", tconf.stop_at_val_shape_acc,
                      "Stop when validation shape accuracy reaches this");
    train->add_option("--max-range-m", train_max_range, "Depth normalisation range (default 2.0 m)");
    train->add_option("--v-threshold", train_v_threshold, "HSV V threshold; <0 calibrates by Otsu");
    train->add_option("--set", train_overrides, "Preset override key=value (repeatable)");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on held-out garments");
    std::string eval_mode = "continuous";
    fs::path eval_ckpt, eval_dataset, eval_out;
    int eval_fold = 0;
    std::string eval_preset = "toy", eval_preset_file;
    std::vector<std::string> eval_overrides;
    double eval_max_range = 2.0, eval_v_threshold = -1.0;
    ev->add_option("--mode", eval_mode, "continuous or single_shot")
        ->check(CLI::IsMember({"continuous", "single_shot"}));
    ev->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
    ev->add_option("--dataset", eval_dataset, "Path to manifest.json")->required();
    ev->add_option("--fold", eval_fold, "Fold whose held-out garments form the test set")->required();
    ev->add_option("--preset", eval_preset, "Model preset: toy or paper");
    ev->add_option("--preset-file", eval_preset_file, "Key/value preset file");
    ev->add_option("--out", eval_out, "Output directory")->required();
    ev->add_option("--max-range-m", eval_max_range, "Depth normalisation range (default 2.0 m)");
    ev->add_option("--v-threshold", eval_v_threshold, "HSV V threshold; <0 calibrates by Otsu");
    ev->add_option("--set", eval_overrides, "Preset override key=value (repeatable)");

    // verify
    auto* ver = app.add_subcommand("verify", "Run the invariant property suites");
    std::uint64_t verify_seed = 7;
    ver->add_option("--seed", verify_seed, "Suite seed (default 7)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_spec, gen_out, gen_seed, gen_overrides);
        if (train->parsed())
            return cmd_train(train_stage, train_dataset, train_fold, train_preset, train_preset_file,
                             train_seed, train_out, stage1_ckpt, tconf, train_overrides, train_max_range,
                             train_v_threshold);
        if (ev->parsed())
            return cmd_eval(eval_mode, eval_ckpt, eval_dataset, eval_fold, eval_preset, eval_preset_file,
                            eval_out, eval_overrides, eval_max_range, eval_v_threshold);
        if (ver->parsed()) return cmd_verify(verify_seed);
        throw dp::UsageError("no subcommand given");
    } catch (const dp::InvariantError& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return kExitInvariant;
    } catch (const dp::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const dp::UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
}
