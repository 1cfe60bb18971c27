#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dp/checkpoint.hpp"
#include "dp/nn.hpp"
#include "dp/tensor.hpp"

namespace dp {

/// One frame's feature latent space C_t, shape [channels, h, w].
struct LatentMap {
    Tensor values;
    std::int64_t frame_index = -1;
};

enum class Head { shape, weight };

struct ConvLayerSpec {
    std::int64_t out_channels = 0;
    std::int64_t kernel = 0;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    bool pool_after = false;  // max pool
    std::int64_t pool_kernel = 0;
    std::int64_t pool_stride = 0;
};

/// Architecture preset. Construction-time validation traces the conv stack
/// shape chain and requires it to terminate exactly at the declared latent.
struct ModelPreset {
    std::string name;
    std::int64_t input_h = 0, input_w = 0;
    std::int64_t input_channels = 1;  // 1 = depth, 3 = rgb
    std::vector<ConvLayerSpec> conv_stack;
    std::int64_t latent_channels = 0, latent_h = 0, latent_w = 0;
    std::int64_t pooled_hw = 6;       // adaptive-average target before the heads
    std::int64_t classifier_mid = 0;  // second linear block width
    std::int64_t lstm_hidden = 0;
    std::int64_t shape_classes = 5;
    std::int64_t weight_classes = 3;

    static ModelPreset paper();
    static ModelPreset toy();
    static ModelPreset by_name(const std::string& name);

    std::int64_t flatten_len() const { return latent_channels * pooled_hw * pooled_hw; }
    std::int64_t latent_len() const { return latent_channels * latent_h * latent_w; }

    /// Spatial sizes after each conv (and its pool, when present), starting
    /// from the input size.
    std::vector<std::array<std::int64_t, 2>> trace_spatial() const;
    /// Throws InvariantError if the traced chain does not land on the
    /// declared latent shape or any classifier width is inconsistent.
    void validate() const;

    void apply_override(const std::string& key, const std::string& value);
};

/// Key/value preset file: `preset = toy` plus optional per-key overrides,
/// '#' comments. See README for the key list.
ModelPreset load_preset_file(const std::filesystem::path& path);

/// The full network: feature extractor F, linear-only shape/weight heads,
/// and the dynamics LSTM predicting the t+3 latent.
class GarmentNet {
  public:
    GarmentNet(ModelPreset preset, std::uint64_t seed);

    const ModelPreset& preset() const { return preset_; }

    // Batched paths used by training/eval.
    Tensor features(const Tensor& x) const;                   // [B,C,H,W] -> [B,Cl,h,w]
    Tensor classify_batch(const Tensor& latents, Head) const;  // [B,Cl,h,w] -> [B,K]
    Tensor predict_next_flat(const Tensor& l0, const Tensor& l1, const Tensor& l2) const;  // [B,N] each

    // Single-frame surface.
    LatentMap extract_features(const Tensor& frame, std::int64_t frame_index = -1) const;
    Tensor classify(const LatentMap& latent, Head head) const;  // -> [K] logits
    LatentMap predict_next_latent(const LatentMap& c_t, const LatentMap& c_t1, const LatentMap& c_t2) const;

    // Parameter groups.
    std::vector<Tensor> extractor_params() const;
    std::vector<Tensor> head_params() const;
    std::vector<Tensor> lstm_params() const;
    NamedParams named_params() const;

    /// Number of linear blocks in each classifier head; the heads contain
    /// nothing else (no activation, no dropout) by construction.
    int classifier_block_count() const { return 3; }
    std::vector<std::int64_t> classifier_widths(Head head) const;

    void set_stage2_trainable();  // freezes extractor + heads, LSTM trainable
    void set_all_trainable();
    std::uint64_t frozen_checksum() const;  // over extractor + head values

    void save(const std::filesystem::path& path, int stage) const;
    /// Loads a checkpoint saved by `save`; verifies preset compatibility.
    /// Returns the recorded training stage.
    int load(const std::filesystem::path& path);
    static int peek_stage(const std::filesystem::path& path);

  private:
    struct DenseLayer {
        Tensor w, b;
    };
    struct ConvLayer {
        ConvLayerSpec spec;
        Tensor w, b;
    };

    Tensor run_classifier(const std::vector<DenseLayer>& layers, const Tensor& latents) const;

    ModelPreset preset_;
    std::vector<ConvLayer> conv_;
    std::vector<DenseLayer> shape_head_;
    std::vector<DenseLayer> weight_head_;
    LstmCellParams lstm_;
    DenseLayer proj_;
};

}  // namespace dp
