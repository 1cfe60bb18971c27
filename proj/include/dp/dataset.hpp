#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dp/image.hpp"
#include "dp/model.hpp"
#include "dp/tensor.hpp"

namespace dp {

enum class ShapeClass : int { pant = 0, shirt = 1, sweater = 2, towel = 3, tshirt = 4 };
enum class WeightClass : int { light = 0, medium = 1, heavy = 2 };

constexpr int kShapeClassCount = 5;
constexpr int kWeightClassCount = 3;

const char* to_string(ShapeClass c);
const char* to_string(WeightClass c);
ShapeClass shape_class_from_string(const std::string& s);

/// Mass discretisation: < 180 g light, [180, 300] g medium, > 300 g heavy.
WeightClass weight_bin(double mass_grams);

struct SequenceRef {
    int frame_count = 0;
    double fps = 30.0;
    std::string depth_dir;
    std::string rgb_dir;
    std::string mask_dir;  // optional; empty means segment from RGB
};

struct GarmentInfo {
    std::string id;
    ShapeClass shape_class = ShapeClass::pant;
    double mass_grams = 0.0;
    std::vector<SequenceRef> sequences;
};

struct GarmentManifest {
    std::filesystem::path root;  // directory holding the manifest
    std::vector<GarmentInfo> garments;

    const GarmentInfo& garment_by_id(const std::string& id) const;
};

GarmentManifest load_manifest(const std::filesystem::path& manifest_path);
void save_manifest(const std::filesystem::path& manifest_path, const GarmentManifest& manifest);

/// HSV segmentation: a pixel is background when its hue sits in the green
/// band and its V component clears v_threshold; everything else is garment.
/// Returns a 0/1 mask. Throws DataError if the mask comes out empty.
std::vector<std::uint8_t> segment_garment(const ImageU8& rgb, double v_threshold);
bool is_background_pixel(std::uint8_t r, std::uint8_t g, std::uint8_t b, double v_threshold);

/// Otsu threshold over the V histogram of an RGB frame, in [0,1].
double otsu_v_threshold(const ImageU8& rgb);

struct PreprocessOptions {
    double max_range_m = 2.0;   // depth normalisation constant (dataset-wide)
    double v_threshold = -1.0;  // < 0: calibrate per frame by Otsu
};

/// Masks the raw frame (background -> 0), resizes to the preset input size,
/// scales into [0,1]. Depth values are millimeters.
Tensor preprocess_depth(const ImageU16& depth, const std::vector<std::uint8_t>& mask,
                        const ModelPreset& preset, const PreprocessOptions& opts);
Tensor preprocess_rgb(const ImageU8& rgb, const std::vector<std::uint8_t>& mask, const ModelPreset& preset);

/// A fully preprocessed video sequence held in memory.
struct LoadedSequence {
    std::string garment_id;
    int sequence_index = 0;
    ShapeClass shape_class = ShapeClass::pant;
    WeightClass weight_class = WeightClass::light;
    double fps = 30.0;
    std::vector<Tensor> frames;  // each [C,H,W] in [0,1]
};

/// Three consecutive preprocessed frames (t, t+1, t+2) plus the optional
/// prediction target at t+3.
class SequenceWindow {
  public:
    SequenceWindow(std::shared_ptr<const LoadedSequence> seq, std::int64_t t, bool with_target);

    const Tensor& frame(int k) const;  // k in [0,3)
    std::optional<std::int64_t> target_index() const;
    const Tensor& target_frame() const;
    ShapeClass shape_class() const { return seq_->shape_class; }
    WeightClass weight_class() const { return seq_->weight_class; }
    std::int64_t start() const { return t_; }
    const LoadedSequence& sequence() const { return *seq_; }

  private:
    std::shared_ptr<const LoadedSequence> seq_;
    std::int64_t t_ = 0;
    bool with_target_ = false;
};

/// Stride-1 windows over one sequence. With a target frame the count is
/// frame_count - 3, without it frame_count - 2.
std::vector<SequenceWindow> make_windows(std::shared_ptr<const LoadedSequence> seq, bool with_target);

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_garment_ids;
    std::vector<std::string> test_garment_ids;
};

/// Fold k holds out the k-th garment of every shape class. Requires the same
/// garment count per class.
std::vector<FoldSplit> leave_one_out_folds(const GarmentManifest& manifest);

/// Loads and preprocesses one sequence; picks depth or RGB input from the
/// preset channel count, uses mask files when the manifest provides them and
/// HSV segmentation otherwise. Frames whose mask is empty are skipped.
LoadedSequence load_sequence(const GarmentManifest& manifest, const GarmentInfo& garment, int seq_index,
                             const ModelPreset& preset, const PreprocessOptions& opts);

/// Loads every sequence of the named garments (parallel over sequences).
std::vector<std::shared_ptr<LoadedSequence>> load_garment_sequences(
    const GarmentManifest& manifest, const std::vector<std::string>& garment_ids, const ModelPreset& preset,
    const PreprocessOptions& opts);

}  // namespace dp
