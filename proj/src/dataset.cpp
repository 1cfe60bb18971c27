#include "dp/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>

#include <json.hpp>

namespace dp {

using json = nlohmann::json;

const char* to_string(ShapeClass c) {
    switch (c) {
        case ShapeClass::pant: return "pant";
        case ShapeClass::shirt: return "shirt";
        case ShapeClass::sweater: return "sweater";
        case ShapeClass::towel: return "towel";
        case ShapeClass::tshirt: return "tshirt";
    }
    throw UsageError("bad shape class");
}

const char* to_string(WeightClass c) {
    switch (c) {
        case WeightClass::light: return "light";
        case WeightClass::medium: return "medium";
        case WeightClass::heavy: return "heavy";
    }
    throw UsageError("bad weight class");
}

ShapeClass shape_class_from_string(const std::string& s) {
    for (int i = 0; i < kShapeClassCount; ++i)
        if (s == to_string(static_cast<ShapeClass>(i))) return static_cast<ShapeClass>(i);
    throw DataError("unknown shape class '" + s + "'");
}

WeightClass weight_bin(double mass_grams) {
    if (!(mass_grams > 0.0)) throw DataError("weight_bin: mass must be positive, got " + std::to_string(mass_grams));
    if (mass_grams < 180.0) return WeightClass::light;
    if (mass_grams <= 300.0) return WeightClass::medium;
    return WeightClass::heavy;
}

const GarmentInfo& GarmentManifest::garment_by_id(const std::string& id) const {
    for (const auto& g : garments)
        if (g.id == id) return g;
    throw DataError("garment id '" + id + "' not in manifest");
}

GarmentManifest load_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw DataError("cannot open manifest: " + manifest_path.string());
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw DataError("manifest parse error in " + manifest_path.string() + ": " + e.what());
    }
    GarmentManifest m;
    m.root = manifest_path.parent_path();
    try {
        for (const auto& jg : doc.at("garments")) {
            GarmentInfo g;
            g.id = jg.at("id").get<std::string>();
            g.shape_class = shape_class_from_string(jg.at("shape_class").get<std::string>());
            g.mass_grams = jg.at("mass_grams").get<double>();
            if (!(g.mass_grams > 0.0))
                throw DataError("garment '" + g.id + "': mass_grams must be positive");
            for (const auto& js : jg.at("sequences")) {
                SequenceRef s;
                s.frame_count = js.at("frame_count").get<int>();
                s.fps = js.at("fps").get<double>();
                s.depth_dir = js.at("depth_dir").get<std::string>();
                s.rgb_dir = js.at("rgb_dir").get<std::string>();
                if (js.contains("mask_dir")) s.mask_dir = js.at("mask_dir").get<std::string>();
                g.sequences.push_back(std::move(s));
            }
            m.garments.push_back(std::move(g));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest schema error in " + manifest_path.string() + ": " + e.what());
    }
    if (m.garments.empty()) throw DataError("manifest has no garments: " + manifest_path.string());
    return m;
}

void save_manifest(const std::filesystem::path& manifest_path, const GarmentManifest& manifest) {
    json doc;
    doc["garments"] = json::array();
    for (const auto& g : manifest.garments) {
        json jg;
        jg["id"] = g.id;
        jg["shape_class"] = to_string(g.shape_class);
        jg["mass_grams"] = g.mass_grams;
        jg["sequences"] = json::array();
        for (const auto& s : g.sequences) {
            json js;
            js["frame_count"] = s.frame_count;
            js["fps"] = s.fps;
            js["depth_dir"] = s.depth_dir;
            js["rgb_dir"] = s.rgb_dir;
            if (!s.mask_dir.empty()) js["mask_dir"] = s.mask_dir;
            jg["sequences"].push_back(std::move(js));
        }
        doc["garments"].push_back(std::move(jg));
    }
    std::ofstream os(manifest_path);
    if (!os) throw DataError("cannot write manifest: " + manifest_path.string());
    os << doc.dump(2) << '\n';
}

namespace {
// Background green band; the capture backdrop (and arm cover) is green, the
// garments are not.
constexpr double kGreenHueLo = 90.0;
constexpr double kGreenHueHi = 150.0;
constexpr double kMinBackgroundSaturation = 0.15;
}  // namespace

bool is_background_pixel(std::uint8_t r, std::uint8_t g, std::uint8_t b, double v_threshold) {
    const Hsv hsv = rgb_to_hsv(r, g, b);
    return hsv.h >= kGreenHueLo && hsv.h <= kGreenHueHi && hsv.s >= kMinBackgroundSaturation &&
           hsv.v >= v_threshold;
}

std::vector<std::uint8_t> segment_garment(const ImageU8& rgb, double v_threshold) {
    if (rgb.channels != 3) throw UsageError("segment_garment expects an RGB image");
    if (v_threshold < 0.0 || v_threshold > 1.0) throw UsageError("segment_garment: v_threshold must be in [0,1]");
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(rgb.width) * rgb.height);
    std::size_t on = 0;
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            const bool bg = is_background_pixel(rgb.at(x, y, 0), rgb.at(x, y, 1), rgb.at(x, y, 2), v_threshold);
            mask[static_cast<std::size_t>(y) * rgb.width + x] = bg ? 0 : 1;
            on += bg ? 0u : 1u;
        }
    if (on == 0) throw DataError("segmentation produced an empty mask (all background)");
    return mask;
}

double otsu_v_threshold(const ImageU8& rgb) {
    if (rgb.channels != 3) throw UsageError("otsu_v_threshold expects an RGB image");
    std::array<std::int64_t, 256> hist{};
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            const int v = std::max({rgb.at(x, y, 0), rgb.at(x, y, 1), rgb.at(x, y, 2)});
            ++hist[static_cast<std::size_t>(v)];
        }
    const double total = static_cast<double>(rgb.width) * rgb.height;
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * static_cast<double>(hist[static_cast<std::size_t>(i)]);
    double w0 = 0.0, sum0 = 0.0, best_sigma = -1.0;
    int best_t = 127;
    for (int t = 0; t < 255; ++t) {
        w0 += static_cast<double>(hist[static_cast<std::size_t>(t)]);
        if (w0 <= 0.0) continue;
        const double w1 = total - w0;
        if (w1 <= 0.0) break;
        sum0 += t * static_cast<double>(hist[static_cast<std::size_t>(t)]);
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double sigma = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (sigma > best_sigma) {
            best_sigma = sigma;
            best_t = t;
        }
    }
    return (best_t + 1) / 255.0;
}

namespace {

Tensor preprocess_planes(const std::vector<std::vector<double>>& planes, int w, int h,
                         const std::vector<std::uint8_t>& mask, const ModelPreset& preset) {
    if (mask.size() != static_cast<std::size_t>(w) * h)
        throw DimensionError("preprocess: mask size does not match frame");
    const std::int64_t th = preset.input_h, tw = preset.input_w;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(planes.size()) * th * tw);
    for (const auto& plane : planes) {
        std::vector<double> masked(plane.size());
        for (std::size_t i = 0; i < plane.size(); ++i) masked[i] = mask[i] ? plane[i] : 0.0;
        std::vector<double> resized = resize_bilinear(masked, w, h, static_cast<int>(tw), static_cast<int>(th));
        out.insert(out.end(), resized.begin(), resized.end());
    }
    return Tensor::from_data({static_cast<std::int64_t>(planes.size()), th, tw}, std::move(out));
}

}  // namespace

Tensor preprocess_depth(const ImageU16& depth, const std::vector<std::uint8_t>& mask,
                        const ModelPreset& preset, const PreprocessOptions& opts) {
    if (preset.input_channels != 1) throw UsageError("preprocess_depth: preset expects RGB input");
    const double max_mm = opts.max_range_m * 1000.0;
    std::vector<double> plane(depth.pixels.size());
    for (std::size_t i = 0; i < plane.size(); ++i)
        plane[i] = std::clamp(static_cast<double>(depth.pixels[i]) / max_mm, 0.0, 1.0);
    return preprocess_planes({std::move(plane)}, depth.width, depth.height, mask, preset);
}

Tensor preprocess_rgb(const ImageU8& rgb, const std::vector<std::uint8_t>& mask, const ModelPreset& preset) {
    if (preset.input_channels != 3) throw UsageError("preprocess_rgb: preset expects depth input");
    if (rgb.channels != 3) throw UsageError("preprocess_rgb expects an RGB image");
    std::vector<std::vector<double>> planes(3);
    const std::size_t n = static_cast<std::size_t>(rgb.width) * rgb.height;
    for (int c = 0; c < 3; ++c) {
        planes[static_cast<std::size_t>(c)].resize(n);
        for (std::size_t i = 0; i < n; ++i)
            planes[static_cast<std::size_t>(c)][i] = rgb.pixels[i * 3 + static_cast<std::size_t>(c)] / 255.0;
    }
    return preprocess_planes(planes, rgb.width, rgb.height, mask, preset);
}

SequenceWindow::SequenceWindow(std::shared_ptr<const LoadedSequence> seq, std::int64_t t, bool with_target)
    : seq_(std::move(seq)), t_(t), with_target_(with_target) {
    const std::int64_t need = with_target_ ? t_ + 4 : t_ + 3;
    if (t_ < 0 || need > static_cast<std::int64_t>(seq_->frames.size()))
        throw DataError("window start " + std::to_string(t_) + " out of range for sequence of " +
                        std::to_string(seq_->frames.size()) + " frames");
}

const Tensor& SequenceWindow::frame(int k) const {
    if (k < 0 || k >= 3) throw IndexError("window frame index must be 0..2");
    return seq_->frames[static_cast<std::size_t>(t_ + k)];
}

std::optional<std::int64_t> SequenceWindow::target_index() const {
    if (!with_target_) return std::nullopt;
    return t_ + 3;
}

const Tensor& SequenceWindow::target_frame() const {
    if (!with_target_) throw UsageError("window has no target frame");
    return seq_->frames[static_cast<std::size_t>(t_ + 3)];
}

std::vector<SequenceWindow> make_windows(std::shared_ptr<const LoadedSequence> seq, bool with_target) {
    const std::int64_t frames = static_cast<std::int64_t>(seq->frames.size());
    const std::int64_t need = with_target ? 4 : 3;
    if (frames < need)
        throw DataError("sequence of " + std::to_string(frames) + " frames is too short for windows (need >= " +
                        std::to_string(need) + ")");
    std::vector<SequenceWindow> out;
    out.reserve(static_cast<std::size_t>(frames - need + 1));
    for (std::int64_t t = 0; t + need <= frames; ++t) out.emplace_back(seq, t, with_target);
    return out;
}

std::vector<FoldSplit> leave_one_out_folds(const GarmentManifest& manifest) {
    std::map<ShapeClass, std::vector<std::string>> by_class;
    for (const auto& g : manifest.garments) by_class[g.shape_class].push_back(g.id);
    if (by_class.size() != static_cast<std::size_t>(kShapeClassCount))
        throw DataError("leave_one_out_folds: manifest covers " + std::to_string(by_class.size()) +
                        " shape classes, need all " + std::to_string(kShapeClassCount));
    const std::size_t per_class = by_class.begin()->second.size();
    for (const auto& [cls, ids] : by_class)
        if (ids.size() != per_class)
            throw DataError("leave_one_out_folds: class '" + std::string(to_string(cls)) + "' has " +
                            std::to_string(ids.size()) + " garments, expected " + std::to_string(per_class));

    std::vector<FoldSplit> folds;
    for (std::size_t k = 0; k < per_class; ++k) {
        FoldSplit fold;
        fold.fold_index = static_cast<int>(k);
        for (const auto& g : manifest.garments) {
            const auto& ids = by_class.at(g.shape_class);
            const bool held_out = ids[k] == g.id;
            (held_out ? fold.test_garment_ids : fold.train_garment_ids).push_back(g.id);
        }
        folds.push_back(std::move(fold));
    }
    return folds;
}

namespace {

std::string frame_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%05d.png", index);
    return buf;
}

}  // namespace

LoadedSequence load_sequence(const GarmentManifest& manifest, const GarmentInfo& garment, int seq_index,
                             const ModelPreset& preset, const PreprocessOptions& opts) {
    if (seq_index < 0 || seq_index >= static_cast<int>(garment.sequences.size()))
        throw DataError("garment '" + garment.id + "' has no sequence " + std::to_string(seq_index));
    const SequenceRef& ref = garment.sequences[static_cast<std::size_t>(seq_index)];

    LoadedSequence seq;
    seq.garment_id = garment.id;
    seq.sequence_index = seq_index;
    seq.shape_class = garment.shape_class;
    seq.weight_class = weight_bin(garment.mass_grams);
    seq.fps = ref.fps;
    seq.frames.reserve(static_cast<std::size_t>(ref.frame_count));

    for (int f = 0; f < ref.frame_count; ++f) {
        const std::string name = frame_name(f);
        std::vector<std::uint8_t> mask;
        if (!ref.mask_dir.empty()) {
            const ImageU8 m = read_png8(manifest.root / ref.mask_dir / name);
            if (m.channels != 1) throw DataError("mask must be single channel: " + (manifest.root / ref.mask_dir / name).string());
            mask.resize(m.pixels.size());
            std::size_t on = 0;
            for (std::size_t i = 0; i < mask.size(); ++i) {
                mask[i] = m.pixels[i] > 127 ? 1 : 0;
                on += mask[i];
            }
            if (on == 0) continue;  // empty mask: frame skipped
        } else {
            const ImageU8 rgb = read_png8(manifest.root / ref.rgb_dir / name);
            const double thr = opts.v_threshold >= 0.0 ? opts.v_threshold : otsu_v_threshold(rgb);
            try {
                mask = segment_garment(rgb, thr);
            } catch (const DataError&) {
                continue;  // empty mask: frame skipped
            }
        }

        if (preset.input_channels == 1) {
            const auto path = manifest.root / ref.depth_dir / name;
            if (!std::filesystem::exists(path)) throw DataError("missing depth frame: " + path.string());
            const ImageU16 depth = read_png16(path);
            if (mask.size() != static_cast<std::size_t>(depth.width) * depth.height)
                throw DataError("mask/depth resolution mismatch at " + path.string());
            seq.frames.push_back(preprocess_depth(depth, mask, preset, opts));
        } else {
            const auto path = manifest.root / ref.rgb_dir / name;
            if (!std::filesystem::exists(path)) throw DataError("missing rgb frame: " + path.string());
            const ImageU8 rgb = read_png8(path);
            seq.frames.push_back(preprocess_rgb(rgb, mask, preset));
        }
    }
    if (seq.frames.empty())
        throw DataError("sequence " + garment.id + "/" + std::to_string(seq_index) + " has no usable frames");
    return seq;
}

std::vector<std::shared_ptr<LoadedSequence>> load_garment_sequences(
    const GarmentManifest& manifest, const std::vector<std::string>& garment_ids, const ModelPreset& preset,
    const PreprocessOptions& opts) {
    struct Job {
        const GarmentInfo* garment;
        int seq_index;
    };
    std::vector<Job> jobs;
    for (const auto& id : garment_ids) {
        const GarmentInfo& g = manifest.garment_by_id(id);
        for (int s = 0; s < static_cast<int>(g.sequences.size()); ++s) jobs.push_back({&g, s});
    }
    std::vector<std::shared_ptr<LoadedSequence>> out(jobs.size());
    std::exception_ptr failure;
    std::mutex failure_mu;
    parallel_for(static_cast<std::int64_t>(jobs.size()), 1, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            try {
                out[static_cast<std::size_t>(i)] = std::make_shared<LoadedSequence>(
                    load_sequence(manifest, *jobs[static_cast<std::size_t>(i)].garment,
                                  jobs[static_cast<std::size_t>(i)].seq_index, preset, opts));
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        }
    });
    if (failure) std::rethrow_exception(failure);
    return out;
}

}  // namespace dp
