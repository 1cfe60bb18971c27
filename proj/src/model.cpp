#include "dp/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dp {

ModelPreset ModelPreset::paper() {
    ModelPreset p;
    p.name = "paper";
    p.input_h = 256;
    p.input_w = 256;
    p.input_channels = 1;
    // Canonical AlexNet feature layers truncated before the final max pool,
    // which lands 256x256 input on the 15x15x256 latent: 256 -> 63 -> 31 -> 15.
    p.conv_stack = {
        {64, 11, 4, 2, true, 3, 2},
        {192, 5, 1, 2, true, 3, 2},
        {384, 3, 1, 1, false, 0, 0},
        {256, 3, 1, 1, false, 0, 0},
        {256, 3, 1, 1, false, 0, 0},
    };
    p.latent_channels = 256;
    p.latent_h = 15;
    p.latent_w = 15;
    p.pooled_hw = 6;
    p.classifier_mid = 512;
    p.lstm_hidden = 1024;
    p.validate();
    return p;
}

ModelPreset ModelPreset::toy() {
    ModelPreset p;
    p.name = "toy";
    p.input_h = 64;
    p.input_w = 64;
    p.input_channels = 1;
    // 64 -> 32 -> 16 -> 16 -> 8 -> 6, latent [32,6,6], flatten 1152.
    p.conv_stack = {
        {16, 7, 2, 3, true, 2, 2},
        {24, 3, 1, 1, true, 2, 2},
        {32, 3, 1, 0, false, 0, 0},
    };
    p.latent_channels = 32;
    p.latent_h = 6;
    p.latent_w = 6;
    p.pooled_hw = 6;
    p.classifier_mid = 256;
    p.lstm_hidden = 128;
    p.validate();
    return p;
}

ModelPreset ModelPreset::by_name(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "toy") return toy();
    throw UsageError("unknown preset '" + name + "' (expected 'paper' or 'toy')");
}

std::vector<std::array<std::int64_t, 2>> ModelPreset::trace_spatial() const {
    std::vector<std::array<std::int64_t, 2>> chain;
    std::int64_t h = input_h, w = input_w;
    chain.push_back({h, w});
    for (const auto& layer : conv_stack) {
        if (h + 2 * layer.padding < layer.kernel || w + 2 * layer.padding < layer.kernel)
            throw InvariantError("preset '" + name + "': conv kernel exceeds padded input");
        h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        if (layer.pool_after) {
            if (h < layer.pool_kernel || w < layer.pool_kernel)
                throw InvariantError("preset '" + name + "': pool kernel exceeds feature map");
            h = (h - layer.pool_kernel) / layer.pool_stride + 1;
            w = (w - layer.pool_kernel) / layer.pool_stride + 1;
        }
        chain.push_back({h, w});
    }
    return chain;
}

void ModelPreset::validate() const {
    if (conv_stack.empty()) throw InvariantError("preset '" + name + "': empty conv stack");
    if (input_channels != 1 && input_channels != 3)
        throw InvariantError("preset '" + name + "': input_channels must be 1 (depth) or 3 (rgb)");
    const auto chain = trace_spatial();
    const auto [h, w] = chain.back();
    if (h != latent_h || w != latent_w || conv_stack.back().out_channels != latent_channels)
        throw InvariantError("preset '" + name + "': conv stack traces to [" +
                             std::to_string(conv_stack.back().out_channels) + "," + std::to_string(h) + "," +
                             std::to_string(w) + "], declared latent [" + std::to_string(latent_channels) + "," +
                             std::to_string(latent_h) + "," + std::to_string(latent_w) + "]");
    if (pooled_hw > latent_h || pooled_hw > latent_w)
        throw InvariantError("preset '" + name + "': pooled size exceeds latent size");
    if (classifier_mid <= 0 || lstm_hidden <= 0)
        throw InvariantError("preset '" + name + "': classifier_mid and lstm_hidden must be positive");
    if (shape_classes != 5 || weight_classes != 3)
        throw InvariantError("preset '" + name + "': heads must emit 5 shape and 3 weight classes");
}

void ModelPreset::apply_override(const std::string& key, const std::string& value) {
    auto as_int = [&]() -> std::int64_t {
        try {
            return std::stoll(value);
        } catch (const std::exception&) {
            throw UsageError("preset override '" + key + "': expected integer, got '" + value + "'");
        }
    };
    if (key == "input_channels") {
        input_channels = as_int();
        if (input_channels != 1 && input_channels != 3)
            throw UsageError("input_channels must be 1 or 3");
    } else if (key == "lstm_hidden") {
        lstm_hidden = as_int();
    } else if (key == "classifier_mid") {
        classifier_mid = as_int();
    } else {
        throw UsageError("unknown preset key '" + key + "'");
    }
    validate();
}

ModelPreset load_preset_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open preset file: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        if (eq == std::string::npos)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto it = kv.find("preset");
    if (it == kv.end()) throw DataError(path.string() + ": missing 'preset' key");
    ModelPreset preset = ModelPreset::by_name(it->second);
    kv.erase(it);
    for (const auto& [key, value] : kv) preset.apply_override(key, value);
    return preset;
}

namespace {

Tensor he_init(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    return Tensor::randn(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng, true);
}

}  // namespace

GarmentNet::GarmentNet(ModelPreset preset, std::uint64_t seed) : preset_(std::move(preset)) {
    preset_.validate();
    std::mt19937_64 rng(derive_seed(seed, 0xfeed));

    std::int64_t in_ch = preset_.input_channels;
    int idx = 0;
    for (const auto& spec : preset_.conv_stack) {
        ConvLayer layer;
        layer.spec = spec;
        layer.w = he_init({spec.out_channels, in_ch, spec.kernel, spec.kernel}, in_ch * spec.kernel * spec.kernel,
                          rng);
        layer.b = Tensor::zeros({spec.out_channels}, true);
        layer.w.set_name("extractor.conv" + std::to_string(idx) + ".weight");
        layer.b.set_name("extractor.conv" + std::to_string(idx) + ".bias");
        conv_.push_back(layer);
        in_ch = spec.out_channels;
        ++idx;
    }

    auto make_head = [&](const char* prefix, std::int64_t classes) {
        const std::int64_t n = preset_.flatten_len();
        const std::int64_t mid = preset_.classifier_mid;
        std::vector<DenseLayer> head;
        const std::array<std::pair<std::int64_t, std::int64_t>, 3> dims = {
            std::pair{n, n}, std::pair{mid, n}, std::pair{classes, mid}};
        for (int i = 0; i < 3; ++i) {
            DenseLayer l;
            l.w = he_init({dims[static_cast<std::size_t>(i)].first, dims[static_cast<std::size_t>(i)].second},
                          dims[static_cast<std::size_t>(i)].second, rng);
            l.b = Tensor::zeros({dims[static_cast<std::size_t>(i)].first}, true);
            l.w.set_name(std::string(prefix) + ".fc" + std::to_string(i) + ".weight");
            l.b.set_name(std::string(prefix) + ".fc" + std::to_string(i) + ".bias");
            head.push_back(l);
        }
        return head;
    };
    shape_head_ = make_head("shape_head", preset_.shape_classes);
    weight_head_ = make_head("weight_head", preset_.weight_classes);

    const std::int64_t n_latent = preset_.latent_len();
    const std::int64_t h = preset_.lstm_hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    lstm_.w_input = Tensor::uniform({4 * h, n_latent}, -bound, bound, rng, true);
    lstm_.w_hidden = Tensor::uniform({4 * h, h}, -bound, bound, rng, true);
    lstm_.bias = Tensor::zeros({4 * h}, true);
    lstm_.w_input.set_name("lstm.w_input");
    lstm_.w_hidden.set_name("lstm.w_hidden");
    lstm_.bias.set_name("lstm.bias");
    proj_.w = Tensor::uniform({n_latent, h}, -bound, bound, rng, true);
    proj_.b = Tensor::zeros({n_latent}, true);
    proj_.w.set_name("lstm.proj.weight");
    proj_.b.set_name("lstm.proj.bias");
}

Tensor GarmentNet::features(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != preset_.input_channels || x.dim(2) != preset_.input_h ||
        x.dim(3) != preset_.input_w)
        throw DimensionError("features: expected [B," + std::to_string(preset_.input_channels) + "," +
                             std::to_string(preset_.input_h) + "," + std::to_string(preset_.input_w) + "], got " +
                             shape_str(x.shape()));
    Tensor y = x;
    for (const auto& layer : conv_) {
        y = conv2d(y, layer.w, layer.b, layer.spec.stride, layer.spec.padding);
        y = relu(y);
        if (layer.spec.pool_after) y = max_pool2d(y, layer.spec.pool_kernel, layer.spec.pool_stride);
    }
    return y;
}

Tensor GarmentNet::run_classifier(const std::vector<DenseLayer>& layers, const Tensor& latents) const {
    if (latents.rank() != 4)
        throw DimensionError("classify: expected latents [B,C,h,w], got " + shape_str(latents.shape()));
    Tensor y = adaptive_avg_pool2d(latents, preset_.pooled_hw, preset_.pooled_hw);
    y = flatten_batch(y);
    for (const auto& layer : layers) y = dense(y, layer.w, layer.b);
    return y;
}

Tensor GarmentNet::classify_batch(const Tensor& latents, Head head) const {
    switch (head) {
        case Head::shape:
            return run_classifier(shape_head_, latents);
        case Head::weight:
            return run_classifier(weight_head_, latents);
    }
    throw UsageError("classify: unknown head");
}

Tensor GarmentNet::predict_next_flat(const Tensor& l0, const Tensor& l1, const Tensor& l2) const {
    if (l0.shape() != l1.shape() || l1.shape() != l2.shape())
        throw DimensionError("predict_next: latent shapes differ");
    if (l0.rank() != 2 || l0.dim(1) != preset_.latent_len())
        throw DimensionError("predict_next: expected [B," + std::to_string(preset_.latent_len()) + "], got " +
                             shape_str(l0.shape()));
    const std::int64_t b = l0.dim(0);
    Tensor h = Tensor::zeros({b, preset_.lstm_hidden});
    Tensor c = Tensor::zeros({b, preset_.lstm_hidden});
    for (const Tensor* step : {&l0, &l1, &l2}) {
        auto [h2, c2] = lstm_cell(*step, h, c, lstm_);
        h = h2;
        c = c2;
    }
    return dense(h, proj_.w, proj_.b);
}

LatentMap GarmentNet::extract_features(const Tensor& frame, std::int64_t frame_index) const {
    Tensor x = frame;
    if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    Tensor latent = features(x);
    LatentMap out;
    out.values = reshape(latent, {preset_.latent_channels, preset_.latent_h, preset_.latent_w});
    out.frame_index = frame_index;
    return out;
}

Tensor GarmentNet::classify(const LatentMap& latent, Head head) const {
    const Tensor& v = latent.values;
    if (v.rank() != 3 || v.dim(0) != preset_.latent_channels || v.dim(1) != preset_.latent_h ||
        v.dim(2) != preset_.latent_w)
        throw DimensionError("classify: latent does not match preset, got " + shape_str(v.shape()));
    Tensor batched = reshape(v, {1, v.dim(0), v.dim(1), v.dim(2)});
    Tensor logits = classify_batch(batched, head);
    return reshape(logits, {logits.dim(1)});
}

LatentMap GarmentNet::predict_next_latent(const LatentMap& c_t, const LatentMap& c_t1,
                                          const LatentMap& c_t2) const {
    if (c_t.values.shape() != c_t1.values.shape() || c_t1.values.shape() != c_t2.values.shape())
        throw DimensionError("predict_next_latent: latent shapes differ");
    const std::int64_t n = preset_.latent_len();
    Tensor flat = predict_next_flat(reshape(c_t.values, {1, n}), reshape(c_t1.values, {1, n}),
                                    reshape(c_t2.values, {1, n}));
    LatentMap out;
    out.values = reshape(flat, {preset_.latent_channels, preset_.latent_h, preset_.latent_w});
    out.frame_index = c_t2.frame_index >= 0 ? c_t2.frame_index + 1 : -1;
    return out;
}

std::vector<Tensor> GarmentNet::extractor_params() const {
    std::vector<Tensor> out;
    for (const auto& layer : conv_) {
        out.push_back(layer.w);
        out.push_back(layer.b);
    }
    return out;
}

std::vector<Tensor> GarmentNet::head_params() const {
    std::vector<Tensor> out;
    for (const auto* head : {&shape_head_, &weight_head_})
        for (const auto& layer : *head) {
            out.push_back(layer.w);
            out.push_back(layer.b);
        }
    return out;
}

std::vector<Tensor> GarmentNet::lstm_params() const {
    return {lstm_.w_input, lstm_.w_hidden, lstm_.bias, proj_.w, proj_.b};
}

NamedParams GarmentNet::named_params() const {
    NamedParams out;
    for (const auto& group : {extractor_params(), head_params(), lstm_params()})
        for (const auto& p : group) out.emplace_back(p.name(), p);
    return out;
}

std::vector<std::int64_t> GarmentNet::classifier_widths(Head head) const {
    const auto& layers = head == Head::shape ? shape_head_ : weight_head_;
    std::vector<std::int64_t> widths;
    widths.push_back(layers.front().w.dim(1));
    for (const auto& l : layers) widths.push_back(l.w.dim(0));
    return widths;
}

void GarmentNet::set_stage2_trainable() {
    for (auto& p : extractor_params()) p.set_requires_grad(false);
    for (auto& p : head_params()) p.set_requires_grad(false);
    for (auto& p : lstm_params()) p.set_requires_grad(true);
}

void GarmentNet::set_all_trainable() {
    for (auto& [name, p] : named_params()) p.set_requires_grad(true);
}

std::uint64_t GarmentNet::frozen_checksum() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& group : {extractor_params(), head_params()})
        for (const auto& p : group) {
            const auto d = p.data();
            h = fnv1a64(d.data(), d.size() * sizeof(double), h);
        }
    return h;
}

namespace {
constexpr const char* kMetaStage = "meta.stage";
constexpr const char* kMetaPreset = "meta.preset";
constexpr const char* kMetaChannels = "meta.input_channels";
constexpr const char* kMetaLstmHidden = "meta.lstm_hidden";
constexpr const char* kMetaClassifierMid = "meta.classifier_mid";

double preset_code(const std::string& name) { return name == "paper" ? 0.0 : 1.0; }
}  // namespace

void GarmentNet::save(const std::filesystem::path& path, int stage) const {
    NamedParams out;
    out.emplace_back(kMetaStage, Tensor::scalar(static_cast<double>(stage)));
    out.emplace_back(kMetaPreset, Tensor::scalar(preset_code(preset_.name)));
    out.emplace_back(kMetaChannels, Tensor::scalar(static_cast<double>(preset_.input_channels)));
    out.emplace_back(kMetaLstmHidden, Tensor::scalar(static_cast<double>(preset_.lstm_hidden)));
    out.emplace_back(kMetaClassifierMid, Tensor::scalar(static_cast<double>(preset_.classifier_mid)));
    for (auto& [name, p] : named_params()) out.emplace_back(name, p);
    save_checkpoint(path, out);
}

int GarmentNet::load(const std::filesystem::path& path) {
    NamedParams file = load_checkpoint(path);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : file) by_name.emplace(name, t);

    auto meta = [&](const char* key) -> double {
        auto it = by_name.find(key);
        if (it == by_name.end()) throw DataError("checkpoint missing '" + std::string(key) + "': " + path.string());
        return it->second.item();
    };
    if (meta(kMetaPreset) != preset_code(preset_.name) ||
        static_cast<std::int64_t>(meta(kMetaChannels)) != preset_.input_channels ||
        static_cast<std::int64_t>(meta(kMetaLstmHidden)) != preset_.lstm_hidden ||
        static_cast<std::int64_t>(meta(kMetaClassifierMid)) != preset_.classifier_mid)
        throw UsageError("checkpoint " + path.string() + " was written for a different preset than '" +
                         preset_.name + "'");
    const int stage = static_cast<int>(meta(kMetaStage));

    for (auto& [name, p] : named_params()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint missing parameter '" + name + "': " + path.string());
        if (it->second.shape() != p.shape())
            throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", model expects " + shape_str(p.shape()));
        auto dst = p.data();
        const auto src = it->second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return stage;
}

int GarmentNet::peek_stage(const std::filesystem::path& path) {
    NamedParams file = load_checkpoint(path);
    for (auto& [name, t] : file)
        if (name == kMetaStage) return static_cast<int>(t.item());
    throw DataError("checkpoint missing 'meta.stage': " + path.string());
}

}  // namespace dp
