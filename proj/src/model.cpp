#include "tdid/model.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "tdid/error.hpp"
#include "tdid/rng.hpp"

namespace tdid {

namespace {
std::atomic<std::uint64_t> g_backbone_calls{0};
}

std::uint64_t backbone_call_count() { return g_backbone_calls.load(); }

// ---- config --------------------------------------------------------------

std::string EmbedFeatures::label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!s.empty()) s += '+';
        s += name;
    };
    add(img, "IMG");
    add(cc, "CC");
    add(diff, "DIFF");
    return s;
}

EmbedFeatures EmbedFeatures::parse(const std::string& label) {
    EmbedFeatures f{false, false, false};
    std::size_t start = 0;
    while (start <= label.size()) {
        auto end = label.find('+', start);
        if (end == std::string::npos) end = label.size();
        const auto tok = label.substr(start, end - start);
        if (tok == "IMG") {
            f.img = true;
        } else if (tok == "CC") {
            f.cc = true;
        } else if (tok == "DIFF") {
            f.diff = true;
        } else {
            throw ConfigError("unknown embedding feature '" + tok + "' (expected IMG, CC or DIFF)");
        }
        start = end + 1;
    }
    return f;
}

std::vector<EmbedFeatures> all_embed_combinations() {
    return {{true, false, false}, {false, true, false}, {false, false, true}, {true, true, false},
            {true, false, true},  {false, true, true},  {true, true, true}};
}

void ModelConfig::validate() const {
    if (backbone_channels.empty()) throw ConfigError("backbone_channels must not be empty");
    for (int c : backbone_channels) {
        if (c <= 0) throw ConfigError("backbone_channels must be positive");
    }
    const int expected_stride = 1 << (backbone_channels.size() - 1);
    if (backbone_stride != expected_stride) {
        throw ConfigError("backbone_stride " + std::to_string(backbone_stride) + " does not match " +
                          std::to_string(backbone_channels.size()) + " blocks (expected " +
                          std::to_string(expected_stride) + ")");
    }
    if (!embed_features.any()) throw ConfigError("embed_features must not be empty");
    if (feature_dim != backbone_channels.back()) {
        throw ConfigError("feature_dim must equal the last backbone channel count");
    }
    if (feature_dim % 2 != 0) throw ConfigError("feature_dim must be even");
    if (num_target_views < 1) throw ConfigError("num_target_views must be >= 1");
    if (anchor_scales.empty() || anchor_ratios.empty()) throw ConfigError("anchor scales and ratios must be non-empty");
    for (double v : anchor_scales) {
        if (!(v > 0)) throw ConfigError("anchor scales must be positive");
    }
    for (double v : anchor_ratios) {
        if (!(v > 0)) throw ConfigError("anchor ratios must be positive");
    }
    if (cc_kernel < 1) throw ConfigError("cc_kernel must be >= 1");
    if (backbone_kernel < 1 || backbone_kernel % 2 == 0) throw ConfigError("backbone_kernel must be odd");
}

nlohmann::json config_to_json(const ModelConfig& c) {
    if (c.backbone_kernel != 3) throw ConfigError("only 3x3 backbones are serializable");
    nlohmann::json features = nlohmann::json::array();
    if (c.embed_features.img) features.push_back("IMG");
    if (c.embed_features.cc) features.push_back("CC");
    if (c.embed_features.diff) features.push_back("DIFF");
    return {{"backbone_channels", c.backbone_channels}, {"backbone_stride", c.backbone_stride},
            {"embed_features", features},               {"feature_dim", c.feature_dim},
            {"num_target_views", c.num_target_views},   {"anchor_scales", c.anchor_scales},
            {"anchor_ratios", c.anchor_ratios},         {"cc_kernel", c.cc_kernel}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    static const char* const kKeys[] = {"backbone_channels", "backbone_stride", "embed_features",
                                        "feature_dim",       "num_target_views", "anchor_scales",
                                        "anchor_ratios",     "cc_kernel"};
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    ModelConfig c;
    try {
        for (const auto& [key, _] : j.items()) {
            if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
                throw ConfigError("unknown model config key '" + key + "'");
            }
        }
        if (j.contains("backbone_channels")) c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
        if (j.contains("backbone_stride")) c.backbone_stride = j.at("backbone_stride").get<int>();
        if (j.contains("embed_features")) {
            c.embed_features = {false, false, false};
            for (const auto& f : j.at("embed_features")) {
                const auto e = EmbedFeatures::parse(f.get<std::string>());
                c.embed_features.img |= e.img;
                c.embed_features.cc |= e.cc;
                c.embed_features.diff |= e.diff;
            }
        }
        if (j.contains("feature_dim")) {
            c.feature_dim = j.at("feature_dim").get<int>();
        } else {
            c.feature_dim = c.backbone_channels.back();
        }
        if (j.contains("num_target_views")) c.num_target_views = j.at("num_target_views").get<int>();
        if (j.contains("anchor_scales")) c.anchor_scales = j.at("anchor_scales").get<std::vector<double>>();
        if (j.contains("anchor_ratios")) c.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
        if (j.contains("cc_kernel")) c.cc_kernel = j.at("cc_kernel").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- model ---------------------------------------------------------------

namespace {

template <typename T>
ConvLayer<T> make_layer(int cin, int cout, int k) {
    ConvLayer<T> l;
    l.weight = Tensor<T>::zeros({static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                                 static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                                true);
    l.bias = Tensor<T>::zeros({static_cast<std::size_t>(cout)}, true);
    l.padding = k / 2;
    return l;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const int n = config_.feature_dim;
    const int views = config_.num_target_views;
    const int a = static_cast<int>(config_.anchors_per_cell());
    int cin = 3;
    for (int c : config_.backbone_channels) {
        backbone.push_back(make_layer<T>(cin, c, config_.backbone_kernel));
        cin = c;
    }
    int fused = 0;
    if (config_.embed_features.img) fused += n;
    if (config_.embed_features.cc) {
        cc_conv = make_layer<T>(views * n, n / 2, 3);
        fused += n / 2;
    }
    if (config_.embed_features.diff) {
        diff_conv = make_layer<T>(views * n, n / 2, 3);
        fused += n / 2;
    }
    fuse_conv = make_layer<T>(fused, n, 3);
    cls_head = make_layer<T>(n, 2 * a, 1);
    reg_head = make_layer<T>(n, 4 * a, 1);
}

template <typename T>
std::vector<ConvLayer<T>*> Model<T>::layers_mut() {
    std::vector<ConvLayer<T>*> out;
    for (auto& l : backbone) out.push_back(&l);
    if (cc_conv) out.push_back(&*cc_conv);
    if (diff_conv) out.push_back(&*diff_conv);
    out.push_back(&fuse_conv);
    out.push_back(&cls_head);
    out.push_back(&reg_head);
    return out;
}

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
    Model m(config);
    SplitMix64 rng(seed);
    for (ConvLayer<T>* l : m.layers_mut()) {
        const auto& s = l->weight.shape();
        const double receptive = static_cast<double>(s[2] * s[3]);
        const double fan_in = static_cast<double>(s[1]) * receptive;
        const double fan_out = static_cast<double>(s[0]) * receptive;
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& w : l->weight.mutable_data()) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    return m;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto add = [&](const std::string& prefix, const ConvLayer<T>& l) {
        out.emplace_back(prefix + ".weight", l.weight);
        out.emplace_back(prefix + ".bias", l.bias);
    };
    for (std::size_t i = 0; i < backbone.size(); ++i) add("backbone." + std::to_string(i), backbone[i]);
    if (cc_conv) add("embed.cc", *cc_conv);
    if (diff_conv) add("embed.diff", *diff_conv);
    add("embed.fuse", fuse_conv);
    add("head.cls", cls_head);
    add("head.reg", reg_head);
    return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : named_parameters()) n += t.numel();
    return n;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
    Model<U> out(config_);
    auto dst = out.layers_mut();
    auto src = const_cast<Model*>(this)->layers_mut();
    auto convert = [](const Tensor<T>& t) {
        return Tensor<U>::from_data(t.shape(), std::vector<U>(t.data().begin(), t.data().end()), true);
    };
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i]->weight = convert(src[i]->weight);
        dst[i]->bias = convert(src[i]->bias);
    }
    return out;
}

template <typename T>
void Model<T>::load_parameters(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensorf*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    for (auto& [name, param] : named_parameters()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("checkpoint is missing parameter '" + name + "'");
        if (it->second->shape() != param.shape()) {
            throw InvalidShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second->shape()) +
                                    ", model expects " + shape_str(param.shape()));
        }
        auto dst = param.mutable_data();
        auto src = it->second->data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
}

// ---- forward -------------------------------------------------------------

template <typename T>
Tensor<T> extract_features(const Model<T>& model, const Tensor<T>& image) {
    const auto& cfg = model.config();
    if (image.rank() != 4 || image.dim(1) != 3) {
        throw InvalidShapeError("extract_features: expected [B,3,H,W] image, got " + shape_str(image.shape()));
    }
    const auto stride = static_cast<std::size_t>(cfg.backbone_stride);
    if (image.dim(2) % stride != 0 || image.dim(3) % stride != 0) {
        throw InvalidShapeError("extract_features: image extent " + shape_str(image.shape()) +
                                " is not divisible by stride " + std::to_string(stride));
    }
    g_backbone_calls.fetch_add(1, std::memory_order_relaxed);
    Tensor<T> x = image;
    for (std::size_t i = 0; i < model.backbone.size(); ++i) {
        x = relu(model.backbone[i](x));
        if (i + 1 < model.backbone.size()) x = maxpool2x2(x);
    }
    return x;
}

template <typename T>
TargetFeatures<T> pool_target(const Model<T>& model, const Tensor<T>& raw) {
    if (raw.rank() != 4 || raw.dim(0) != 1 || raw.dim(1) != static_cast<std::size_t>(model.config().feature_dim)) {
        throw InvalidShapeError("pool_target: expected [1,N,h,w] target features, got " + shape_str(raw.shape()));
    }
    return {raw, global_max_pool(raw)};
}

template <typename T>
Tensor<T> embed(const Model<T>& model, const Tensor<T>& scene, std::span<const TargetFeatures<T>> targets) {
    const auto& cfg = model.config();
    const auto n = static_cast<std::size_t>(cfg.feature_dim);
    if (targets.size() != static_cast<std::size_t>(cfg.num_target_views)) {
        throw ConfigError("embed: model expects " + std::to_string(cfg.num_target_views) + " target views, got " +
                          std::to_string(targets.size()));
    }
    if (scene.rank() != 4 || scene.dim(0) != 1 || scene.dim(1) != n) {
        throw InvalidShapeError("embed: expected [1,N,Hf,Wf] scene features, got " + shape_str(scene.shape()));
    }
    std::vector<Tensor<T>> cc_inputs, diff_inputs;
    for (const auto& t : targets) {
        if (t.pooled.shape() != Shape{1, n, 1, 1}) {
            throw InvalidShapeError("embed: pooled target features must be [1,N,1,1]");
        }
        if (cfg.embed_features.cc) {
            const auto k = static_cast<std::size_t>(cfg.cc_kernel);
            Tensor<T> kernel = k == 1 ? reshape(t.pooled, {n, 1, 1}) : reshape(adaptive_max_pool(t.raw, k, k), {n, k, k});
            cc_inputs.push_back(depthwise_xcorr(scene, kernel));
        }
        if (cfg.embed_features.diff) diff_inputs.push_back(broadcast_sub(scene, t.pooled));
    }
    std::vector<Tensor<T>> fused;
    if (cfg.embed_features.img) fused.push_back(scene);
    if (cfg.embed_features.cc) fused.push_back(relu((*model.cc_conv)(concat_channels(cc_inputs))));
    if (cfg.embed_features.diff) fused.push_back(relu((*model.diff_conv)(concat_channels(diff_inputs))));
    return relu(model.fuse_conv(fused.size() == 1 ? fused[0] : concat_channels(fused)));
}

template <typename T>
Tensor<T> embed(const Model<T>& model, const Tensor<T>& scene, const std::vector<Tensor<T>>& raw_targets) {
    std::vector<TargetFeatures<T>> feats;
    for (const auto& r : raw_targets) feats.push_back(pool_target(model, r));
    return embed(model, scene, std::span<const TargetFeatures<T>>(feats));
}

template <typename T>
HeadOutput<T> predict_head(const Model<T>& model, const Tensor<T>& embedding) {
    return {model.cls_head(embedding), model.reg_head(embedding), model.config().backbone_stride};
}

template <typename T>
HeadOutput<T> forward(const Model<T>& model, const Tensor<T>& scene, const std::vector<Tensor<T>>& targets) {
    if (targets.size() != static_cast<std::size_t>(model.config().num_target_views)) {
        throw ConfigError("forward: model expects " + std::to_string(model.config().num_target_views) +
                          " target images, got " + std::to_string(targets.size()));
    }
    const auto scene_feat = extract_features(model, scene);
    std::vector<Tensor<T>> raw;
    for (const auto& t : targets) raw.push_back(extract_features(model, t));
    return predict_head(model, embed(model, scene_feat, raw));
}

AnchorSet anchors_for(const ModelConfig& config, std::size_t image_height, std::size_t image_width) {
    const auto stride = static_cast<std::size_t>(config.backbone_stride);
    return generate_anchors(image_height / stride, image_width / stride, config.backbone_stride, config.anchor_scales,
                            config.anchor_ratios);
}

// ---- persistence ---------------------------------------------------------

std::filesystem::path config_sidecar_path(const std::filesystem::path& checkpoint_path) {
    auto p = checkpoint_path;
    p.replace_extension(".json");
    return p;
}

void save_model(const std::filesystem::path& checkpoint_path, const ModelF& model) {
    std::vector<NamedTensor> entries;
    for (auto& [name, t] : model.named_parameters()) entries.push_back({name, t.detach()});
    write_checkpoint(checkpoint_path, entries);
    const auto text = config_to_json(model.config()).dump(2) + "\n";
    write_file_bytes(config_sidecar_path(checkpoint_path), std::vector<std::uint8_t>(text.begin(), text.end()));
}

ModelF load_model(const std::filesystem::path& checkpoint_path) {
    const auto bytes = read_file_bytes(config_sidecar_path(checkpoint_path));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse " + config_sidecar_path(checkpoint_path).string() + ": " + e.what());
    }
    auto model = ModelF::init(config_from_json(j), 0);
    model.load_parameters(read_checkpoint(checkpoint_path));
    return model;
}

#define TDID_INSTANTIATE(T)                                                                                       \
    template class Model<T>;                                                                                      \
    template Tensor<T> extract_features<T>(const Model<T>&, const Tensor<T>&);                                    \
    template TargetFeatures<T> pool_target<T>(const Model<T>&, const Tensor<T>&);                                 \
    template Tensor<T> embed<T>(const Model<T>&, const Tensor<T>&, std::span<const TargetFeatures<T>>);           \
    template Tensor<T> embed<T>(const Model<T>&, const Tensor<T>&, const std::vector<Tensor<T>>&);                \
    template HeadOutput<T> predict_head<T>(const Model<T>&, const Tensor<T>&);                                    \
    template HeadOutput<T> forward<T>(const Model<T>&, const Tensor<T>&, const std::vector<Tensor<T>>&);

TDID_INSTANTIATE(float)
TDID_INSTANTIATE(double)

#undef TDID_INSTANTIATE

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

}  // namespace tdid
