#pragma once

// Target driven instance detector network.
//
// A shared backbone maps scene and target images to feature maps. Each target
// view is globally max-pooled to an N-vector which is depth-wise correlated
// with (CC) and subtracted from (DIFF) the scene features. Per-feature-type
// 3x3 convs reduce the concatenated views to N/2 channels each; the enabled
// branch outputs (and optionally the raw scene features, IMG) are fused by a
// final 3x3 conv before 1x1 classification and regression heads.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdid/anchors.hpp"
#include "tdid/checkpoint.hpp"
#include "tdid/tensor.hpp"

namespace tdid {

struct EmbedFeatures {
    bool img = false;
    bool cc = true;
    bool diff = true;

    bool any() const { return img || cc || diff; }
    std::string label() const;  // "CC+DIFF", "IMG", ...
    static EmbedFeatures parse(const std::string& label);
    friend bool operator==(const EmbedFeatures&, const EmbedFeatures&) = default;
};

// All seven non-empty combinations in table order.
std::vector<EmbedFeatures> all_embed_combinations();

struct ModelConfig {
    std::vector<int> backbone_channels{16, 32, 64, 64};
    int backbone_stride = 8;
    EmbedFeatures embed_features{};
    int feature_dim = 64;
    int num_target_views = 2;
    std::vector<double> anchor_scales{16, 32, 64};
    std::vector<double> anchor_ratios{0.5, 1, 2};
    int cc_kernel = 1;
    // In-process only; serialized configs always use 3x3 backbone convs.
    int backbone_kernel = 3;

    std::size_t anchors_per_cell() const { return anchor_scales.size() * anchor_ratios.size(); }
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

template <typename T>
struct ConvLayer {
    Tensor<T> weight;  // [Cout, Cin, k, k]
    Tensor<T> bias;    // [Cout]
    int padding = 0;

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, padding); }
};

template <typename T>
struct HeadOutput {
    Tensor<T> cls_logits;  // [B, 2A, Hf, Wf]; channel 2a = background, 2a+1 = target
    Tensor<T> reg_deltas;  // [B, 4A, Hf, Wf]; channels 4a..4a+3 = tx, ty, tw, th
    int feature_stride = 0;
};

template <typename T>
struct TargetFeatures {
    Tensor<T> raw;     // [1, N, hf, wf]
    Tensor<T> pooled;  // [1, N, 1, 1]
};

template <typename T>
class Model {
public:
    Model() = default;

    static Model init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // Stable order: backbone.<i>.{weight,bias}, embed.{cc,diff,fuse}.*, head.{cls,reg}.*
    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
    std::vector<Tensor<T>> parameters() const;
    std::size_t parameter_count() const;

    template <typename U>
    Model<U> cast() const;

    // Replaces parameter values by name; every parameter must be present.
    void load_parameters(const std::vector<NamedTensor>& entries);

    std::vector<ConvLayer<T>> backbone;
    std::optional<ConvLayer<T>> cc_conv;
    std::optional<ConvLayer<T>> diff_conv;
    ConvLayer<T> fuse_conv;
    ConvLayer<T> cls_head;
    ConvLayer<T> reg_head;

private:
    template <typename U>
    friend class Model;

    explicit Model(ModelConfig config);
    std::vector<ConvLayer<T>*> layers_mut();

    ModelConfig config_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

// Number of backbone executions since process start (all scalar types).
std::uint64_t backbone_call_count();

// image [B,3,H,W] with H,W divisible by the backbone stride.
template <typename T>
Tensor<T> extract_features(const Model<T>& model, const Tensor<T>& image);

template <typename T>
TargetFeatures<T> pool_target(const Model<T>& model, const Tensor<T>& raw_features);

template <typename T>
Tensor<T> embed(const Model<T>& model, const Tensor<T>& scene_features, std::span<const TargetFeatures<T>> targets);

template <typename T>
Tensor<T> embed(const Model<T>& model, const Tensor<T>& scene_features, const std::vector<Tensor<T>>& raw_targets);

template <typename T>
HeadOutput<T> predict_head(const Model<T>& model, const Tensor<T>& embedding);

// scene [1,3,H,W]; each target [1,3,h,w].
template <typename T>
HeadOutput<T> forward(const Model<T>& model, const Tensor<T>& scene, const std::vector<Tensor<T>>& targets);

// Anchors matching the head grid of a scene with the given extent.
AnchorSet anchors_for(const ModelConfig& config, std::size_t image_height, std::size_t image_width);

// <path> gets the parameters, <path with .json extension> the config.
void save_model(const std::filesystem::path& checkpoint_path, const ModelF& model);
ModelF load_model(const std::filesystem::path& checkpoint_path);
std::filesystem::path config_sidecar_path(const std::filesystem::path& checkpoint_path);

}  // namespace tdid
