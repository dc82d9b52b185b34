#pragma once

// DepthNet, the ASA block, the dual-path ASANet encoder and the two MotionNet
// decoders. Feature volumes are [B, C, H, W].

#include <torch/torch.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace asanet::nets {

enum class Backbone
{
    resnet18,
    resnet34,
    resnet50,
};

Backbone parse_backbone(const std::string& name);
std::string to_string(Backbone backbone);

/// Channel counts of the stem and the four residual stages.
std::array<int64_t, 5> encoder_channels(Backbone backbone);

enum class SqueezeMode
{
    mean,
    max,
    learned,
};

SqueezeMode parse_squeeze_mode(const std::string& name);
std::string to_string(SqueezeMode mode);

struct NetworkConfig
{
    Backbone backbone = Backbone::resnet18;
    SqueezeMode squeeze = SqueezeMode::mean;
    int64_t attention_hidden = 16;
    bool share_attention = true;  // one attention generator per block for both paths
    double pose_scale = 0.01;
    bool zero_init_ego = false;
    bool zero_init_field = true;
};

/// Non-identity branch of a residual unit (basic or bottleneck).
class ResidualBranchImpl : public torch::nn::Module
{
public:
    ResidualBranchImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t out_channels() const { return out_channels_; }

private:
    bool bottleneck_;
    int64_t out_channels_;
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
};
TORCH_MODULE(ResidualBranch);

/// Identity, or 1x1 convolution + batch norm when the shape changes.
class ShortcutImpl : public torch::nn::Module
{
public:
    ShortcutImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv{nullptr};
    torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(Shortcut);

class ResidualUnitImpl : public torch::nn::Module
{
public:
    ResidualUnitImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t out_channels() const { return branch->out_channels(); }

private:
    ResidualBranch branch{nullptr};
    Shortcut shortcut{nullptr};
};
TORCH_MODULE(ResidualUnit);

/// conv 7x7/2 + BN + ReLU. The max-pool that follows lives in the encoders.
class StemImpl : public torch::nn::Module
{
public:
    explicit StemImpl(int64_t in_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr};
};
TORCH_MODULE(Stem);

/// Residual image encoder. Returns features at strides {2, 4, 8, 16, 32}.
class ResNetEncoderImpl : public torch::nn::Module
{
public:
    ResNetEncoderImpl(Backbone backbone, int64_t in_channels);
    std::vector<torch::Tensor> forward(const torch::Tensor& x);

    const std::array<int64_t, 5>& channels() const { return channels_; }

private:
    std::array<int64_t, 5> channels_;
    Stem stem{nullptr};
    std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(ResNetEncoder);

struct FeaturePair
{
    torch::Tensor static_features;
    torch::Tensor dynamic_features;
};

struct AttentionState
{
    torch::Tensor descriptor;  // [B, 1, H, W] channel squeeze of U
    torch::Tensor mask;        // [B, 1, H, W] static likelihood in (0, 1)
};

/// Squeeze over channels followed by a small convolution stack and a sigmoid.
class AttentionGeneratorImpl : public torch::nn::Module
{
public:
    AttentionGeneratorImpl(int64_t channels, SqueezeMode mode, int64_t hidden);
    AttentionState forward(const torch::Tensor& features);

private:
    SqueezeMode mode_;
    torch::nn::Conv2d reduce{nullptr};
    torch::nn::Conv2d excite1{nullptr}, excite2{nullptr};
};
TORCH_MODULE(AttentionGenerator);

struct AsaBlockOutput
{
    FeaturePair features;
    AttentionState static_attention;
    AttentionState dynamic_attention;
    torch::Tensor transformed_static;   // U_S
    torch::Tensor transformed_dynamic;  // U_D
};

/// Attention generation, feature separation and cross-path aggregation. The
/// transformation F_tr is one residual branch shared by both paths.
class AsaBlockImpl : public torch::nn::Module
{
public:
    AsaBlockImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck, const NetworkConfig& config);

    AsaBlockOutput separate_and_aggregate(const FeaturePair& input);
    FeaturePair forward(const FeaturePair& input) { return separate_and_aggregate(input).features; }

    torch::Tensor transform(const torch::Tensor& x) { return branch->forward(x); }

    /// Replace both attention masks by a constant (testing aid). Cleared with
    /// std::nullopt.
    void force_mask(std::optional<double> value) { forced_mask_ = value; }

    int64_t out_channels() const { return branch->out_channels(); }

private:
    ResidualBranch branch{nullptr};
    AttentionGenerator static_attention{nullptr};
    AttentionGenerator dynamic_attention{nullptr};  // aliases static_attention when shared
    std::optional<double> forced_mask_;
};
TORCH_MODULE(AsaBlock);

/// ASA block plus the residual shortcut, added to each path after aggregation.
class AsaUnitImpl : public torch::nn::Module
{
public:
    AsaUnitImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck, const NetworkConfig& config);
    FeaturePair forward(const FeaturePair& input);

    AsaBlock block{nullptr};

private:
    Shortcut shortcut{nullptr};
};
TORCH_MODULE(AsaUnit);

struct AsaFeatures
{
    torch::Tensor stem;                          // stride 2, seeds both paths
    std::vector<torch::Tensor> static_levels;    // strides 4, 8, 16, 32
    std::vector<torch::Tensor> dynamic_levels;   // strides 4, 8, 16, 32
};

/// Dual-path encoder over a stacked (target, source) pair.
class AsaEncoderImpl : public torch::nn::Module
{
public:
    AsaEncoderImpl(const NetworkConfig& config, int64_t in_channels = 6);
    AsaFeatures forward(const torch::Tensor& stacked_pair);

    const std::array<int64_t, 5>& channels() const { return channels_; }
    std::vector<AsaBlock> blocks() const;

private:
    std::array<int64_t, 5> channels_;
    Stem stem{nullptr};
    std::vector<std::vector<AsaUnit>> stages_;
};
TORCH_MODULE(AsaEncoder);

/// 3x3 reflection-padded convolution followed by ELU.
class ConvBlockImpl : public torch::nn::Module
{
public:
    ConvBlockImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(ConvBlock);

/// U-shaped decoder emitting sigmoid disparities at strides {1, 2, 4, 8}.
class DepthDecoderImpl : public torch::nn::Module
{
public:
    explicit DepthDecoderImpl(const std::array<int64_t, 5>& encoder_channels);
    std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& features);

private:
    std::array<ConvBlock, 5> upconv0_;
    std::array<ConvBlock, 5> upconv1_;
    std::array<torch::nn::Conv2d, 4> dispconv_{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(DepthDecoder);

class DepthNetImpl : public torch::nn::Module
{
public:
    explicit DepthNetImpl(Backbone backbone);

    /// Throws std::invalid_argument unless the image is [B, 3, H, W] with H
    /// and W divisible by 32.
    std::vector<torch::Tensor> forward(const torch::Tensor& image);

    ResNetEncoder encoder{nullptr};
    DepthDecoder decoder{nullptr};
};
TORCH_MODULE(DepthNet);

/// Ego-motion head on the deepest static features: one [B, 6] pose vector.
class EgoDecoderImpl : public torch::nn::Module
{
public:
    EgoDecoderImpl(int64_t in_channels, double pose_scale, bool zero_init);
    torch::Tensor forward(const torch::Tensor& deepest_static);

private:
    double pose_scale_;
    torch::nn::Conv2d squeeze{nullptr}, conv1{nullptr}, conv2{nullptr}, head{nullptr};
};
TORCH_MODULE(EgoDecoder);

/// U-shaped decoder over the dynamic pyramid producing a [B, 3, H, W]
/// residual translation field in meters.
class FieldDecoderImpl : public torch::nn::Module
{
public:
    FieldDecoderImpl(const std::array<int64_t, 5>& encoder_channels, bool zero_init);
    torch::Tensor forward(const AsaFeatures& features);

    uint64_t call_count() const { return calls_.load(); }

private:
    std::array<ConvBlock, 5> upconv0_;
    std::array<ConvBlock, 5> upconv1_;
    torch::nn::Conv2d head{nullptr};
    std::atomic<uint64_t> calls_{0};
};
TORCH_MODULE(FieldDecoder);

/// The four trainable components, under the fixed names used in checkpoints.
class ComponentSet
{
public:
    static constexpr std::array<const char*, 4> kNames = {"depth", "asa", "ego", "field"};

    explicit ComponentSet(const NetworkConfig& config = {});

    DepthNet depth{nullptr};
    AsaEncoder asa{nullptr};
    EgoDecoder ego{nullptr};
    FieldDecoder field{nullptr};

    const NetworkConfig& config() const { return config_; }

    torch::nn::Module& component(const std::string& name);
    const torch::nn::Module& component(const std::string& name) const;

    /// Toggle gradients and train/eval mode per component. Unknown names throw
    /// std::invalid_argument and leave every flag untouched.
    void set_trainable(const std::map<std::string, bool>& flags);
    bool is_trainable(const std::string& name) const;
    std::map<std::string, bool> trainable_flags() const;

    /// Switch every component to evaluation mode without touching the flags.
    void eval();
    /// Restore train/eval mode from the flags.
    void restore_modes();

    std::vector<torch::Tensor> parameters(const std::string& name) const;
    std::vector<torch::Tensor> all_parameters() const;

    /// Order-sensitive FNV-1a hash of the raw parameter bytes of a component.
    uint64_t parameter_hash(const std::string& name) const;

    void to(torch::Dtype dtype);

    void save(torch::serialize::OutputArchive& archive) const;
    void load(torch::serialize::InputArchive& archive);

    /// Copy encoder weights from an archive of ResNet parameters (torchvision
    /// naming: conv1.weight, bn1.*, layerN.M.*). Shapes that do not match are
    /// skipped; a 3-channel stem is tiled across the 6-channel ASANet input.
    /// Returns the number of tensors copied.
    int load_pretrained_encoder(const std::string& path);

private:
    NetworkConfig config_;
    std::map<std::string, bool> trainable_;
};

struct MotionOutput
{
    torch::Tensor ego_motion;    // [B, 6]
    torch::Tensor motion_field;  // [B, 3, H, W], undefined when not requested
    AsaFeatures features;
};

/// Run the MotionNet on (target, source). The field decoder only runs when
/// with_field is set.
MotionOutput motion_forward(ComponentSet& nets, const torch::Tensor& target, const torch::Tensor& source,
                            bool with_field);

/// Input normalization shared by both networks.
torch::Tensor normalize_image(const torch::Tensor& image);

}  // namespace asanet::nets
