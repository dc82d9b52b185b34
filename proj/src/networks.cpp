#include "asanet/networks.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace asanet::nets {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

Backbone parse_backbone(const std::string& name)
{
    if (name == "resnet18")
        return Backbone::resnet18;
    if (name == "resnet34")
        return Backbone::resnet34;
    if (name == "resnet50")
        return Backbone::resnet50;
    throw std::invalid_argument("unknown backbone '" + name + "' (expected resnet18, resnet34 or resnet50)");
}

std::string to_string(Backbone backbone)
{
    switch (backbone) {
    case Backbone::resnet18: return "resnet18";
    case Backbone::resnet34: return "resnet34";
    case Backbone::resnet50: return "resnet50";
    }
    return "unknown";
}

SqueezeMode parse_squeeze_mode(const std::string& name)
{
    if (name == "mean")
        return SqueezeMode::mean;
    if (name == "max")
        return SqueezeMode::max;
    if (name == "learned")
        return SqueezeMode::learned;
    throw std::invalid_argument("unknown squeeze mode '" + name + "' (expected mean, max or learned)");
}

std::string to_string(SqueezeMode mode)
{
    switch (mode) {
    case SqueezeMode::mean: return "mean";
    case SqueezeMode::max: return "max";
    case SqueezeMode::learned: return "learned";
    }
    return "unknown";
}

namespace {

struct StageLayout
{
    std::array<int, 4> units;
    bool bottleneck;
};

StageLayout layout(Backbone backbone)
{
    switch (backbone) {
    case Backbone::resnet18: return {{2, 2, 2, 2}, false};
    case Backbone::resnet34: return {{3, 4, 6, 3}, false};
    case Backbone::resnet50: return {{3, 4, 6, 3}, true};
    }
    throw std::invalid_argument("unsupported backbone");
}

constexpr std::array<int64_t, 4> kStagePlanes = {64, 128, 256, 512};
constexpr std::array<int64_t, 5> kDecoderChannels = {16, 32, 64, 128, 256};

nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, bool bias = false)
{
    nn::Conv2d c(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(bias));
    nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
    return c;
}

void zero_conv(nn::Conv2d& c)
{
    torch::NoGradGuard no_grad;
    c->weight.zero_();
    if (c->bias.defined())
        c->bias.zero_();
}

torch::Tensor upsample2(const torch::Tensor& x)
{
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kNearest));
}

}  // namespace

std::array<int64_t, 5> encoder_channels(Backbone backbone)
{
    const int64_t expansion = layout(backbone).bottleneck ? 4 : 1;
    return {64, 64 * expansion, 128 * expansion, 256 * expansion, 512 * expansion};
}

torch::Tensor normalize_image(const torch::Tensor& image)
{
    return (image - 0.45) / 0.225;
}

// -- residual pieces --------------------------------------------------------

ResidualBranchImpl::ResidualBranchImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck)
    : bottleneck_(bottleneck), out_channels_(bottleneck ? planes * 4 : planes)
{
    if (bottleneck_) {
        conv1 = register_module("conv1", conv(in_channels, planes, 1));
        bn1 = register_module("bn1", nn::BatchNorm2d(planes));
        conv2 = register_module("conv2", conv(planes, planes, 3, stride));
        bn2 = register_module("bn2", nn::BatchNorm2d(planes));
        conv3 = register_module("conv3", conv(planes, out_channels_, 1));
        bn3 = register_module("bn3", nn::BatchNorm2d(out_channels_));
    } else {
        conv1 = register_module("conv1", conv(in_channels, planes, 3, stride));
        bn1 = register_module("bn1", nn::BatchNorm2d(planes));
        conv2 = register_module("conv2", conv(planes, planes, 3));
        bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    }
}

torch::Tensor ResidualBranchImpl::forward(const torch::Tensor& x)
{
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    if (bottleneck_)
        out = bn3(conv3(torch::relu(out)));
    return out;
}

ShortcutImpl::ShortcutImpl(int64_t in_channels, int64_t out_channels, int64_t stride)
{
    if (stride != 1 || in_channels != out_channels) {
        conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)));
        bn = register_module("bn", nn::BatchNorm2d(out_channels));
    }
}

torch::Tensor ShortcutImpl::forward(const torch::Tensor& x)
{
    return conv ? bn(conv(x)) : x;
}

ResidualUnitImpl::ResidualUnitImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck)
{
    branch = register_module("branch", ResidualBranch(in_channels, planes, stride, bottleneck));
    shortcut = register_module("shortcut", Shortcut(in_channels, branch->out_channels(), stride));
}

torch::Tensor ResidualUnitImpl::forward(const torch::Tensor& x)
{
    return torch::relu(branch(x) + shortcut(x));
}

StemImpl::StemImpl(int64_t in_channels)
{
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, 64, 7).stride(2).padding(3).bias(false)));
    nn::init::kaiming_normal_(conv1->weight, 0.0, torch::kFanOut, torch::kReLU);
    bn1 = register_module("bn1", nn::BatchNorm2d(64));
}

torch::Tensor StemImpl::forward(const torch::Tensor& x)
{
    return torch::relu(bn1(conv1(x)));
}

ResNetEncoderImpl::ResNetEncoderImpl(Backbone backbone, int64_t in_channels)
    : channels_(encoder_channels(backbone))
{
    const auto plan = layout(backbone);
    stem = register_module("stem", Stem(in_channels));
    int64_t width = 64;
    for (size_t s = 0; s < 4; ++s) {
        nn::Sequential stage;
        for (int u = 0; u < plan.units[s]; ++u) {
            const int64_t stride = (s > 0 && u == 0) ? 2 : 1;
            ResidualUnit unit(width, kStagePlanes[s], stride, plan.bottleneck);
            width = unit->out_channels();
            stage->push_back(unit);
        }
        stages_.push_back(register_module("layer" + std::to_string(s + 1), stage));
    }
}

std::vector<torch::Tensor> ResNetEncoderImpl::forward(const torch::Tensor& x)
{
    std::vector<torch::Tensor> features;
    features.push_back(stem(x));
    auto current = F::max_pool2d(features.back(), F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    for (auto& stage : stages_) {
        current = stage->forward(current);
        features.push_back(current);
    }
    return features;
}

// -- ASA --------------------------------------------------------------------

AttentionGeneratorImpl::AttentionGeneratorImpl(int64_t channels, SqueezeMode mode, int64_t hidden) : mode_(mode)
{
    if (mode_ == SqueezeMode::learned)
        reduce = register_module("reduce", nn::Conv2d(nn::Conv2dOptions(channels, 1, 1)));
    excite1 = register_module("excite1", nn::Conv2d(nn::Conv2dOptions(1, hidden, 3).padding(1)));
    excite2 = register_module("excite2", nn::Conv2d(nn::Conv2dOptions(hidden, 1, 3).padding(1)));
}

AttentionState AttentionGeneratorImpl::forward(const torch::Tensor& features)
{
    torch::Tensor descriptor;
    switch (mode_) {
    case SqueezeMode::mean: descriptor = features.mean(1, /*keepdim=*/true); break;
    case SqueezeMode::max: descriptor = std::get<0>(features.max(1, /*keepdim=*/true)); break;
    case SqueezeMode::learned: descriptor = reduce(features); break;
    }
    // Bounded logits keep the sigmoid strictly inside (0, 1) in single precision.
    const auto logits = excite2(torch::relu(excite1(descriptor))).clamp(-15.0, 15.0);
    return {descriptor, torch::sigmoid(logits)};
}

AsaBlockImpl::AsaBlockImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck,
                           const NetworkConfig& config)
{
    branch = register_module("branch", ResidualBranch(in_channels, planes, stride, bottleneck));
    const int64_t out = branch->out_channels();
    static_attention =
        register_module("attention", AttentionGenerator(out, config.squeeze, config.attention_hidden));
    if (config.share_attention)
        dynamic_attention = static_attention;
    else
        dynamic_attention = register_module("dynamic_attention",
                                             AttentionGenerator(out, config.squeeze, config.attention_hidden));
}

AsaBlockOutput AsaBlockImpl::separate_and_aggregate(const FeaturePair& input)
{
    TORCH_CHECK(input.static_features.sizes() == input.dynamic_features.sizes(),
                "ASA block: static and dynamic features differ in shape (", input.static_features.sizes(), " vs ",
                input.dynamic_features.sizes(), ")");
    AsaBlockOutput out;
    out.transformed_static = branch(input.static_features);
    out.transformed_dynamic = branch(input.dynamic_features);
    out.static_attention = static_attention(out.transformed_static);
    out.dynamic_attention = dynamic_attention(out.transformed_dynamic);
    if (forced_mask_) {
        out.static_attention.mask = torch::full_like(out.static_attention.mask, *forced_mask_);
        out.dynamic_attention.mask = torch::full_like(out.dynamic_attention.mask, *forced_mask_);
    }
    const auto& m_s = out.static_attention.mask;
    const auto& m_d = out.dynamic_attention.mask;
    const auto& u_s = out.transformed_static;
    const auto& u_d = out.transformed_dynamic;
    out.features.static_features = m_s * u_s + m_d * u_d;
    out.features.dynamic_features = (1.0 - m_s) * u_s + (1.0 - m_d) * u_d;
    return out;
}

AsaUnitImpl::AsaUnitImpl(int64_t in_channels, int64_t planes, int64_t stride, bool bottleneck,
                         const NetworkConfig& config)
{
    block = register_module("block", AsaBlock(in_channels, planes, stride, bottleneck, config));
    shortcut = register_module("shortcut", Shortcut(in_channels, block->out_channels(), stride));
}

FeaturePair AsaUnitImpl::forward(const FeaturePair& input)
{
    const auto aggregated = block(input);
    return {torch::relu(aggregated.static_features + shortcut(input.static_features)),
            torch::relu(aggregated.dynamic_features + shortcut(input.dynamic_features))};
}

AsaEncoderImpl::AsaEncoderImpl(const NetworkConfig& config, int64_t in_channels)
    : channels_(encoder_channels(config.backbone))
{
    const auto plan = layout(config.backbone);
    stem = register_module("stem", Stem(in_channels));
    int64_t width = 64;
    for (size_t s = 0; s < 4; ++s) {
        nn::ModuleList list;
        std::vector<AsaUnit> units;
        for (int u = 0; u < plan.units[s]; ++u) {
            const int64_t stride = (s > 0 && u == 0) ? 2 : 1;
            AsaUnit unit(width, kStagePlanes[s], stride, plan.bottleneck, config);
            width = unit->block->out_channels();
            list->push_back(unit);
            units.push_back(unit);
        }
        register_module("layer" + std::to_string(s + 1), list);
        stages_.push_back(std::move(units));
    }
}

AsaFeatures AsaEncoderImpl::forward(const torch::Tensor& stacked_pair)
{
    AsaFeatures out;
    out.stem = stem(stacked_pair);
    const auto pooled = F::max_pool2d(out.stem, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    FeaturePair pair{pooled, pooled};
    for (auto& stage : stages_) {
        for (auto& unit : stage)
            pair = unit(pair);
        out.static_levels.push_back(pair.static_features);
        out.dynamic_levels.push_back(pair.dynamic_features);
    }
    return out;
}

std::vector<AsaBlock> AsaEncoderImpl::blocks() const
{
    std::vector<AsaBlock> out;
    for (const auto& stage : stages_)
        for (const auto& unit : stage)
            out.push_back(unit->block);
    return out;
}

// -- decoders ----------------------------------------------------------------

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels)
{
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3)
                                                  .padding(1)
                                                  .padding_mode(torch::kReflect)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x)
{
    return torch::elu(conv(x));
}

namespace {

void build_upconvs(nn::Module& owner, const std::array<int64_t, 5>& enc, std::array<ConvBlock, 5>& up0,
                   std::array<ConvBlock, 5>& up1)
{
    for (int i = 4; i >= 0; --i) {
        const int64_t in0 = (i == 4) ? enc[4] : kDecoderChannels[i + 1];
        up0[i] = owner.register_module("upconv_" + std::to_string(i) + "_0", ConvBlock(in0, kDecoderChannels[i]));
        const int64_t in1 = kDecoderChannels[i] + (i > 0 ? enc[i - 1] : 0);
        up1[i] = owner.register_module("upconv_" + std::to_string(i) + "_1", ConvBlock(in1, kDecoderChannels[i]));
    }
}

}  // namespace

DepthDecoderImpl::DepthDecoderImpl(const std::array<int64_t, 5>& encoder_channels)
    : upconv0_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr)},
      upconv1_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr)}
{
    build_upconvs(*this, encoder_channels, upconv0_, upconv1_);
    for (int s = 0; s < 4; ++s) {
        dispconv_[s] = register_module("dispconv_" + std::to_string(s),
                                       nn::Conv2d(nn::Conv2dOptions(kDecoderChannels[s], 1, 3)
                                                      .padding(1)
                                                      .padding_mode(torch::kReflect)));
    }
}

std::vector<torch::Tensor> DepthDecoderImpl::forward(const std::vector<torch::Tensor>& features)
{
    TORCH_CHECK(features.size() == 5, "depth decoder expects 5 feature levels");
    std::vector<torch::Tensor> disparities(4);
    auto x = features[4];
    for (int i = 4; i >= 0; --i) {
        x = upsample2(upconv0_[i](x));
        if (i > 0)
            x = torch::cat({x, features[i - 1]}, 1);
        x = upconv1_[i](x);
        if (i < 4)
            disparities[i] = torch::sigmoid(dispconv_[i](x));
    }
    return disparities;
}

DepthNetImpl::DepthNetImpl(Backbone backbone)
{
    encoder = register_module("encoder", ResNetEncoder(backbone, 3));
    decoder = register_module("decoder", DepthDecoder(encoder->channels()));
}

std::vector<torch::Tensor> DepthNetImpl::forward(const torch::Tensor& image)
{
    if (image.dim() != 4 || image.size(1) != 3)
        throw std::invalid_argument("DepthNet expects a [B,3,H,W] image");
    if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
        throw std::invalid_argument("DepthNet input size " + std::to_string(image.size(3)) + "x" +
                                    std::to_string(image.size(2)) + " is not divisible by 32");
    }
    return decoder(encoder(normalize_image(image)));
}

EgoDecoderImpl::EgoDecoderImpl(int64_t in_channels, double pose_scale, bool zero_init) : pose_scale_(pose_scale)
{
    squeeze = register_module("squeeze", nn::Conv2d(nn::Conv2dOptions(in_channels, 256, 1)));
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(256, 256, 3).padding(1)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(256, 256, 3).padding(1)));
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(256, 6, 1)));
    if (zero_init)
        zero_conv(head);
}

torch::Tensor EgoDecoderImpl::forward(const torch::Tensor& deepest_static)
{
    auto x = torch::relu(squeeze(deepest_static));
    x = torch::relu(conv1(x));
    x = torch::relu(conv2(x));
    return pose_scale_ * head(x).mean({2, 3});
}

FieldDecoderImpl::FieldDecoderImpl(const std::array<int64_t, 5>& encoder_channels, bool zero_init)
    : upconv0_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr)},
      upconv1_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr)}
{
    build_upconvs(*this, encoder_channels, upconv0_, upconv1_);
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(kDecoderChannels[0], 3, 3).padding(1)));
    if (zero_init)
        zero_conv(head);
}

torch::Tensor FieldDecoderImpl::forward(const AsaFeatures& features)
{
    TORCH_CHECK(features.dynamic_levels.size() == 4, "field decoder expects 4 dynamic levels");
    ++calls_;
    const std::array<torch::Tensor, 5> levels = {features.stem, features.dynamic_levels[0],
                                                 features.dynamic_levels[1], features.dynamic_levels[2],
                                                 features.dynamic_levels[3]};
    auto x = levels[4];
    for (int i = 4; i >= 0; --i) {
        x = upsample2(upconv0_[i](x));
        if (i > 0)
            x = torch::cat({x, levels[i - 1]}, 1);
        x = upconv1_[i](x);
    }
    return head(x);
}

// -- component set -------------------------------------------------------------

ComponentSet::ComponentSet(const NetworkConfig& config) : config_(config)
{
    depth = DepthNet(config.backbone);
    asa = AsaEncoder(config, 6);
    ego = EgoDecoder(asa->channels()[4], config.pose_scale, config.zero_init_ego);
    field = FieldDecoder(asa->channels(), config.zero_init_field);
    for (const char* name : kNames)
        trainable_[name] = true;
}

torch::nn::Module& ComponentSet::component(const std::string& name)
{
    return const_cast<torch::nn::Module&>(std::as_const(*this).component(name));
}

const torch::nn::Module& ComponentSet::component(const std::string& name) const
{
    if (name == "depth")
        return *depth;
    if (name == "asa")
        return *asa;
    if (name == "ego")
        return *ego;
    if (name == "field")
        return *field;
    throw std::invalid_argument("unknown component '" + name + "' (expected depth, asa, ego or field)");
}

void ComponentSet::set_trainable(const std::map<std::string, bool>& flags)
{
    for (const auto& [name, flag] : flags)
        (void)component(name);
    for (const auto& [name, flag] : flags) {
        auto& module = component(name);
        for (auto& p : module.parameters())
            p.requires_grad_(flag);
        module.train(flag);
        trainable_[name] = flag;
    }
}

bool ComponentSet::is_trainable(const std::string& name) const
{
    (void)component(name);
    return trainable_.at(name);
}

std::map<std::string, bool> ComponentSet::trainable_flags() const
{
    return trainable_;
}

void ComponentSet::eval()
{
    for (const char* name : kNames)
        component(name).eval();
}

void ComponentSet::restore_modes()
{
    for (const char* name : kNames)
        component(name).train(trainable_.at(name));
}

std::vector<torch::Tensor> ComponentSet::parameters(const std::string& name) const
{
    return component(name).parameters();
}

std::vector<torch::Tensor> ComponentSet::all_parameters() const
{
    std::vector<torch::Tensor> out;
    for (const char* name : kNames) {
        auto params = parameters(name);
        out.insert(out.end(), params.begin(), params.end());
    }
    return out;
}

uint64_t ComponentSet::parameter_hash(const std::string& name) const
{
    uint64_t hash = 1469598103934665603ULL;
    auto mix = [&hash](const torch::Tensor& t) {
        const auto bytes = t.detach().to(torch::kCPU).contiguous();
        const auto* data = static_cast<const unsigned char*>(bytes.data_ptr());
        const auto n = bytes.numel() * bytes.element_size();
        for (int64_t i = 0; i < n; ++i) {
            hash ^= data[i];
            hash *= 1099511628211ULL;
        }
    };
    const auto& module = component(name);
    for (const auto& p : module.parameters())
        mix(p);
    for (const auto& b : module.buffers())
        mix(b);
    return hash;
}

void ComponentSet::to(torch::Dtype dtype)
{
    for (const char* name : kNames)
        component(name).to(dtype);
}

void ComponentSet::save(torch::serialize::OutputArchive& archive) const
{
    for (const char* name : kNames) {
        torch::serialize::OutputArchive sub;
        component(name).save(sub);
        archive.write(name, sub);
    }
}

void ComponentSet::load(torch::serialize::InputArchive& archive)
{
    for (const char* name : kNames) {
        torch::serialize::InputArchive sub;
        archive.read(name, sub);
        component(name).load(sub);
    }
    for (const auto& [name, flag] : trainable_) {
        for (auto& p : component(name).parameters())
            p.requires_grad_(flag);
    }
    restore_modes();
}

namespace {

/// torchvision name -> our name inside a ResNet-style module, or empty.
std::string map_torchvision_name(const std::string& name, bool asa)
{
    auto replace_prefix = [](std::string s, const std::string& from, const std::string& to) {
        if (s.rfind(from, 0) == 0)
            s = to + s.substr(from.size());
        return s;
    };
    if (name.rfind("conv1.", 0) == 0 || name.rfind("bn1.", 0) == 0)
        return "stem." + name;
    if (name.rfind("layer", 0) != 0)
        return {};
    // layerN.M.rest
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    if (first == std::string::npos || second == std::string::npos)
        return {};
    const std::string unit = name.substr(0, second);
    std::string rest = name.substr(second + 1);
    rest = replace_prefix(rest, "downsample.0.", "shortcut.conv.");
    rest = replace_prefix(rest, "downsample.1.", "shortcut.bn.");
    if (rest.rfind("shortcut.", 0) != 0)
        rest = (asa ? "block.branch." : "branch.") + rest;
    return unit + "." + rest;
}

int copy_matching(torch::nn::Module& module, const c10::Dict<c10::IValue, c10::IValue>& weights, bool asa)
{
    auto params = module.named_parameters(/*recurse=*/true);
    auto buffers = module.named_buffers(/*recurse=*/true);
    int copied = 0;
    torch::NoGradGuard no_grad;
    for (const auto& entry : weights) {
        if (!entry.key().isString() || !entry.value().isTensor())
            continue;
        const std::string ours = map_torchvision_name(entry.key().toStringRef(), asa);
        if (ours.empty())
            continue;
        torch::Tensor* target = params.find(ours);
        if (target == nullptr)
            target = buffers.find(ours);
        if (target == nullptr)
            continue;
        auto value = entry.value().toTensor().to(target->dtype());
        if (value.sizes() != target->sizes() && value.dim() == 4 && target->dim() == 4 &&
            value.size(0) == target->size(0) && target->size(1) % value.size(1) == 0 &&
            value.sizes().slice(2) == target->sizes().slice(2)) {
            const int64_t repeats = target->size(1) / value.size(1);
            value = value.repeat({1, repeats, 1, 1}) / static_cast<double>(repeats);
        }
        if (value.sizes() != target->sizes())
            continue;
        target->copy_(value);
        ++copied;
    }
    return copied;
}

}  // namespace

int ComponentSet::load_pretrained_encoder(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open pretrained weights '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string expected = "pretrained weights '" + path +
                                 "' must hold a plain name -> tensor dict (torch.save(dict(model.state_dict()), path))";
    c10::IValue value;
    try {
        value = torch::pickle_load(bytes);
    } catch (const c10::Error&) {
        // OrderedDict pickles are not understood by the C++ unpickler.
        throw std::runtime_error(expected);
    }
    if (!value.isGenericDict())
        throw std::runtime_error(expected);
    const auto weights = value.toGenericDict();
    return copy_matching(*depth->encoder, weights, false) + copy_matching(*asa, weights, true);
}

MotionOutput motion_forward(ComponentSet& nets, const torch::Tensor& target, const torch::Tensor& source,
                            bool with_field)
{
    MotionOutput out;
    out.features = nets.asa(torch::cat({normalize_image(target), normalize_image(source)}, 1));
    out.ego_motion = nets.ego(out.features.static_levels.back());
    if (with_field)
        out.motion_field = nets.field(out.features);
    return out;
}

}  // namespace asanet::nets
