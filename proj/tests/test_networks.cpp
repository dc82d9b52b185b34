#include "asanet/networks.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace asanet::nets;

namespace {

FeaturePair random_pair(int64_t batch, int64_t channels, int64_t size)
{
    return {torch::randn({batch, channels, size, size}), torch::randn({batch, channels, size, size})};
}

float max_abs(const torch::Tensor& t)
{
    return t.abs().max().item<float>();
}

}  // namespace

TEST(Config, ParseNames)
{
    EXPECT_EQ(parse_backbone("resnet50"), Backbone::resnet50);
    EXPECT_EQ(to_string(Backbone::resnet34), "resnet34");
    EXPECT_THROW(parse_backbone("vgg"), std::invalid_argument);
    EXPECT_EQ(parse_squeeze_mode("max"), SqueezeMode::max);
    EXPECT_THROW(parse_squeeze_mode("median"), std::invalid_argument);
    EXPECT_EQ(encoder_channels(Backbone::resnet50)[4], 2048);
}

TEST(AsaBlock, ForcedMasks)
{
    torch::manual_seed(1);
    AsaBlock block(32, 32, 1, false, NetworkConfig{});
    block->eval();
    torch::NoGradGuard no_grad;
    const auto in = random_pair(2, 32, 8);
    const auto u_s = block->transform(in.static_features);
    const auto u_d = block->transform(in.dynamic_features);

    block->force_mask(1.0);
    auto out = block->forward(in);
    EXPECT_LT(max_abs(out.static_features - (u_s + u_d)), 1e-5);
    EXPECT_EQ(max_abs(out.dynamic_features), 0.0f);

    block->force_mask(0.0);
    out = block->forward(in);
    EXPECT_EQ(max_abs(out.static_features), 0.0f);
    EXPECT_LT(max_abs(out.dynamic_features - (u_s + u_d)), 1e-5);

    // Equal inputs and masks at one half: each path carries half the aggregate.
    block->force_mask(0.5);
    const FeaturePair same{in.static_features, in.static_features};
    out = block->forward(same);
    EXPECT_LT(max_abs(out.static_features - u_s), 1e-5);
    EXPECT_LT(max_abs(out.dynamic_features - u_s), 1e-5);
}

TEST(AsaBlock, PartitionInvariant)
{
    torch::manual_seed(2);
    for (bool share : {true, false}) {
        for (auto squeeze : {SqueezeMode::mean, SqueezeMode::max, SqueezeMode::learned}) {
            NetworkConfig config;
            config.share_attention = share;
            config.squeeze = squeeze;
            AsaBlock block(16, 32, 2, false, config);
            torch::NoGradGuard no_grad;
            const auto in = random_pair(2, 16, 16);
            const auto out = block->separate_and_aggregate(in);
            const auto reference = block->transform(in.static_features) + block->transform(in.dynamic_features);
            EXPECT_LT(max_abs(out.features.static_features + out.features.dynamic_features - reference), 1e-5);
            EXPECT_EQ(out.features.static_features.sizes(), (std::vector<int64_t>{2, 32, 8, 8}));
        }
    }
}

TEST(AsaBlock, MasksStrictlyInsideUnitInterval)
{
    torch::manual_seed(3);
    AsaBlock block(8, 8, 1, false, NetworkConfig{});
    torch::NoGradGuard no_grad;
    for (double scale : {1.0, 1e3, 1e6}) {
        const FeaturePair in{scale * torch::randn({1, 8, 8, 8}), -scale * torch::randn({1, 8, 8, 8})};
        const auto out = block->separate_and_aggregate(in);
        for (const auto& mask : {out.static_attention.mask, out.dynamic_attention.mask}) {
            EXPECT_GT(mask.min().item<float>(), 0.0f);
            EXPECT_LT(mask.max().item<float>(), 1.0f);
        }
    }
}

TEST(AsaBlock, RejectsMismatchedPaths)
{
    AsaBlock block(8, 8, 1, false, NetworkConfig{});
    const FeaturePair in{torch::randn({1, 8, 8, 8}), torch::randn({1, 8, 4, 4})};
    EXPECT_THROW(block->forward(in), c10::Error);
}

TEST(AsaEncoder, PyramidShapes)
{
    torch::manual_seed(4);
    for (auto backbone : {Backbone::resnet18, Backbone::resnet50}) {
        NetworkConfig config;
        config.backbone = backbone;
        AsaEncoder encoder(config);
        encoder->eval();
        torch::NoGradGuard no_grad;
        const auto features = encoder->forward(torch::rand({1, 6, 64, 64}));
        const auto channels = encoder_channels(backbone);
        ASSERT_EQ(features.static_levels.size(), 4u);
        ASSERT_EQ(features.dynamic_levels.size(), 4u);
        EXPECT_EQ(features.stem.sizes(), (std::vector<int64_t>{1, channels[0], 32, 32}));
        for (size_t level = 0; level < 4; ++level) {
            const int64_t size = 64 >> (level + 2);
            const std::vector<int64_t> expected{1, channels[level + 1], size, size};
            EXPECT_EQ(features.static_levels[level].sizes(), expected);
            EXPECT_EQ(features.dynamic_levels[level].sizes(), expected);
        }
    }
}

TEST(AsaEncoder, DeterministicInEvalMode)
{
    AsaEncoder encoder(NetworkConfig{});
    encoder->eval();
    torch::NoGradGuard no_grad;
    const auto image = torch::rand({1, 3, 64, 64});
    const auto pair = torch::cat({image, image}, 1);
    const auto a = encoder->forward(pair);
    const auto b = encoder->forward(pair);
    for (size_t level = 0; level < 4; ++level) {
        EXPECT_TRUE(torch::equal(a.static_levels[level], b.static_levels[level]));
        EXPECT_TRUE(torch::equal(a.dynamic_levels[level], b.dynamic_levels[level]));
    }
}

TEST(DepthNet, OutputScalesAndRange)
{
    torch::manual_seed(5);
    DepthNet net(Backbone::resnet18);
    net->eval();
    torch::NoGradGuard no_grad;
    const auto disps = net->forward(torch::rand({1, 3, 192, 640}));
    ASSERT_EQ(disps.size(), 4u);
    const std::vector<std::pair<int64_t, int64_t>> sizes{{192, 640}, {96, 320}, {48, 160}, {24, 80}};
    for (size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(disps[i].sizes(), (std::vector<int64_t>{1, 1, sizes[i].first, sizes[i].second}));
        EXPECT_GT(disps[i].min().item<float>(), 0.0f);
        EXPECT_LT(disps[i].max().item<float>(), 1.0f);
    }
}

TEST(DepthNet, BitwiseDeterministic)
{
    DepthNet net(Backbone::resnet18);
    net->eval();
    torch::NoGradGuard no_grad;
    const auto image = torch::rand({2, 3, 64, 96});
    const auto a = net->forward(image);
    const auto b = net->forward(image);
    for (size_t i = 0; i < a.size(); ++i)
        EXPECT_TRUE(torch::equal(a[i], b[i]));
}

TEST(DepthNet, RejectsBadSizes)
{
    DepthNet net(Backbone::resnet18);
    EXPECT_THROW(net->forward(torch::rand({1, 3, 100, 64})), std::invalid_argument);
    EXPECT_THROW(net->forward(torch::rand({1, 4, 64, 64})), std::invalid_argument);
    EXPECT_THROW(net->forward(torch::rand({3, 64, 64})), std::invalid_argument);
}

TEST(MotionNet, ZeroHeadsGiveIdentity)
{
    NetworkConfig config;
    config.zero_init_ego = true;
    ComponentSet nets(config);
    nets.eval();
    torch::NoGradGuard no_grad;
    const auto target = torch::rand({2, 3, 64, 96});
    const auto source = torch::rand({2, 3, 64, 96});
    const auto out = motion_forward(nets, target, source, true);
    EXPECT_EQ(out.ego_motion.sizes(), (std::vector<int64_t>{2, 6}));
    EXPECT_EQ(max_abs(out.ego_motion), 0.0f);
    EXPECT_EQ(out.motion_field.sizes(), (std::vector<int64_t>{2, 3, 64, 96}));
    EXPECT_EQ(max_abs(out.motion_field), 0.0f);
}

TEST(MotionNet, DefaultEgoHeadIsSmallButNonZero)
{
    ComponentSet nets;
    nets.eval();
    torch::NoGradGuard no_grad;
    const auto out = motion_forward(nets, torch::rand({1, 3, 64, 64}), torch::rand({1, 3, 64, 64}), false);
    EXPECT_FALSE(out.motion_field.defined());
    EXPECT_TRUE(torch::isfinite(out.ego_motion).all().item<bool>());
    EXPECT_GT(max_abs(out.ego_motion), 0.0f);
    EXPECT_LT(max_abs(out.ego_motion), 0.1f);
}

TEST(MotionNet, DecodersReadOnlyTheirPath)
{
    NetworkConfig config;
    config.zero_init_field = false;
    ComponentSet nets(config);
    nets.eval();
    torch::NoGradGuard no_grad;
    auto features = nets.asa->forward(torch::rand({1, 6, 64, 64}));
    const auto ego_before = nets.ego->forward(features.static_levels.back());
    const auto field_before = nets.field->forward(features);

    auto perturbed = features;
    for (auto& level : perturbed.dynamic_levels)
        level = level + torch::randn_like(level);
    perturbed.stem = perturbed.stem + 1.0;
    EXPECT_TRUE(torch::equal(nets.ego->forward(perturbed.static_levels.back()), ego_before));

    perturbed = features;
    perturbed.static_levels.back() = torch::randn_like(perturbed.static_levels.back());
    const auto field_after = nets.field->forward(perturbed);
    EXPECT_TRUE(torch::equal(field_after, field_before));
    EXPECT_GT(max_abs(field_before), 0.0f);
}

TEST(ComponentSet, PartitionsParameters)
{
    ComponentSet nets;
    size_t total = 0;
    for (const char* name : ComponentSet::kNames)
        total += nets.parameters(name).size();
    EXPECT_EQ(total, nets.all_parameters().size());
    EXPECT_THROW(nets.component("pose"), std::invalid_argument);
}

TEST(ComponentSet, SetTrainableRejectsUnknownNames)
{
    ComponentSet nets;
    nets.set_trainable({{"depth", true}, {"asa", true}, {"ego", true}, {"field", true}});
    EXPECT_THROW(nets.set_trainable({{"depth", false}, {"decoder", false}}), std::invalid_argument);
    EXPECT_TRUE(nets.is_trainable("depth"));
    for (const auto& p : nets.parameters("depth"))
        EXPECT_TRUE(p.requires_grad());
}

TEST(ComponentSet, FreezeAllKeepsEveryParameter)
{
    torch::manual_seed(6);
    ComponentSet nets;
    nets.set_trainable({{"depth", false}, {"asa", false}, {"ego", false}, {"field", false}});
    std::map<std::string, uint64_t> before;
    for (const char* name : ComponentSet::kNames)
        before[name] = nets.parameter_hash(name);
    torch::optim::Adam optimizer(nets.all_parameters(), torch::optim::AdamOptions(1e-3));
    for (int step = 0; step < 10; ++step) {
        optimizer.zero_grad();
        const auto target = torch::rand({1, 3, 64, 64});
        const auto out = motion_forward(nets, target, torch::rand({1, 3, 64, 64}), true);
        const auto disp = nets.depth->forward(target);
        const auto loss = out.ego_motion.sum() + out.motion_field.sum() + disp[0].sum();
        if (loss.requires_grad())
            loss.backward();
        optimizer.step();
    }
    for (const char* name : ComponentSet::kNames)
        EXPECT_EQ(nets.parameter_hash(name), before[name]) << name;
}

TEST(ComponentSet, SaveLoadRoundTrip)
{
    torch::manual_seed(7);
    ComponentSet a;
    ComponentSet b;
    ASSERT_NE(a.parameter_hash("depth"), b.parameter_hash("depth"));
    std::stringstream stream;
    {
        torch::serialize::OutputArchive archive;
        a.save(archive);
        archive.save_to(stream);
    }
    torch::serialize::InputArchive archive;
    archive.load_from(stream);
    b.load(archive);
    for (const char* name : ComponentSet::kNames)
        EXPECT_EQ(a.parameter_hash(name), b.parameter_hash(name)) << name;
}

TEST(ComponentSet, LoadsTorchvisionStyleWeights)
{
    ComponentSet nets;
    c10::Dict<std::string, torch::Tensor> weights;
    const auto stem = torch::randn({64, 3, 7, 7});
    const auto layer_conv = torch::randn({64, 64, 3, 3});
    const auto downsample = torch::randn({128, 64, 1, 1});
    weights.insert("conv1.weight", stem);
    weights.insert("layer1.0.conv1.weight", layer_conv);
    weights.insert("layer2.0.downsample.0.weight", downsample);
    weights.insert("fc.weight", torch::randn({1000, 512}));
    const auto path = std::filesystem::temp_directory_path() / "asanet_pretrained_test.pt";
    {
        const auto bytes = torch::pickle_save(weights);
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    const int copied = nets.load_pretrained_encoder(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(copied, 6);  // three tensors into each encoder; fc is ignored

    auto depth_params = nets.depth->encoder->named_parameters();
    EXPECT_TRUE(torch::equal(depth_params["stem.conv1.weight"], stem));
    EXPECT_TRUE(torch::equal(depth_params["layer1.0.branch.conv1.weight"], layer_conv));
    EXPECT_TRUE(torch::equal(depth_params["layer2.0.shortcut.conv.weight"], downsample));

    auto asa_params = nets.asa->named_parameters();
    const auto tiled = asa_params["stem.conv1.weight"];
    EXPECT_EQ(tiled.size(1), 6);
    EXPECT_TRUE(torch::allclose(tiled.narrow(1, 0, 3), stem / 2.0));
    EXPECT_TRUE(torch::allclose(tiled.narrow(1, 3, 3), stem / 2.0));
    EXPECT_TRUE(torch::equal(asa_params["layer1.0.block.branch.conv1.weight"], layer_conv));
}
