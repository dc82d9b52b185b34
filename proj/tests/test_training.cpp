#include "asanet/training.hpp"

#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace asanet;
using namespace asanet::training;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("asanet_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

torch::Tensor smooth_image(int64_t h, int64_t w, double phase)
{
    const auto opts = torch::kFloat64;
    const auto y = torch::arange(h, opts).view({1, 1, h, 1});
    const auto x = torch::arange(w, opts).view({1, 1, 1, w});
    std::vector<torch::Tensor> channels;
    for (int c = 0; c < 3; ++c)
        channels.push_back(0.5 + 0.2 * torch::sin(0.45 * x + phase + c) * torch::cos(0.35 * y - 0.5 * phase + 0.3 * c) +
                           0.1 * torch::sin(0.2 * (x + y) + 2.0 * c));
    return torch::cat(channels, 1);
}

torch::Tensor smooth_depth(int64_t h, int64_t w, double base)
{
    const auto opts = torch::kFloat64;
    const auto y = torch::arange(h, opts).view({1, 1, h, 1});
    const auto x = torch::arange(w, opts).view({1, 1, 1, w});
    return base + 0.3 * torch::sin(0.3 * x) * torch::cos(0.2 * y);
}

geometry::PoseBatch pose_from(const std::array<double, 6>& v)
{
    return geometry::pose_vectors_to_transforms(torch::tensor(std::vector<double>(v.begin(), v.end()), torch::kFloat64)
                                                    .view({1, 6}));
}

torch::Tensor small_intrinsics(int64_t h, int64_t w)
{
    return geometry::CameraIntrinsics{20.0, 20.0, (w - 1) / 2.0, (h - 1) / 2.0, static_cast<int>(w),
                                      static_cast<int>(h)}
        .tensor(torch::kFloat64);
}

/// Two-source objective inputs at 16x16 in double precision.
ObjectiveInputs fixture()
{
    const int64_t h = 16, w = 16;
    ObjectiveInputs in;
    in.target = smooth_image(h, w, 0.0);
    in.sources = {smooth_image(h, w, 0.4), smooth_image(h, w, -0.3)};
    in.depth = smooth_depth(h, w, 2.0);
    in.disparity = 1.0 / in.depth;
    in.source_depths = {smooth_depth(h, w, 2.2), smooth_depth(h, w, 1.9)};
    in.poses = {pose_from({0.01, -0.02, 0.005, 0.05, -0.02, 0.1}), pose_from({-0.01, 0.015, 0.0, -0.04, 0.01, -0.1})};
    in.intrinsics = small_intrinsics(h, w);
    return in;
}

data::Snippet tiny_snippet(uint64_t seed, const geometry::CameraIntrinsics& k)
{
    return data::generate_synthetic_snippet(data::random_scene_spec(seed, k), k, "s" + std::to_string(seed));
}

geometry::CameraIntrinsics tiny_camera()
{
    data::SyntheticDatasetConfig c;
    c.width = 96;
    c.height = 64;
    c.focal = 60.0;
    return c.intrinsics();
}

data::InMemoryDataset tiny_dataset(int count, uint64_t seed)
{
    const auto k = tiny_camera();
    std::vector<data::Snippet> snippets;
    for (int i = 0; i < count; ++i)
        snippets.push_back(tiny_snippet(seed + static_cast<uint64_t>(i), k));
    return data::InMemoryDataset(std::move(snippets));
}

TrainingConfig tiny_config()
{
    TrainingConfig c;
    c.phase_epochs = {1, 1, 1};
    c.optimizer.batch_size = 2;
    c.max_steps_per_phase = 1;
    c.seed = 3;
    return c;
}

std::vector<torch::Tensor> adam_moments(torch::optim::Adam& optimizer)
{
    std::vector<torch::Tensor> out;
    auto& state = optimizer.state();
    for (auto& group : optimizer.param_groups()) {
        for (auto& p : group.params()) {
            const auto it = state.find(p.unsafeGetTensorImpl());
            if (it == state.end())
                continue;
            const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
            out.push_back(s.exp_avg());
            out.push_back(s.exp_avg_sq());
        }
    }
    return out;
}

}  // namespace

TEST(Schedule, PhaseFlags)
{
    EXPECT_EQ(phase_trainable(1).at("field"), false);
    EXPECT_EQ(phase_trainable(1).at("depth"), true);
    EXPECT_EQ(phase_trainable(2).at("field"), true);
    EXPECT_EQ(phase_trainable(2).at("asa"), false);
    for (const auto& [name, flag] : phase_trainable(3))
        EXPECT_TRUE(flag) << name;
    EXPECT_THROW(phase_trainable(4), std::invalid_argument);
}

TEST(Schedule, LearningRateStepDecay)
{
    OptimizerConfig c;
    for (int e = 0; e < 15; ++e)
        EXPECT_DOUBLE_EQ(learning_rate_at(c, e), 1e-4) << e;
    for (int e = 15; e < 30; ++e)
        EXPECT_DOUBLE_EQ(learning_rate_at(c, e), 1e-5) << e;
    TrainingConfig t;
    EXPECT_EQ(t.phase_offset(1), 0);
    EXPECT_EQ(t.phase_offset(2), 10);
    EXPECT_EQ(t.phase_offset(3), 20);
}

TEST(Schedule, ConfigJsonRoundTripAndRejection)
{
    TrainingConfig c = tiny_config();
    c.loss.loss.eta = 1.5;
    c.phases = {1, 3};
    const auto back = training_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());

    auto j = to_json(c);
    j["optimizer"]["momentum"] = 0.9;
    EXPECT_THROW(training_config_from_json(j), std::invalid_argument);
    EXPECT_THROW(training_config_from_json(nlohmann::json{{"phases", {2, 1}}}), std::invalid_argument);
    EXPECT_THROW(training_config_from_json(nlohmann::json{{"loss", {{"eta", 0.9}}}}), std::invalid_argument);
}

TEST(Objective, RigidGradientWrtPoseVector)
{
    const auto base = fixture();
    const auto cfg = losses::LossConfig{};
    const auto f = [&](const torch::Tensor& v) {
        auto in = base;
        in.poses[0] = geometry::pose_vectors_to_transforms(v.view({1, 6}));
        return rigid_objective(in, cfg).total;
    };
    const auto point = torch::tensor({0.01, -0.02, 0.005, 0.05, -0.02, 0.1}, torch::kFloat64);
    const auto r = asanet::testing::check_gradient(f, point, 6, 1, 1e-6, 1e-3, 1e-9);
    EXPECT_EQ(r.failures, 0) << "max relative error " << r.max_relative_error;
}

TEST(Objective, RigidGradientWrtDepthMap)
{
    const auto base = fixture();
    const auto cfg = losses::LossConfig{};
    const auto f = [&](const torch::Tensor& depth) {
        auto in = base;
        in.depth = depth;
        return rigid_objective(in, cfg).total;
    };
    const auto r = asanet::testing::check_gradient(f, base.depth, 64, 2, 1e-6, 1e-3, 1e-9);
    EXPECT_EQ(r.failures, 0) << "max relative error " << r.max_relative_error;
}

TEST(Objective, RigidTotalIsHandWeightedSum)
{
    const auto in = fixture();
    losses::LossConfig cfg;
    cfg.lambda_g = 0.37;
    cfg.lambda_d = 0.011;
    const auto t = rigid_objective(in, cfg);

    // Independent recomputation from the primitive terms.
    std::vector<torch::Tensor> pe, ge, id;
    for (size_t i = 0; i < 2; ++i) {
        const auto grid = geometry::reproject(in.depth, in.poses[i], in.intrinsics);
        const auto warped = geometry::bilinear_sample(in.sources[i], grid.coords);
        pe.push_back(losses::photometric_error(in.target, warped, cfg.alpha));
        ge.push_back(losses::geometric_error(in.depth, in.source_depths[i], in.poses[i], in.intrinsics));
        id.push_back(losses::photometric_error(in.target, in.sources[i], cfg.alpha));
    }
    const auto mask = (torch::minimum(pe[0], pe[1]) < torch::minimum(id[0], id[1])).to(torch::kFloat64);
    const double l_pe = (mask * torch::minimum(pe[0], pe[1])).mean().item<double>();
    const double l_ge = (mask * torch::minimum(ge[0], ge[1])).mean().item<double>();
    const double l_ds = losses::disparity_smoothness(in.disparity, in.target).item<double>();
    EXPECT_NEAR(t.photometric.item<double>(), l_pe, 1e-12);
    EXPECT_NEAR(t.geometric.item<double>(), l_ge, 1e-12);
    EXPECT_NEAR(t.total.item<double>(), l_pe + 0.37 * l_ge + 0.011 * l_ds, 1e-12);
    EXPECT_DOUBLE_EQ(t.field_smoothness.item<double>(), 0.0);
}

TEST(Objective, RigidPerfectStaticReconstructionHasZeroConsistencyTerms)
{
    auto in = fixture();
    in.sources = {in.target.clone(), in.target.clone()};
    in.source_depths = {in.depth.clone(), in.depth.clone()};
    in.poses = {pose_from({0, 0, 0, 0, 0, 0}), pose_from({0, 0, 0, 0, 0, 0})};
    const auto t = rigid_objective(in, losses::LossConfig{});
    EXPECT_EQ(t.photometric.item<double>(), 0.0);
    EXPECT_EQ(t.geometric.item<double>(), 0.0);
    EXPECT_LT(t.min_photometric.abs().max().item<double>(), 1e-12);
    EXPECT_EQ(t.auto_mask.sum().item<double>(), 0.0);
}

TEST(Objective, MergedWithoutDynamicPixelsReducesToRigidPlusFieldSmoothness)
{
    auto in = fixture();
    in.residuals = {torch::zeros({1, 3, 16, 16}, torch::kFloat64), torch::zeros({1, 3, 16, 16}, torch::kFloat64)};
    const losses::LossConfig cfg;
    const auto merged = merged_objective(in, cfg);
    EXPECT_EQ(merged.dynamic_mask.sum().item<double>(), 0.0);

    const auto rigid = rigid_objective(in, cfg);
    double fs = 0.0;
    for (size_t i = 0; i < 2; ++i)
        fs += losses::motion_field_smoothness(geometry::flow_from_projection(in.depth, in.poses[i], in.intrinsics),
                                              in.depth)
                  .item<double>();
    fs /= 2.0;
    EXPECT_NEAR(merged.total.item<double>(), rigid.total.item<double>() + cfg.lambda_f * fs, 1e-12);
    EXPECT_NEAR(merged.photometric.item<double>(), rigid.photometric.item<double>(), 1e-15);
}

TEST(Objective, MergedMaskIsTheStrictEtaTest)
{
    // Residual translation on the right half only: the selection mask is the
    // strict eta test and stays empty where the two transformations agree.
    auto in = fixture();
    in.sources.resize(1);
    in.source_depths.resize(1);
    in.poses.resize(1);
    const int64_t h = 16, w = 16;
    auto residual = torch::zeros({1, 3, h, w}, torch::kFloat64);
    residual.narrow(3, 8, 8).select(1, 0).fill_(0.15);
    in.residuals = {residual};
    const auto terms = merged_objective(in, losses::LossConfig{});
    const auto rigid = view_errors(in.target, in.sources[0], in.depth, in.source_depths[0], in.poses[0], in.intrinsics,
                                   std::nullopt, 0.85);
    const auto field = view_errors(in.target, in.sources[0], in.depth, in.source_depths[0], in.poses[0],
                                   in.intrinsics, residual, 0.85);
    const auto expected = ((rigid.pe > 1.2 * field.pe) & (rigid.ge > 1.2 * field.ge)).to(torch::kFloat64);
    EXPECT_TRUE(torch::equal(terms.dynamic_mask, expected));
    EXPECT_EQ(terms.dynamic_mask.narrow(3, 0, 7).sum().item<double>(), 0.0);
}

TEST(Objective, FieldSmoothnessIgnoresDepthAndPoseGradients)
{
    auto in = fixture();
    in.residuals = {torch::zeros({1, 3, 16, 16}, torch::kFloat64), torch::zeros({1, 3, 16, 16}, torch::kFloat64)};
    auto depth = in.depth.clone().requires_grad_(true);
    auto residual = in.residuals[0].clone().requires_grad_(true);
    in.depth = depth;
    in.residuals[0] = residual;
    const auto terms = merged_objective(in, losses::LossConfig{});
    const auto grads = torch::autograd::grad({terms.field_smoothness}, {depth, residual}, {}, false, false, true);
    EXPECT_FALSE(grads[0].defined() && grads[0].abs().sum().item<double>() > 0.0);
    ASSERT_TRUE(grads[1].defined());
    EXPECT_GT(grads[1].abs().sum().item<double>(), 0.0);
}

TEST(PhaseLoss, RejectsFlagMismatchBeforeAnyUpdate)
{
    torch::manual_seed(0);
    nets::ComponentSet nets;
    nets.set_trainable(phase_trainable(1));
    const auto batch = data::collate({tiny_snippet(1, tiny_camera())});
    const auto before = nets.parameter_hash("field");
    EXPECT_THROW(compute_phase_loss(2, batch, nets, LossOptions{}), std::invalid_argument);
    Trainer trainer(nets, tiny_config());
    EXPECT_THROW(trainer.step(batch, 3), std::invalid_argument);
    EXPECT_EQ(nets.parameter_hash("field"), before);
    EXPECT_EQ(trainer.state().global_step, 0);
}

TEST(PhaseLoss, PhaseTwoOnlyReachesTheFieldDecoder)
{
    torch::manual_seed(0);
    nets::ComponentSet nets;
    nets.set_trainable(phase_trainable(2));
    const auto batch = data::collate({tiny_snippet(2, tiny_camera()), tiny_snippet(3, tiny_camera())});
    auto loss = compute_phase_loss(2, batch, nets, LossOptions{});
    loss.total.backward();
    for (const char* name : {"depth", "asa", "ego"}) {
        for (const auto& p : nets.parameters(name))
            EXPECT_FALSE(p.grad().defined()) << name;
    }
    double field_grad = 0.0;
    for (const auto& p : nets.parameters("field")) {
        if (p.grad().defined())
            field_grad += p.grad().abs().sum().item<double>();
    }
    EXPECT_GT(field_grad, 0.0);
}

TEST(PhaseLoss, PhaseOneNeverRunsTheFieldDecoder)
{
    torch::manual_seed(0);
    nets::ComponentSet nets;
    nets.set_trainable(phase_trainable(1));
    const auto batch = data::collate({tiny_snippet(4, tiny_camera())});
    const auto calls = nets.field->call_count();
    const auto loss = compute_phase_loss(1, batch, nets, LossOptions{});
    EXPECT_EQ(nets.field->call_count(), calls);
    EXPECT_TRUE(std::isfinite(loss.components.at("total")));
    EXPECT_EQ(loss.full_resolution.auto_mask.sizes(), (std::vector<int64_t>{1, 1, 64, 96}));
}

TEST(PhaseLoss, NonFiniteInputAbortsWithSnippetIds)
{
    torch::manual_seed(0);
    nets::ComponentSet nets;
    nets.set_trainable(phase_trainable(1));
    auto snippet = tiny_snippet(5, tiny_camera());
    snippet.frames[1] = snippet.frames[1].clone();
    snippet.frames[1][0][3][3] = std::numeric_limits<float>::quiet_NaN();
    Trainer trainer(nets, tiny_config());
    try {
        trainer.step(data::collate({snippet}), 1);
        FAIL() << "expected NumericalFailure";
    } catch (const NumericalFailure& e) {
        ASSERT_EQ(e.snippet_ids().size(), 1u);
        EXPECT_EQ(e.snippet_ids()[0], snippet.id);
    }
}

TEST(Trainer, FrozenComponentsStayBitwiseIdentical)
{
    torch::manual_seed(0);
    nets::ComponentSet nets;
    nets.set_trainable(phase_trainable(2));
    Trainer trainer(nets, tiny_config());
    const auto data = tiny_dataset(2, 10);
    const auto batch = data::collate({data.get(0), data.get(1)});
    std::map<std::string, uint64_t> before;
    for (const char* name : nets::ComponentSet::kNames)
        before[name] = nets.parameter_hash(name);
    for (int i = 0; i < 3; ++i)
        trainer.step(batch, 2);
    EXPECT_EQ(nets.parameter_hash("depth"), before["depth"]);
    EXPECT_EQ(nets.parameter_hash("asa"), before["asa"]);
    EXPECT_EQ(nets.parameter_hash("ego"), before["ego"]);
    EXPECT_NE(nets.parameter_hash("field"), before["field"]);
}

TEST(Trainer, SeededRunsAreBitwiseIdentical)
{
    const auto data = tiny_dataset(4, 20);
    std::vector<uint64_t> hashes;
    for (int run = 0; run < 2; ++run) {
        torch::manual_seed(7);
        nets::ComponentSet nets;
        auto config = tiny_config();
        config.phases = {1};
        config.max_steps_per_phase = 2;
        Trainer trainer(nets, config);
        trainer.run(data);
        uint64_t h = 0;
        for (const char* name : nets::ComponentSet::kNames)
            h = h * 31 + nets.parameter_hash(name);
        hashes.push_back(h);
    }
    EXPECT_EQ(hashes[0], hashes[1]);
}

TEST(Trainer, ResumeFromPhaseCheckpointMatchesUninterruptedRun)
{
    const auto data = tiny_dataset(4, 30);
    const auto val = tiny_dataset(2, 40);
    const auto dir_a = fresh_dir("resume_a");
    const auto config = tiny_config();

    torch::manual_seed(11);
    nets::ComponentSet nets_a;
    Trainer a(nets_a, config, dir_a);
    const auto summary = a.run(data, &val);
    ASSERT_EQ(summary.phase_checkpoints.size(), 3u);
    EXPECT_TRUE(fs::exists(dir_a / "checkpoints" / "phase_2.pt"));
    EXPECT_TRUE(fs::exists(dir_a / "checkpoints" / "epoch_003.pt"));
    EXPECT_EQ(latest_checkpoint(dir_a), dir_a / "checkpoints" / "latest.pt");

    torch::manual_seed(999);
    nets::ComponentSet nets_b;
    Trainer b(nets_b, config, fresh_dir("resume_b"));
    b.load_checkpoint(dir_a / "checkpoints" / "phase_2.pt");
    EXPECT_EQ(b.state().phase_index, 2);
    EXPECT_EQ(b.state().global_step, 2);
    b.run(data, &val);
    EXPECT_EQ(b.state().global_step, a.state().global_step);

    for (const char* name : nets::ComponentSet::kNames)
        EXPECT_EQ(nets_a.parameter_hash(name), nets_b.parameter_hash(name)) << name;
    const auto ma = adam_moments(a.optimizer());
    const auto mb = adam_moments(b.optimizer());
    ASSERT_EQ(ma.size(), mb.size());
    ASSERT_FALSE(ma.empty());
    for (size_t i = 0; i < ma.size(); ++i)
        EXPECT_TRUE(torch::equal(ma[i], mb[i])) << i;

    // Every metrics line parses and the per-epoch records carry validation loss.
    std::ifstream in(dir_a / "metrics.jsonl");
    std::string line;
    int epochs = 0, steps = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.at("type") == "epoch") {
            ++epochs;
            EXPECT_TRUE(j.contains("val_loss"));
        }
        if (j.at("type") == "step")
            ++steps;
    }
    EXPECT_EQ(epochs, 3);
    EXPECT_EQ(steps, 3);
}
