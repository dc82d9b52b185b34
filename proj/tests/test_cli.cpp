#include "commands.hpp"
#include "experiment.hpp"

#include "asanet/data.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace asanet;

namespace {

struct Result
{
    int code = 0;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

json read_json(const fs::path& path)
{
    std::ifstream in(path);
    return json::parse(in);
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("asanet_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Small, fast experiment rooted at `dir`.
json tiny_config(const fs::path& dir)
{
    return {
        {"output_dir", (dir / "run").string()},
        {"seed", 3},
        {"dataset", {{"kind", "synthetic"}, {"root", (dir / "data").string()}}},
        {"synthetic",
         {{"train_count", 4}, {"val_count", 2}, {"width", 96}, {"height", 64}, {"focal", 50.0}, {"sequence_frames", 40}}},
        {"training",
         {{"phase_epochs", {1, 1, 1}},
          {"max_steps_per_phase", 1},
          {"optimizer", {{"batch_size", 2}}}}},
        {"evaluation", {{"odometry_lengths", {2.0, 4.0}}, {"odometry_step", 2}, {"latency_trials", 2}}},
    };
}

fs::path write_config(const json& config, const fs::path& path)
{
    std::ofstream out(path);
    out << config.dump(2);
    return path;
}

/// Dataset and a complete three-phase run shared by the evaluation tests.
class CliRun : public ::testing::Test
{
protected:
    static void SetUpTestSuite()
    {
        dir_ = fresh_dir("shared");
        config_ = write_config(tiny_config(dir_), dir_ / "config.json");
        ASSERT_EQ(run_cli({"synth", "--config", config_.string()}).code, 0);
        const auto r = run_cli({"train", "--config", config_.string()});
        ASSERT_EQ(r.code, 0) << r.err;
    }

    static fs::path dir_;
    static fs::path config_;
};

fs::path CliRun::dir_;
fs::path CliRun::config_;

}  // namespace

TEST(CliArgs, HelpAndUnknownCommand)
{
    EXPECT_EQ(run_cli({"--help"}).code, 0);
    EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
    EXPECT_EQ(run_cli({}).code, 1);
}

TEST(CliConfig, UnknownKeyRejected)
{
    const auto dir = fresh_dir("unknown_key");
    auto config = tiny_config(dir);
    config["training"]["learning_rat"] = 1e-3;
    const auto r = run_cli({"synth", "--config", write_config(config, dir / "c.json").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("learning_rat"), std::string::npos) << r.err;
}

TEST(CliConfig, EffectiveConfigRoundTrips)
{
    const auto dir = fresh_dir("roundtrip");
    const auto path = write_config(tiny_config(dir), dir / "c.json");
    ASSERT_EQ(run_cli({"synth", "--config", path.string(), "--seed", "11"}).code, 0);
    const auto effective = read_json(dir / "data" / "config.json");
    EXPECT_EQ(effective.at("seed").get<uint64_t>(), 11u);
    const auto reloaded = cli::experiment_from_json(effective);
    EXPECT_EQ(cli::to_json(reloaded), effective);
    EXPECT_EQ(reloaded.training.seed, 11u);
    EXPECT_EQ(reloaded.synthetic.seed, 11u);
}

TEST(CliSynth, WritesDatasetRefusesNonEmptyAndIsDeterministic)
{
    const auto dir = fresh_dir("synth");
    const auto path = write_config(tiny_config(dir), dir / "c.json");
    ASSERT_EQ(run_cli({"synth", "--config", path.string()}).code, 0);
    const auto manifest = read_json(dir / "data" / "manifest.json");
    EXPECT_EQ(manifest.at("snippets").size(), 6u);
    EXPECT_TRUE(fs::exists(dir / "data" / "snippets" / "train_0003.pt"));
    EXPECT_TRUE(fs::exists(dir / "data" / "snippets" / "val_0001.pt"));
    EXPECT_TRUE(fs::exists(dir / "data" / "sequences" / "sequence_00.pt"));

    const auto first = read_file(dir / "data" / "manifest.json");
    const auto refused = run_cli({"synth", "--config", path.string()});
    EXPECT_EQ(refused.code, 1);
    EXPECT_NE(refused.err.find("--force"), std::string::npos);
    ASSERT_EQ(run_cli({"synth", "--config", path.string(), "--force"}).code, 0);
    EXPECT_EQ(read_file(dir / "data" / "manifest.json"), first);
}

TEST(CliSynth, OutOfViewSpriteNamesTheSnippet)
{
    const auto dir = fresh_dir("out_of_view");
    auto config = tiny_config(dir);
    config["synthetic"]["scenes"] = json::array(
        {{{"id", "bad_sprite"},
          {"spec",
           {{"sprites", json::array({{{"center", {400.0, 0.0, 5.0}}, {"velocity", {0.2, 0.0, 0.0}}}})}}}}});
    const auto r = run_cli({"synth", "--config", write_config(config, dir / "c.json").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("bad_sprite"), std::string::npos) << r.err;
}

TEST(CliTrain, MissingDatasetIsUserError)
{
    const auto dir = fresh_dir("no_data");
    const auto r = run_cli({"train", "--config", write_config(tiny_config(dir), dir / "c.json").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("synth"), std::string::npos);
}

TEST(CliTrain, PhasesFlagStopsAfterPhaseOne)
{
    const auto dir = fresh_dir("phase1");
    const auto path = write_config(tiny_config(dir), dir / "c.json");
    ASSERT_EQ(run_cli({"synth", "--config", path.string()}).code, 0);
    const auto r = run_cli({"train", "--config", path.string(), "--phases", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoints" / "phase_1.pt"));
    EXPECT_FALSE(fs::exists(dir / "run" / "checkpoints" / "phase_2.pt"));
    EXPECT_EQ(read_json(dir / "run" / "config.json").at("training").at("phases"), json::array({1}));
}

TEST(CliTrain, NonFiniteInputExitsWithCodeTwoAndSnippetId)
{
    const auto dir = fresh_dir("nan");
    const auto path = write_config(tiny_config(dir), dir / "c.json");
    ASSERT_EQ(run_cli({"synth", "--config", path.string()}).code, 0);
    for (const auto* id : {"train_0000", "train_0001", "train_0002", "train_0003"}) {
        const auto file = dir / "data" / "snippets" / (std::string(id) + ".pt");
        auto snippet = data::load_snippet(file);
        snippet.frames[1] = torch::full_like(snippet.frames[1], std::numeric_limits<float>::quiet_NaN());
        data::save_snippet(snippet, file);
    }
    const auto r = run_cli({"train", "--config", path.string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("train_000"), std::string::npos) << r.err;
}

TEST_F(CliRun, TrainEmitsThreePhaseCheckpointsAndMetrics)
{
    for (const auto* name : {"phase_1.pt", "phase_2.pt", "phase_3.pt", "latest.pt"})
        EXPECT_TRUE(fs::exists(dir_ / "run" / "checkpoints" / name)) << name;
    std::ifstream log(dir_ / "run" / "metrics.jsonl");
    int steps = 0;
    for (std::string line; std::getline(log, line);)
        steps += json::parse(line).at("type") == "step";
    EXPECT_EQ(steps, 3);
}

TEST_F(CliRun, ResumeFromPhaseCheckpointCompletesTheSchedule)
{
    const auto out = fresh_dir("resume");
    const auto r = run_cli({"train", "--config", config_.string(), "--output", out.string(), "--checkpoint",
                            (dir_ / "run" / "checkpoints" / "phase_1.pt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(out / "checkpoints" / "phase_3.pt"));
    EXPECT_FALSE(fs::exists(out / "checkpoints" / "phase_1.pt"));

    const auto again = run_cli({"train", "--output", out.string(), "--resume"});
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_NE(again.out.find("after 3 steps"), std::string::npos) << again.out;
}

TEST_F(CliRun, EvalDepthReportsAllMetrics)
{
    const auto r = run_cli({"eval-depth", "--config", config_.string(), "--save-maps"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = read_json(dir_ / "run" / "eval_depth" / "report.json");
    for (const auto* key : {"abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"})
        EXPECT_TRUE(report.at("aggregate").contains(key)) << key;
    EXPECT_EQ(report.at("images").size(), 2u);
    EXPECT_TRUE(fs::exists(dir_ / "run" / "eval_depth" / "maps" / "val_0000_depth.png"));
    EXPECT_TRUE(fs::exists(dir_ / "run" / "eval_depth" / "maps" / "val_0000_disparity.png"));
}

TEST_F(CliRun, EvalDepthOracleGivesExactZerosAndOnes)
{
    const auto out = fresh_dir("oracle_depth");
    const auto r = run_cli({"eval-depth", "--config", config_.string(), "--oracle", "--output", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto agg = read_json(out / "eval_depth" / "report.json").at("aggregate");
    for (const auto* key : {"abs_rel", "sq_rel", "rmse", "rmse_log"})
        EXPECT_EQ(agg.at(key).get<double>(), 0.0) << key;
    for (const auto* key : {"delta1", "delta2", "delta3"})
        EXPECT_EQ(agg.at(key).get<double>(), 1.0) << key;
}

TEST_F(CliRun, EvalDepthMissingGroundTruthFails)
{
    const auto dir = fresh_dir("no_gt");
    fs::copy(dir_ / "data", dir / "data", fs::copy_options::recursive);
    const auto file = dir / "data" / "snippets" / "val_0001.pt";
    auto snippet = data::load_snippet(file);
    snippet.depth.reset();
    data::save_snippet(snippet, file);
    auto config = tiny_config(dir);
    const auto r = run_cli({"eval-depth", "--config", write_config(config, dir / "c.json").string(), "--oracle"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("val_0001"), std::string::npos) << r.err;
}

TEST_F(CliRun, EvalOdomOracleHasZeroErrorAndOnePoseLinePerFrame)
{
    const auto out = fresh_dir("oracle_odom");
    const auto r = run_cli({"eval-odom", "--config", config_.string(), "--oracle", "--output", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    fs::path dir;
    for (const auto& entry : fs::directory_iterator(out))
        dir = entry.path();
    const auto report = read_json(dir / "report.json");
    EXPECT_NEAR(report.at("errors").at("t_err_percent").get<double>(), 0.0, 1e-9);
    EXPECT_NEAR(report.at("errors").at("r_err_deg_per_100m").get<double>(), 0.0, 1e-9);
    EXPECT_GT(report.at("errors").at("segments").get<int>(), 0);
    EXPECT_TRUE(fs::exists(dir / "trajectory.png"));
    std::ifstream poses(dir / "poses.txt");
    int lines = 0;
    for (std::string line; std::getline(poses, line);)
        ++lines;
    EXPECT_EQ(lines, report.at("frames").get<int>());
    EXPECT_EQ(lines, 40);
}

TEST_F(CliRun, EvalOdomWithCheckpointWritesReport)
{
    const auto out = fresh_dir("odom");
    const auto r = run_cli({"eval-odom", "--config", config_.string(), "--output", out.string(), "--checkpoint",
                            (dir_ / "run" / "checkpoints" / "latest.pt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    fs::path dir;
    for (const auto& entry : fs::directory_iterator(out))
        dir = entry.path();
    const auto report = read_json(dir / "report.json");
    EXPECT_TRUE(std::isfinite(report.at("errors").at("t_err_percent").get<double>()));
    EXPECT_GT(report.at("latency_ms").get<double>(), 0.0);
    EXPECT_TRUE(fs::exists(dir / "poses_aligned.txt"));
}

TEST_F(CliRun, ExportMapsWritesSixImagesAndSkipsUnknownIds)
{
    const auto r = run_cli({"export-maps", "--config", config_.string(), "--ids", "train_0000,nope,val_0001"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("nope"), std::string::npos);
    for (const auto* id : {"train_0000", "val_0001"}) {
        for (const auto* name :
             {"input.png", "disparity.png", "auto_mask.png", "dynamic_mask.png", "pe_ego.png", "pe_merged.png"})
            EXPECT_TRUE(fs::exists(dir_ / "run" / "maps" / id / name)) << id << "/" << name;
    }
    const auto report = read_json(dir_ / "run" / "maps" / "report.json");
    EXPECT_EQ(report.at("unknown"), json::array({"nope"}));
    for (const auto& entry : report.at("snippets"))
        EXPECT_LE(entry.at("pe_merged_mean").get<double>(), entry.at("pe_ego_mean").get<double>() + 1e-7);
}

TEST(CliExport, StaticSnippetHasEmptyDynamicMask)
{
    const auto dir = fresh_dir("static");
    auto config = tiny_config(dir);
    config["synthetic"]["scenes"] = json::array(
        {{{"id", "static_scene"}, {"spec", {{"camera_step", {0.0, 0.0, 0.0, 0.0, 0.0, 0.2}}}}}});
    const auto path = write_config(config, dir / "c.json");
    ASSERT_EQ(run_cli({"synth", "--config", path.string()}).code, 0);
    ASSERT_EQ(run_cli({"train", "--config", path.string(), "--phases", "1"}).code, 0);
    const auto r = run_cli({"export-maps", "--config", path.string(), "--ids", "static_scene"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = read_json(dir / "run" / "maps" / "report.json");
    EXPECT_EQ(report.at("snippets").at(0).at("dynamic_fraction").get<double>(), 0.0);
    EXPECT_TRUE(report.at("snippets").at(0).at("iou").is_null());
}
