#include "experiment.hpp"

#include "asanet/json_keys.hpp"

#include <fstream>
#include <stdexcept>

namespace asanet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::propagate_seed()
{
    synthetic.seed = seed;
    training.seed = seed;
}

void ExperimentConfig::validate() const
{
    if (dataset.kind != "synthetic" && dataset.kind != "kitti")
        throw std::invalid_argument("dataset.kind must be 'synthetic' or 'kitti'");
    if (dataset.width <= 0 || dataset.height <= 0 || dataset.width % 32 != 0 || dataset.height % 32 != 0)
        throw std::invalid_argument("dataset width and height must be positive multiples of 32");
    if (dataset.kind == "synthetic" && (synthetic.width % 32 != 0 || synthetic.height % 32 != 0))
        throw std::invalid_argument("synthetic width and height must be multiples of 32");
    if (dataset.kind == "kitti") {
        (void)data::parse_split(dataset.train_split);
        (void)data::parse_split(dataset.val_split);
        (void)data::parse_split(dataset.test_split);
    }
    training.validate();
    if (!(evaluation.depth.max_depth > evaluation.depth.min_depth) || !(evaluation.depth.min_depth >= 0.0))
        throw std::invalid_argument("evaluation depth range must satisfy 0 <= min_depth < max_depth");
    if (evaluation.odometry.step < 1 || evaluation.odometry.lengths.empty())
        throw std::invalid_argument("odometry evaluation needs a step >= 1 and at least one length");
    if (evaluation.latency_trials < 1)
        throw std::invalid_argument("latency_trials must be >= 1");
    if (!(network.pose_scale > 0.0) || network.attention_hidden < 1)
        throw std::invalid_argument("network: pose_scale and attention_hidden must be positive");
}

json to_json(const ExperimentConfig& c)
{
    auto synthetic = data::to_json(c.synthetic);
    synthetic.erase("seed");
    auto training = training::to_json(c.training);
    training.erase("seed");
    return json{
        {"output_dir", c.output_dir.string()},
        {"seed", c.seed},
        {"deterministic", c.deterministic},
        {"dataset",
         {{"kind", c.dataset.kind},
          {"root", c.dataset.root.string()},
          {"splits_dir", c.dataset.splits_dir.string()},
          {"width", c.dataset.width},
          {"height", c.dataset.height},
          {"image_extension", c.dataset.image_extension},
          {"train_split", c.dataset.train_split},
          {"val_split", c.dataset.val_split},
          {"test_split", c.dataset.test_split}}},
        {"synthetic", synthetic},
        {"network",
         {{"backbone", nets::to_string(c.network.backbone)},
          {"squeeze", nets::to_string(c.network.squeeze)},
          {"attention_hidden", c.network.attention_hidden},
          {"share_attention", c.network.share_attention},
          {"pose_scale", c.network.pose_scale},
          {"zero_init_ego", c.network.zero_init_ego},
          {"zero_init_field", c.network.zero_init_field},
          {"pretrained", c.pretrained}}},
        {"training", training},
        {"evaluation",
         {{"min_depth", c.evaluation.depth.min_depth},
          {"max_depth", c.evaluation.depth.max_depth},
          {"median_scale", c.evaluation.depth.median_scale},
          {"garg_crop", c.evaluation.garg_crop},
          {"odometry_lengths", c.evaluation.odometry.lengths},
          {"odometry_step", c.evaluation.odometry.step},
          {"latency_trials", c.evaluation.latency_trials}}},
    };
}

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j)
{
    reject_unknown_keys(j,
                        {"output_dir", "seed", "deterministic", "dataset", "synthetic", "network", "training",
                         "evaluation"},
                        "experiment config");
    ExperimentConfig c;
    if (j.contains("output_dir"))
        c.output_dir = j.at("output_dir").get<std::string>();
    read_if(j, "seed", c.seed);
    read_if(j, "deterministic", c.deterministic);

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        reject_unknown_keys(d,
                            {"kind", "root", "splits_dir", "width", "height", "image_extension", "train_split",
                             "val_split", "test_split"},
                            "dataset");
        read_if(d, "kind", c.dataset.kind);
        if (d.contains("root"))
            c.dataset.root = d.at("root").get<std::string>();
        if (d.contains("splits_dir"))
            c.dataset.splits_dir = d.at("splits_dir").get<std::string>();
        read_if(d, "width", c.dataset.width);
        read_if(d, "height", c.dataset.height);
        read_if(d, "image_extension", c.dataset.image_extension);
        read_if(d, "train_split", c.dataset.train_split);
        read_if(d, "val_split", c.dataset.val_split);
        read_if(d, "test_split", c.dataset.test_split);
    }
    if (j.contains("synthetic")) {
        if (j.at("synthetic").contains("seed"))
            throw std::invalid_argument("synthetic: set the seed at the top level");
        c.synthetic = data::synthetic_config_from_json(j.at("synthetic"));
    }
    if (j.contains("network")) {
        const auto& n = j.at("network");
        reject_unknown_keys(n,
                            {"backbone", "squeeze", "attention_hidden", "share_attention", "pose_scale",
                             "zero_init_ego", "zero_init_field", "pretrained"},
                            "network");
        if (n.contains("backbone"))
            c.network.backbone = nets::parse_backbone(n.at("backbone").get<std::string>());
        if (n.contains("squeeze"))
            c.network.squeeze = nets::parse_squeeze_mode(n.at("squeeze").get<std::string>());
        read_if(n, "attention_hidden", c.network.attention_hidden);
        read_if(n, "share_attention", c.network.share_attention);
        read_if(n, "pose_scale", c.network.pose_scale);
        read_if(n, "zero_init_ego", c.network.zero_init_ego);
        read_if(n, "zero_init_field", c.network.zero_init_field);
        read_if(n, "pretrained", c.pretrained);
    }
    if (j.contains("training")) {
        if (j.at("training").contains("seed"))
            throw std::invalid_argument("training: set the seed at the top level");
        c.training = training::training_config_from_json(j.at("training"));
    }
    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        reject_unknown_keys(e,
                            {"min_depth", "max_depth", "median_scale", "garg_crop", "odometry_lengths",
                             "odometry_step", "latency_trials"},
                            "evaluation");
        read_if(e, "min_depth", c.evaluation.depth.min_depth);
        read_if(e, "max_depth", c.evaluation.depth.max_depth);
        read_if(e, "median_scale", c.evaluation.depth.median_scale);
        read_if(e, "garg_crop", c.evaluation.garg_crop);
        read_if(e, "odometry_lengths", c.evaluation.odometry.lengths);
        read_if(e, "odometry_step", c.evaluation.odometry.step);
        read_if(e, "latency_trials", c.evaluation.latency_trials);
    }
    c.propagate_seed();
    c.validate();
    return c;
}

ExperimentConfig load_experiment(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return experiment_from_json(j);
}

void write_experiment(const ExperimentConfig& config, const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << to_json(config).dump(2) << "\n";
    if (!out)
        throw std::runtime_error("cannot write '" + path.string() + "'");
}

}  // namespace asanet::cli
