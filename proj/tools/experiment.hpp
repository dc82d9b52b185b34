#pragma once

// Experiment configuration shared by every subcommand.

#include "asanet/data.hpp"
#include "asanet/evaluation.hpp"
#include "asanet/networks.hpp"
#include "asanet/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace asanet::cli {

struct DatasetSection
{
    std::string kind = "synthetic";  // synthetic | kitti
    std::filesystem::path root = "data/desk";
    std::filesystem::path splits_dir = "splits";  // kitti only
    int width = 640;                              // kitti only
    int height = 192;                             // kitti only
    std::string image_extension = ".png";         // kitti only
    std::string train_split = "eigen_train";      // kitti only
    std::string val_split = "eigen_val";          // kitti only
    std::string test_split = "eigen_test";        // kitti only
};

struct EvaluationSection
{
    eval::DepthEvalOptions depth;
    bool garg_crop = true;  // KITTI Eigen test only
    eval::OdometryOptions odometry;
    int latency_trials = 1000;
};

struct ExperimentConfig
{
    std::filesystem::path output_dir = "runs/default";
    uint64_t seed = 0;
    bool deterministic = true;
    DatasetSection dataset;
    data::SyntheticDatasetConfig synthetic;
    nets::NetworkConfig network;
    std::string pretrained;  // torch-pickled ResNet state dict, optional
    training::TrainingConfig training;
    EvaluationSection evaluation;

    /// Copy the top-level seed into the sections that consume one.
    void propagate_seed();
    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
void write_experiment(const ExperimentConfig& config, const std::filesystem::path& path);

}  // namespace asanet::cli
