#pragma once

// Phase objectives, the three-phase schedule, the optimisation loop and
// checkpointing.

#include "asanet/data.hpp"
#include "asanet/geometry.hpp"
#include "asanet/losses.hpp"
#include "asanet/networks.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace asanet::training {

/// Raised when a loss becomes NaN or infinite.
class NumericalFailure : public std::runtime_error
{
public:
    NumericalFailure(const std::string& what, std::vector<std::string> snippet_ids)
        : std::runtime_error(what), snippet_ids_(std::move(snippet_ids))
    {
    }
    const std::vector<std::string>& snippet_ids() const { return snippet_ids_; }

private:
    std::vector<std::string> snippet_ids_;
};

/// Component flags for phase 1 (depth, asa, ego), 2 (field) or 3 (all).
std::map<std::string, bool> phase_trainable(int phase);

struct PhaseSpec
{
    int id = 1;
    int epochs = 10;

    std::map<std::string, bool> trainable() const { return phase_trainable(id); }
};

struct OptimizerConfig
{
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double decay_factor = 10.0;
    int decay_epoch = 15;  // global epoch at which the rate is divided
    int batch_size = 4;
    double gradient_clip = 0.0;  // max global norm, 0 disables

    void validate(int total_epochs) const;
};

/// Learning rate as a pure function of the global epoch counter.
double learning_rate_at(const OptimizerConfig& config, int global_epoch);

struct DepthRange
{
    double min_depth = 0.1;
    double max_depth = 100.0;
};

// ---------------------------------------------------------------- objectives

/// Everything a phase objective needs at one scale. Depth and disparity are
/// full resolution; poses and residuals are per source view.
struct ObjectiveInputs
{
    torch::Tensor target;                        // [B, 3, H, W]
    std::vector<torch::Tensor> sources;          // [B, 3, H, W] each
    torch::Tensor disparity;                     // [B, 1, H, W], used by the smoothness term
    torch::Tensor depth;                         // [B, 1, H, W]
    std::vector<torch::Tensor> source_depths;    // [B, 1, H, W] each
    std::vector<geometry::PoseBatch> poses;      // ego-motion T_{t->t'}
    std::vector<torch::Tensor> residuals;        // [B, 3, H, W] motion-field residual translations
    torch::Tensor intrinsics;                    // [B, 3, 3] or [3, 3]
};

struct ObjectiveTerms
{
    torch::Tensor total;
    torch::Tensor photometric;   // masked photometric term
    torch::Tensor geometric;     // masked geometric term
    torch::Tensor disparity_smoothness;
    torch::Tensor field_smoothness;

    // Diagnostics, detached, [B, 1, H, W].
    torch::Tensor min_photometric;       // per-pixel min over sources of the objective's pe
    torch::Tensor auto_mask;
    torch::Tensor dynamic_mask;          // union over sources; zeros outside phase 3
    torch::Tensor ego_min_photometric;   // min over sources of pe under ego-motion only
};

/// Warped views and error maps for one source under one transformation.
struct ViewErrors
{
    torch::Tensor warped;  // [B, 3, H, W]
    torch::Tensor pe;      // [B, 1, H, W]
    torch::Tensor ge;      // [B, 1, H, W]
    torch::Tensor flow;    // [B, 2, H, W]
};

ViewErrors view_errors(const torch::Tensor& target, const torch::Tensor& source, const torch::Tensor& depth,
                       const torch::Tensor& source_depth, const geometry::PoseBatch& pose,
                       const torch::Tensor& intrinsics, const std::optional<torch::Tensor>& residual, double alpha);

/// Phase 1: rigid photometric + geometric + disparity smoothness.
ObjectiveTerms rigid_objective(const ObjectiveInputs& in, const losses::LossConfig& config);

/// Phase 2: photometric + geometric under the per-pixel transforms + motion
/// field smoothness on the warping flow.
ObjectiveTerms field_objective(const ObjectiveInputs& in, const losses::LossConfig& config);

/// Phase 3: auto-selected merge of both transformations, both smoothness
/// terms. The field smoothness term sees depth and ego-motion detached.
ObjectiveTerms merged_objective(const ObjectiveInputs& in, const losses::LossConfig& config);

// ---------------------------------------------------------------- phase loss

struct PhaseLoss
{
    torch::Tensor total;  // mean over scales
    std::map<std::string, double> components;  // photometric, geometric, disparity_smoothness,
                                               // field_smoothness, photometric_unmasked, total
    ObjectiveTerms full_resolution;  // terms at scale 0 (diagnostic maps)
};

struct LossOptions
{
    losses::LossConfig loss;
    DepthRange depth_range;
    int scales = 4;
};

/// Run the networks on a batch and evaluate the phase objective. With
/// gradients enabled, throws std::invalid_argument when the component flags do
/// not match the phase.
PhaseLoss compute_phase_loss(int phase, const data::Batch& batch, nets::ComponentSet& nets,
                             const LossOptions& options);

// ---------------------------------------------------------------- schedule

struct TrainingConfig
{
    std::array<int, 3> phase_epochs{10, 10, 10};
    std::vector<int> phases{1, 2, 3};
    OptimizerConfig optimizer;
    LossOptions loss;
    uint64_t seed = 0;
    bool augment = true;
    data::AugmentOptions augment_options;
    int64_t max_steps_per_phase = 0;  // 0: run every epoch to completion
    bool checkpoint_each_epoch = true;
    int log_every = 1;                // steps between metric lines

    int total_epochs() const { return phase_epochs[0] + phase_epochs[1] + phase_epochs[2]; }
    /// Global epoch index of the first epoch of a phase.
    int phase_offset(int phase) const;
    void validate() const;
};

nlohmann::json to_json(const TrainingConfig& config);
/// Fields missing from `j` keep their defaults; unknown keys are rejected.
TrainingConfig training_config_from_json(const nlohmann::json& j);

struct TrainingState
{
    int phase_index = 0;     // index into TrainingConfig::phases
    int epoch_in_phase = 0;  // next epoch to run
    int64_t global_step = 0;
    int64_t steps_in_phase = 0;
    bool finished = false;
};

struct StepRecord
{
    int64_t step = 0;
    int phase = 0;
    int global_epoch = 0;
    double learning_rate = 0.0;
    std::map<std::string, double> components;
};

struct EpochRecord
{
    int phase = 0;
    int global_epoch = 0;
    double mean_loss = 0.0;
    double mean_photometric_unmasked = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_photometric;
};

struct RunSummary
{
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::vector<std::filesystem::path> phase_checkpoints;
};

class Trainer
{
public:
    /// Checkpoints and metrics.jsonl go under output_dir (empty: nothing is written).
    Trainer(nets::ComponentSet& nets, TrainingConfig config, std::filesystem::path output_dir = {});

    /// Run the remaining schedule. Throws NumericalFailure on a non-finite loss.
    RunSummary run(const data::SnippetDataset& train, const data::SnippetDataset* validation = nullptr);

    /// One optimisation step on a batch in the given phase.
    StepRecord step(const data::Batch& batch, int phase);

    /// Mean loss components over a dataset without gradients.
    std::map<std::string, double> evaluate(const data::SnippetDataset& dataset, int phase);

    void save_checkpoint(const std::filesystem::path& path) const;
    void load_checkpoint(const std::filesystem::path& path);

    const TrainingState& state() const { return state_; }
    torch::optim::Adam& optimizer() { return optimizer_; }

    /// Called after every step (for progress output).
    std::function<void(const StepRecord&)> on_step;

private:
    void log_line(const nlohmann::json& line) const;
    int current_global_epoch() const;

    nets::ComponentSet& nets_;
    TrainingConfig config_;
    std::filesystem::path output_dir_;
    torch::optim::Adam optimizer_;
    TrainingState state_;
};

/// Latest checkpoint under a training output directory, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& output_dir);

}  // namespace asanet::training
