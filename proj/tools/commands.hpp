#pragma once

// Subcommands of the asanet tool.

#include "experiment.hpp"

#include "asanet/data.hpp"
#include "asanet/networks.hpp"
#include "asanet/training.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace asanet::cli {

enum ExitCode
{
    kSuccess = 0,
    kUserError = 1,
    kNumericalFailure = 2,
};

/// Parse and run one command line (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Diagnostic maps of one snippet under phase-3 transformations.
struct SnippetMaps
{
    torch::Tensor disparity;     // [1, H, W]
    torch::Tensor auto_mask;     // [1, H, W]
    torch::Tensor dynamic_mask;  // [1, H, W]
    torch::Tensor pe_ego;        // [1, H, W] min over sources, ego-motion only
    torch::Tensor pe_merged;     // [1, H, W] min over sources after the merge
    std::optional<double> iou;   // dynamic mask vs the ground-truth moving mask
};

SnippetMaps compute_snippet_maps(nets::ComponentSet& nets, const data::Snippet& snippet,
                                 const training::LossOptions& options);

/// Seed the global generators and toggle deterministic kernels.
void apply_determinism(const ExperimentConfig& config);

/// Networks for a config, with pretrained encoder weights when configured.
std::unique_ptr<nets::ComponentSet> make_networks(const ExperimentConfig& config, std::ostream& log);

/// Load network weights from a training checkpoint.
void load_weights(nets::ComponentSet& nets, const std::filesystem::path& checkpoint);

}  // namespace asanet::cli
