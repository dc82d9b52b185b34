#pragma once

// PNG exports of images, maps and trajectories.

#include "asanet/evaluation.hpp"

#include <torch/torch.h>

#include <filesystem>

namespace asanet::cli {

/// [3, H, W] in [0, 1] to an 8-bit color PNG.
void write_rgb(const torch::Tensor& image, const std::filesystem::path& path);

/// [H, W] or [1, H, W] map, color-mapped over [0, vmax]. vmax <= 0 uses the
/// 95th percentile of the map.
void write_colormap(const torch::Tensor& map, const std::filesystem::path& path, double vmax = 0.0);

/// Binary mask as black (0) / white (255).
void write_mask(const torch::Tensor& mask, const std::filesystem::path& path);

/// Depth in meters as a 16-bit single-channel PNG holding round(depth * 256).
void write_depth16(const torch::Tensor& depth, const std::filesystem::path& path);

/// Top-down (x, z) plot of a reference and an estimated trajectory.
void write_trajectory_plot(const eval::Trajectory& reference, const eval::Trajectory& estimated,
                           const std::filesystem::path& path, int size = 800);

}  // namespace asanet::cli
