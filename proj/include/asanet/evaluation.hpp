#pragma once

// Depth metrics, trajectory accumulation, similarity alignment, odometry
// drift errors and VO latency.

#include "asanet/geometry.hpp"
#include "asanet/networks.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <optional>
#include <span>
#include <vector>

namespace asanet::eval {

using geometry::RigidTransform;

struct DepthEvalOptions
{
    double min_depth = 1e-3;
    double max_depth = 80.0;  // cap
    bool median_scale = true;
};

struct DepthMetrics
{
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rmse = 0.0;
    double rmse_log = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
    double delta3 = 0.0;
    int64_t valid_pixels = 0;
    double scale = 1.0;  // median ratio applied to the prediction
};

/// Metrics over pixels with ground truth in (min_depth, max_depth]. The
/// prediction is median-scaled (optional) and then clamped to the same range.
/// Returns std::nullopt when no pixel is valid. pred and gt must have equal
/// numbers of elements.
std::optional<DepthMetrics> depth_metrics(const torch::Tensor& pred, const torch::Tensor& gt,
                                          const DepthEvalOptions& options = {});

/// Per-image mean of each metric; valid_pixels is summed and scale averaged.
DepthMetrics mean_metrics(std::span<const DepthMetrics> metrics);

nlohmann::json to_json(const DepthMetrics& m);

/// Absolute camera-to-world poses, first pose at frame `first_index`.
struct Trajectory
{
    std::vector<RigidTransform> poses;
    int64_t first_index = 0;

    size_t size() const { return poses.size(); }
};

/// pose_0 = identity, pose_{k+1} = pose_k ∘ relative_k, where relative_k maps
/// frame k+1 coordinates into frame k (the pose of camera k+1 seen from k).
/// Throws std::invalid_argument on an invalid transform.
Trajectory accumulate_trajectory(std::span<const RigidTransform> relative);

/// Inverse of accumulate_trajectory: relative_k = pose_k^{-1} ∘ pose_{k+1}.
std::vector<RigidTransform> relative_motions(const Trajectory& trajectory);

/// x ↦ scale · R x + t.
struct Similarity
{
    double scale = 1.0;
    RigidTransform transform;

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const
    {
        return scale * (transform.rotation * p) + transform.translation;
    }
    /// Similarity applied to every pose: rotations are pre-multiplied by R,
    /// positions mapped by apply().
    Trajectory apply(const Trajectory& trajectory) const;
};

struct Alignment
{
    Similarity similarity;
    Trajectory aligned;
    bool degenerate = false;  // scale-only fallback was used
    double rmse = 0.0;        // position RMSE after alignment
};

/// Least-squares similarity from estimated positions onto reference positions.
/// Falls back to scale-only alignment when the reference positions are
/// collinear or the estimate has no spread. Throws std::invalid_argument on
/// length mismatch or fewer than 3 poses.
Alignment align_umeyama_7dof(const Trajectory& estimated, const Trajectory& reference);

double position_rmse(const Trajectory& a, const Trajectory& b);

struct OdometryOptions
{
    std::vector<double> lengths{100, 200, 300, 400, 500, 600, 700, 800};  // meters
    int step = 10;  // frames between segment starts
};

struct OdometryErrors
{
    double t_err = 0.0;  // percent
    double r_err = 0.0;  // degrees per 100 m
    int64_t segments = 0;
};

/// Mean relative endpoint error over all segments whose reference path length
/// reaches each configured length. std::nullopt when no segment fits.
std::optional<OdometryErrors> odometry_errors(const Trajectory& estimated, const Trajectory& reference,
                                              const OdometryOptions& options = {});

nlohmann::json to_json(const OdometryErrors& e);

/// Intersection over union of two binary masks (> 0.5). std::nullopt when
/// both masks are empty.
std::optional<double> mask_iou(const torch::Tensor& predicted, const torch::Tensor& reference);

// ---------------------------------------------------------------- inference

/// Full-resolution disparity of images [B, 3, H, W] in evaluation mode.
torch::Tensor predict_disparity(nets::ComponentSet& nets, const torch::Tensor& images);

/// Relative motions between consecutive frames from the VO path (ASANet
/// encoder + ego decoder): element k is the pose of camera k+1 in frame k.
std::vector<RigidTransform> predict_relative_motions(nets::ComponentSet& nets,
                                                     const std::vector<torch::Tensor>& frames);

struct LatencyResult
{
    double mean_ms = 0.0;
    int trials = 0;
};

/// Mean wall-clock time of one VO forward (encoder + ego decoder) on a random
/// [1, 3, height, width] pair, after `warmup` untimed runs. Throws
/// std::logic_error if the field decoder runs during the measurement.
LatencyResult inference_latency(nets::ComponentSet& nets, int trials, int height, int width, int warmup = 10);

}  // namespace asanet::eval
