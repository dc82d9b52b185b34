#pragma once

// Pinhole projection, SE(3) handling, warping grids and bilinear sampling.
//
// Frame convention: a transform T_{t->s} maps 3-D points expressed in the
// target camera frame into the source camera frame (X_s = R X_t + t). Pixel
// centers sit at integer coordinates and all grids are in pixels.
//
// Tensor layouts: images and per-pixel maps are [B, C, H, W]; sample grids
// are [B, H, W, 2] holding (x, y); intrinsics are [B, 3, 3] or [3, 3].

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <torch/torch.h>

#include <optional>
#include <span>

namespace asanet::geometry {

/// Camera z below this is clamped and flagged as out of frustum (meters).
inline constexpr double kMinProjectedDepth = 1e-3;

struct CameraIntrinsics
{
    double fx = 0.0;
    double fy = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;

    /// Throws std::invalid_argument when focal lengths or principal point are
    /// out of range.
    void validate() const;

    /// Intrinsics of the same camera after resizing the image to
    /// new_width x new_height (pixel-center convention).
    [[nodiscard]] CameraIntrinsics resized(int new_width, int new_height) const;

    /// Intrinsics after a horizontal image flip.
    [[nodiscard]] CameraIntrinsics flipped() const;

    [[nodiscard]] Eigen::Matrix3d matrix() const;
    [[nodiscard]] torch::Tensor tensor(torch::TensorOptions options = torch::kFloat32) const;
};

struct RigidTransform
{
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static RigidTransform identity() { return {}; }

    /// Orthonormal rotation with unit determinant, finite translation.
    [[nodiscard]] bool is_valid(double tolerance = 1e-6) const;

    [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& point) const
    {
        return rotation * point + translation;
    }

    [[nodiscard]] Eigen::Matrix4d matrix() const;
    static RigidTransform from_matrix(const Eigen::Matrix4d& m);
};

/// a ∘ b: apply b first, then a.
[[nodiscard]] RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
[[nodiscard]] RigidTransform invert_transform(const RigidTransform& t);

using PoseVector = Eigen::Matrix<double, 6, 1>;

/// Axis-angle (radians, first three) + translation (meters, last three).
[[nodiscard]] RigidTransform pose_vector_to_transform(const PoseVector& v);

/// Rotation matrix logarithm, returning the axis-angle vector with angle in [0, pi].
[[nodiscard]] Eigen::Vector3d rotation_log(const Eigen::Matrix3d& rotation);
[[nodiscard]] PoseVector transform_to_pose_vector(const RigidTransform& t);

/// Geodesic rotation angle in radians.
[[nodiscard]] double rotation_angle(const Eigen::Matrix3d& rotation);

/// Batched, differentiable rigid transforms.
struct PoseBatch
{
    torch::Tensor rotation;     // [B, 3, 3]
    torch::Tensor translation;  // [B, 3]

    [[nodiscard]] PoseBatch detached() const { return {rotation.detach(), translation.detach()}; }
    [[nodiscard]] int64_t size() const { return rotation.size(0); }
};

/// Differentiable Rodrigues map for a [B, 6] tensor of pose vectors. Angles
/// below 1e-8 use the Taylor expansion, so gradients stay finite at zero.
[[nodiscard]] PoseBatch pose_vectors_to_transforms(const torch::Tensor& vectors);

[[nodiscard]] PoseBatch make_pose_batch(std::span<const RigidTransform> transforms,
                                        torch::TensorOptions options = torch::kFloat32);
[[nodiscard]] RigidTransform pose_batch_element(const PoseBatch& poses, int64_t index);

/// depth = 1 / (1/max + (1/min - 1/max) * disp). Throws std::invalid_argument
/// on non-finite disparities or an invalid depth range.
[[nodiscard]] torch::Tensor disparity_to_depth(const torch::Tensor& disparity, double min_depth,
                                               double max_depth);

struct SampleGrid
{
    torch::Tensor coords;           // [B, H, W, 2] continuous source-pixel positions (x, y)
    torch::Tensor projected_depth;  // [B, 1, H, W] camera z after the transform
    torch::Tensor out_of_frustum;   // [B, 1, H, W] bool, z was clamped
};

/// [B, H, W, 2] grid whose entry (y, x) is (x, y).
[[nodiscard]] torch::Tensor identity_grid(int64_t batch, int64_t height, int64_t width,
                                          torch::TensorOptions options = torch::kFloat32);

/// Backproject every target pixel with its depth, move it by the transform and
/// project into the source camera. When residual_translation ([B, 3, H, W]) is
/// given, pixel p uses rotation R and translation t + residual(p).
[[nodiscard]] SampleGrid reproject(const torch::Tensor& depth, const PoseBatch& pose,
                                   const torch::Tensor& intrinsics,
                                   const std::optional<torch::Tensor>& residual_translation = std::nullopt);

enum class Padding
{
    border,
    zeros,
};

/// Bilinear interpolation of source ([B, C, Hs, Ws]) at coords ([B, H, W, 2]).
/// Differentiable with respect to both inputs; never throws on out-of-range
/// coordinates.
[[nodiscard]] torch::Tensor bilinear_sample(const torch::Tensor& source, const torch::Tensor& coords,
                                            Padding padding = Padding::border);

/// Per-pixel displacement coords - identity, as [B, 2, H, W].
[[nodiscard]] torch::Tensor flow_from_grid(const SampleGrid& grid);

[[nodiscard]] torch::Tensor flow_from_projection(const torch::Tensor& depth, const PoseBatch& pose,
                                                 const torch::Tensor& intrinsics,
                                                 const std::optional<torch::Tensor>& residual_translation =
                                                     std::nullopt);

/// Broadcast [3, 3] or [B, 3, 3] intrinsics to [batch, 3, 3].
[[nodiscard]] torch::Tensor expand_intrinsics(const torch::Tensor& intrinsics, int64_t batch);

}  // namespace asanet::geometry
