#pragma once

// Self-supervised objective terms. Every error map is [B, 1, H, W]; images are
// [B, C, H, W] with values in [0, 1].

#include "asanet/geometry.hpp"

#include <torch/torch.h>

#include <span>
#include <vector>

namespace asanet::losses {

struct LossConfig
{
    double alpha = 0.85;      // SSIM share of the photometric error
    double eta = 1.2;         // dynamic selection margin
    double lambda_g = 0.1;    // geometric consistency
    double lambda_f = 0.001;  // motion field smoothness
    double lambda_d = 0.001;  // disparity smoothness

    void validate() const;
};

struct SsimOptions
{
    int window = 3;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

/// Local-window SSIM averaged over channels. Window statistics only use pixels
/// inside the image (no padding values enter the means). Result in [-1, 1].
torch::Tensor ssim_map(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options = {});

/// alpha/2 * (1 - SSIM) + (1 - alpha) * mean-over-channels |a - b|.
torch::Tensor photometric_error(const torch::Tensor& target, const torch::Tensor& synthesized, double alpha,
                                const SsimOptions& options = {});

/// Elementwise minimum across a non-empty list of equally shaped maps.
torch::Tensor per_pixel_min(std::span<const torch::Tensor> maps);

/// 1 where the best reconstruction beats the best unwarped source, strictly.
torch::Tensor auto_mask_from_errors(const torch::Tensor& min_synthesized_error,
                                    const torch::Tensor& min_identity_error);

torch::Tensor auto_mask(const torch::Tensor& target, std::span<const torch::Tensor> sources,
                        std::span<const torch::Tensor> synthesized, double alpha);

/// Mean over all pixels (divided by the total count) of mask * per-pixel min.
torch::Tensor min_reduce_masked(std::span<const torch::Tensor> errors, const torch::Tensor& mask);

/// |projected - interpolated| / (projected + interpolated), denominator
/// floored at 1e-7.
torch::Tensor normalized_depth_difference(const torch::Tensor& projected_depth,
                                          const torch::Tensor& interpolated_depth);

/// Geometric consistency between the target depth moved into the source
/// camera and the source depth sampled where the target pixels land.
torch::Tensor geometric_error(const torch::Tensor& depth_target, const torch::Tensor& depth_source,
                              const geometry::PoseBatch& pose, const torch::Tensor& intrinsics,
                              const std::optional<torch::Tensor>& residual_translation = std::nullopt);

/// First-order edge-aware smoothness of the mean-normalized disparity.
torch::Tensor disparity_smoothness(const torch::Tensor& disparity, const torch::Tensor& image);

/// Second-order edge-aware smoothness of a [B, 2, H, W] flow, weighted by the
/// second differences of depth.
torch::Tensor motion_field_smoothness(const torch::Tensor& flow, const torch::Tensor& depth);

/// 1 where both the photometric and the geometric error under ego-motion
/// strictly exceed eta times the motion-field errors. Carries no gradient.
torch::Tensor dynamic_select_mask(const torch::Tensor& pe_ego, const torch::Tensor& pe_field,
                                  const torch::Tensor& ge_ego, const torch::Tensor& ge_field, double eta);

/// mask * err_field + (1 - mask) * err_ego.
torch::Tensor merge_consistency(const torch::Tensor& err_ego, const torch::Tensor& err_field,
                                const torch::Tensor& dynamic_mask);

}  // namespace asanet::losses
