#include "asanet/losses.hpp"

#include <sstream>
#include <stdexcept>

namespace asanet::losses {

namespace F = torch::nn::functional;

void LossConfig::validate() const
{
    std::ostringstream problem;
    if (!(alpha >= 0.0 && alpha <= 1.0))
        problem << "alpha must lie in [0, 1], got " << alpha;
    else if (!(eta >= 1.0))
        problem << "eta must be >= 1, got " << eta;
    else if (!(lambda_g >= 0.0) || !(lambda_f >= 0.0) || !(lambda_d >= 0.0))
        problem << "loss weights must be non-negative";
    if (!problem.str().empty())
        throw std::invalid_argument("LossConfig: " + problem.str());
}

namespace {

torch::Tensor window_mean(const torch::Tensor& x, int window)
{
    return F::avg_pool2d(x, F::AvgPool2dFuncOptions(window).stride(1).padding(window / 2).count_include_pad(false));
}

}  // namespace

torch::Tensor ssim_map(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options)
{
    TORCH_CHECK(a.sizes() == b.sizes(), "ssim_map: shape mismatch ", a.sizes(), " vs ", b.sizes());
    TORCH_CHECK(options.window % 2 == 1, "ssim_map: window must be odd");
    const int w = options.window;
    const auto mu_a = window_mean(a, w);
    const auto mu_b = window_mean(b, w);
    const auto var_a = window_mean(a * a, w) - mu_a * mu_a;
    const auto var_b = window_mean(b * b, w) - mu_b * mu_b;
    const auto cov = window_mean(a * b, w) - mu_a * mu_b;
    const auto numerator = (2.0 * mu_a * mu_b + options.c1) * (2.0 * cov + options.c2);
    const auto denominator = (mu_a * mu_a + mu_b * mu_b + options.c1) * (var_a + var_b + options.c2);
    return (numerator / denominator).clamp(-1.0, 1.0).mean(1, /*keepdim=*/true);
}

torch::Tensor photometric_error(const torch::Tensor& target, const torch::Tensor& synthesized, double alpha,
                                const SsimOptions& options)
{
    TORCH_CHECK(target.sizes() == synthesized.sizes(), "photometric_error: shape mismatch ", target.sizes(), " vs ",
                synthesized.sizes());
    const auto l1 = (target - synthesized).abs().mean(1, /*keepdim=*/true);
    if (alpha == 0.0)
        return l1;
    const auto structural = 0.5 * (1.0 - ssim_map(target, synthesized, options));
    return alpha * structural + (1.0 - alpha) * l1;
}

torch::Tensor per_pixel_min(std::span<const torch::Tensor> maps)
{
    TORCH_CHECK(!maps.empty(), "per_pixel_min: need at least one map");
    auto out = maps.front();
    for (size_t i = 1; i < maps.size(); ++i)
        out = torch::minimum(out, maps[i]);
    return out;
}

torch::Tensor auto_mask_from_errors(const torch::Tensor& min_synthesized_error,
                                    const torch::Tensor& min_identity_error)
{
    return (min_synthesized_error < min_identity_error).to(min_synthesized_error.dtype()).detach();
}

torch::Tensor auto_mask(const torch::Tensor& target, std::span<const torch::Tensor> sources,
                        std::span<const torch::Tensor> synthesized, double alpha)
{
    TORCH_CHECK(!sources.empty() && sources.size() == synthesized.size(),
                "auto_mask: need matching, non-empty source and synthesized lists");
    std::vector<torch::Tensor> warped_errors;
    std::vector<torch::Tensor> identity_errors;
    for (size_t i = 0; i < sources.size(); ++i) {
        warped_errors.push_back(photometric_error(target, synthesized[i], alpha));
        identity_errors.push_back(photometric_error(target, sources[i], alpha));
    }
    return auto_mask_from_errors(per_pixel_min(warped_errors), per_pixel_min(identity_errors));
}

torch::Tensor min_reduce_masked(std::span<const torch::Tensor> errors, const torch::Tensor& mask)
{
    return (mask * per_pixel_min(errors)).mean();
}

torch::Tensor normalized_depth_difference(const torch::Tensor& projected_depth, const torch::Tensor& interpolated_depth)
{
    return (projected_depth - interpolated_depth).abs() / (projected_depth + interpolated_depth).clamp_min(1e-7);
}

torch::Tensor geometric_error(const torch::Tensor& depth_target, const torch::Tensor& depth_source,
                              const geometry::PoseBatch& pose, const torch::Tensor& intrinsics,
                              const std::optional<torch::Tensor>& residual_translation)
{
    const auto grid = geometry::reproject(depth_target, pose, intrinsics, residual_translation);
    const auto interpolated = geometry::bilinear_sample(depth_source, grid.coords, geometry::Padding::border);
    return normalized_depth_difference(grid.projected_depth, interpolated);
}

torch::Tensor disparity_smoothness(const torch::Tensor& disparity, const torch::Tensor& image)
{
    TORCH_CHECK(disparity.dim() == 4 && image.dim() == 4, "disparity_smoothness expects [B,C,H,W] inputs");
    const auto mean = disparity.mean({2, 3}, /*keepdim=*/true).clamp_min(1e-7);
    const auto normalized = disparity / mean;
    const int64_t h = disparity.size(2);
    const int64_t w = disparity.size(3);

    auto loss = torch::zeros({}, disparity.options());
    if (w > 1) {
        const auto grad_disp = (normalized.narrow(3, 0, w - 1) - normalized.narrow(3, 1, w - 1)).abs();
        const auto grad_img = (image.narrow(3, 0, w - 1) - image.narrow(3, 1, w - 1)).abs().mean(1, true);
        loss = loss + (grad_disp * torch::exp(-grad_img)).mean();
    }
    if (h > 1) {
        const auto grad_disp = (normalized.narrow(2, 0, h - 1) - normalized.narrow(2, 1, h - 1)).abs();
        const auto grad_img = (image.narrow(2, 0, h - 1) - image.narrow(2, 1, h - 1)).abs().mean(1, true);
        loss = loss + (grad_disp * torch::exp(-grad_img)).mean();
    }
    return loss;
}

namespace {

torch::Tensor second_difference(const torch::Tensor& x, int64_t dim)
{
    const int64_t n = x.size(dim);
    return x.narrow(dim, 0, n - 2) - 2.0 * x.narrow(dim, 1, n - 2) + x.narrow(dim, 2, n - 2);
}

}  // namespace

torch::Tensor motion_field_smoothness(const torch::Tensor& flow, const torch::Tensor& depth)
{
    TORCH_CHECK(flow.dim() == 4 && depth.dim() == 4, "motion_field_smoothness expects [B,C,H,W] inputs");
    TORCH_CHECK(flow.size(2) == depth.size(2) && flow.size(3) == depth.size(3),
                "motion_field_smoothness: flow and depth sizes differ");
    auto loss = torch::zeros({}, flow.options());
    for (const int64_t dim : {3, 2}) {
        if (flow.size(dim) < 3)
            continue;
        const auto weight = torch::exp(-second_difference(depth, dim).abs().mean(1, true));
        loss = loss + (second_difference(flow, dim).abs() * weight).mean();
    }
    return loss;
}

torch::Tensor dynamic_select_mask(const torch::Tensor& pe_ego, const torch::Tensor& pe_field,
                                  const torch::Tensor& ge_ego, const torch::Tensor& ge_field, double eta)
{
    if (!(eta >= 1.0))
        throw std::invalid_argument("dynamic_select_mask: eta must be >= 1");
    TORCH_CHECK(pe_ego.sizes() == pe_field.sizes() && ge_ego.sizes() == ge_field.sizes() &&
                    pe_ego.sizes() == ge_ego.sizes(),
                "dynamic_select_mask: error maps must share one shape");
    torch::NoGradGuard no_grad;
    const auto photometric = pe_ego > eta * pe_field;
    const auto geometric = ge_ego > eta * ge_field;
    return (photometric & geometric).to(pe_ego.dtype());
}

torch::Tensor merge_consistency(const torch::Tensor& err_ego, const torch::Tensor& err_field,
                                const torch::Tensor& dynamic_mask)
{
    TORCH_CHECK(err_ego.sizes() == err_field.sizes(), "merge_consistency: error maps differ in shape");
    return dynamic_mask * err_field + (1.0 - dynamic_mask) * err_ego;
}

}  // namespace asanet::losses
