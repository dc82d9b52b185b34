#include "asanet/evaluation.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace asanet::eval {

namespace {

double median(std::vector<double> v)
{
    const size_t n = v.size();
    const size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (n % 2 == 1)
        return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

std::vector<double> to_vector(const torch::Tensor& t)
{
    const auto flat = t.detach().to(torch::kCPU, torch::kFloat64).contiguous().view(-1);
    const auto* p = flat.data_ptr<double>();
    return {p, p + flat.numel()};
}

}  // namespace

std::optional<DepthMetrics> depth_metrics(const torch::Tensor& pred, const torch::Tensor& gt,
                                          const DepthEvalOptions& options)
{
    if (!(options.max_depth > options.min_depth) || !(options.min_depth >= 0.0))
        throw std::invalid_argument("depth evaluation range must satisfy 0 <= min < max");
    if (pred.numel() != gt.numel())
        throw std::invalid_argument("prediction and ground truth differ in size");
    const auto p_all = to_vector(pred);
    const auto g_all = to_vector(gt);

    std::vector<double> p, g;
    for (size_t i = 0; i < g_all.size(); ++i) {
        if (g_all[i] > options.min_depth && g_all[i] <= options.max_depth) {
            p.push_back(p_all[i]);
            g.push_back(g_all[i]);
        }
    }
    if (g.empty())
        return std::nullopt;

    DepthMetrics m;
    m.valid_pixels = static_cast<int64_t>(g.size());
    if (options.median_scale) {
        const double mp = median(p);
        if (!(mp > 0.0) || !std::isfinite(mp))
            throw std::invalid_argument("prediction median must be positive and finite");
        m.scale = median(g) / mp;
    }
    const double d1 = 1.25, d2 = 1.25 * 1.25, d3 = 1.25 * 1.25 * 1.25;
    double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0, a1 = 0, a2 = 0, a3 = 0;
    for (size_t i = 0; i < g.size(); ++i) {
        const double pi = std::clamp(p[i] * m.scale, options.min_depth, options.max_depth);
        const double gi = g[i];
        const double diff = pi - gi;
        abs_rel += std::abs(diff) / gi;
        sq_rel += diff * diff / gi;
        sq += diff * diff;
        const double dl = std::log(pi) - std::log(gi);
        sq_log += dl * dl;
        const double ratio = std::max(pi / gi, gi / pi);
        a1 += ratio < d1;
        a2 += ratio < d2;
        a3 += ratio < d3;
    }
    const double n = static_cast<double>(g.size());
    m.abs_rel = abs_rel / n;
    m.sq_rel = sq_rel / n;
    m.rmse = std::sqrt(sq / n);
    m.rmse_log = std::sqrt(sq_log / n);
    m.delta1 = a1 / n;
    m.delta2 = a2 / n;
    m.delta3 = a3 / n;
    return m;
}

DepthMetrics mean_metrics(std::span<const DepthMetrics> metrics)
{
    DepthMetrics out;
    out.scale = 0.0;
    if (metrics.empty())
        return out;
    for (const auto& m : metrics) {
        out.abs_rel += m.abs_rel;
        out.sq_rel += m.sq_rel;
        out.rmse += m.rmse;
        out.rmse_log += m.rmse_log;
        out.delta1 += m.delta1;
        out.delta2 += m.delta2;
        out.delta3 += m.delta3;
        out.valid_pixels += m.valid_pixels;
        out.scale += m.scale;
    }
    const double n = static_cast<double>(metrics.size());
    out.abs_rel /= n;
    out.sq_rel /= n;
    out.rmse /= n;
    out.rmse_log /= n;
    out.delta1 /= n;
    out.delta2 /= n;
    out.delta3 /= n;
    out.scale /= n;
    return out;
}

nlohmann::json to_json(const DepthMetrics& m)
{
    return {{"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel}, {"rmse", m.rmse},           {"rmse_log", m.rmse_log},
            {"delta1", m.delta1},   {"delta2", m.delta2}, {"delta3", m.delta3},       {"valid_pixels", m.valid_pixels},
            {"scale", m.scale}};
}

// ---------------------------------------------------------------- trajectories

Trajectory accumulate_trajectory(std::span<const RigidTransform> relative)
{
    Trajectory out;
    out.poses.reserve(relative.size() + 1);
    out.poses.push_back(RigidTransform::identity());
    for (size_t k = 0; k < relative.size(); ++k) {
        if (!relative[k].is_valid(1e-5))
            throw std::invalid_argument("relative motion " + std::to_string(k) + " is not a rigid transform");
        out.poses.push_back(geometry::compose(out.poses.back(), relative[k]));
    }
    return out;
}

std::vector<RigidTransform> relative_motions(const Trajectory& trajectory)
{
    std::vector<RigidTransform> out;
    for (size_t k = 0; k + 1 < trajectory.size(); ++k)
        out.push_back(geometry::compose(geometry::invert_transform(trajectory.poses[k]), trajectory.poses[k + 1]));
    return out;
}

Trajectory Similarity::apply(const Trajectory& trajectory) const
{
    Trajectory out;
    out.first_index = trajectory.first_index;
    for (const auto& pose : trajectory.poses) {
        RigidTransform p;
        p.rotation = transform.rotation * pose.rotation;
        p.translation = apply(pose.translation);
        out.poses.push_back(p);
    }
    return out;
}

double position_rmse(const Trajectory& a, const Trajectory& b)
{
    if (a.size() != b.size() || a.size() == 0)
        throw std::invalid_argument("trajectories must be non-empty and of equal length");
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        sum += (a.poses[i].translation - b.poses[i].translation).squaredNorm();
    return std::sqrt(sum / static_cast<double>(a.size()));
}

Alignment align_umeyama_7dof(const Trajectory& estimated, const Trajectory& reference)
{
    const size_t n = estimated.size();
    if (n != reference.size())
        throw std::invalid_argument("trajectories differ in length");
    if (n < 3)
        throw std::invalid_argument("alignment needs at least 3 poses");

    Eigen::Vector3d mu_x = Eigen::Vector3d::Zero(), mu_y = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < n; ++i) {
        mu_x += estimated.poses[i].translation;
        mu_y += reference.poses[i].translation;
    }
    mu_x /= static_cast<double>(n);
    mu_y /= static_cast<double>(n);

    Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
    Eigen::Matrix3d ref_scatter = Eigen::Matrix3d::Zero();
    double var_x = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d dx = estimated.poses[i].translation - mu_x;
        const Eigen::Vector3d dy = reference.poses[i].translation - mu_y;
        sigma += dy * dx.transpose();
        ref_scatter += dy * dy.transpose();
        var_x += dx.squaredNorm();
    }
    sigma /= static_cast<double>(n);
    ref_scatter /= static_cast<double>(n);
    var_x /= static_cast<double>(n);

    Alignment out;
    const Eigen::JacobiSVD<Eigen::Matrix3d> ref_svd(ref_scatter);
    const auto ref_sv = ref_svd.singularValues();
    const bool collinear = !(ref_sv(1) > 1e-12 * std::max(ref_sv(0), 1e-300));
    if (collinear || !(var_x > 1e-300)) {
        // Scale-only fallback: s = <x, y> / <x, x> over positions.
        double xy = 0.0, xx = 0.0;
        for (size_t i = 0; i < n; ++i) {
            xy += estimated.poses[i].translation.dot(reference.poses[i].translation);
            xx += estimated.poses[i].translation.squaredNorm();
        }
        out.similarity.scale = xx > 0.0 ? xy / xx : 1.0;
        out.degenerate = true;
    } else {
        const Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
        if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0)
            s(2, 2) = -1.0;
        const Eigen::Matrix3d r = svd.matrixU() * s * svd.matrixV().transpose();
        const double c = (svd.singularValues().asDiagonal() * s).trace() / var_x;
        out.similarity.scale = c;
        out.similarity.transform.rotation = r;
        out.similarity.transform.translation = mu_y - c * r * mu_x;
    }
    out.aligned = out.similarity.apply(estimated);
    out.rmse = position_rmse(out.aligned, reference);
    return out;
}

std::optional<OdometryErrors> odometry_errors(const Trajectory& estimated, const Trajectory& reference,
                                              const OdometryOptions& options)
{
    const size_t n = reference.size();
    if (estimated.size() != n)
        throw std::invalid_argument("trajectories differ in length");
    if (options.step < 1)
        throw std::invalid_argument("segment step must be >= 1");
    for (double len : options.lengths) {
        if (!(len > 0.0))
            throw std::invalid_argument("segment lengths must be positive");
    }
    if (n < 2)
        return std::nullopt;

    std::vector<double> dist(n, 0.0);
    for (size_t i = 1; i < n; ++i)
        dist[i] = dist[i - 1] + (reference.poses[i].translation - reference.poses[i - 1].translation).norm();

    double t_sum = 0.0, r_sum = 0.0;
    int64_t count = 0;
    for (size_t first = 0; first < n; first += static_cast<size_t>(options.step)) {
        for (double len : options.lengths) {
            size_t last = n;
            for (size_t i = first; i < n; ++i) {
                if (dist[i] > dist[first] + len) {
                    last = i;
                    break;
                }
            }
            if (last == n)
                continue;
            const auto delta_ref = geometry::compose(geometry::invert_transform(reference.poses[first]),
                                                     reference.poses[last]);
            const auto delta_est = geometry::compose(geometry::invert_transform(estimated.poses[first]),
                                                     estimated.poses[last]);
            const auto err = geometry::compose(geometry::invert_transform(delta_est), delta_ref);
            t_sum += err.translation.norm() / len;
            r_sum += geometry::rotation_angle(err.rotation) / len;
            ++count;
        }
    }
    if (count == 0)
        return std::nullopt;
    OdometryErrors out;
    out.segments = count;
    out.t_err = 100.0 * t_sum / static_cast<double>(count);
    out.r_err = 100.0 * (180.0 / std::numbers::pi) * r_sum / static_cast<double>(count);
    return out;
}

nlohmann::json to_json(const OdometryErrors& e)
{
    return {{"t_err_percent", e.t_err}, {"r_err_deg_per_100m", e.r_err}, {"segments", e.segments}};
}

std::optional<double> mask_iou(const torch::Tensor& predicted, const torch::Tensor& reference)
{
    if (predicted.numel() != reference.numel())
        throw std::invalid_argument("mask_iou: masks differ in size");
    const auto a = predicted.reshape({-1}) > 0.5;
    const auto b = reference.reshape({-1}) > 0.5;
    const auto uni = (a | b).sum().item<int64_t>();
    if (uni == 0)
        return std::nullopt;
    return static_cast<double>((a & b).sum().item<int64_t>()) / static_cast<double>(uni);
}

// ---------------------------------------------------------------- inference

namespace {

/// Eval mode for the duration of a scope, flags restored afterwards.
struct EvalScope
{
    explicit EvalScope(nets::ComponentSet& n) : nets(n) { nets.eval(); }
    ~EvalScope() { nets.restore_modes(); }
    nets::ComponentSet& nets;
    torch::NoGradGuard no_grad;
};

}  // namespace

torch::Tensor predict_disparity(nets::ComponentSet& nets, const torch::Tensor& images)
{
    EvalScope scope(nets);
    return nets.depth(images).front();
}

std::vector<RigidTransform> predict_relative_motions(nets::ComponentSet& nets, const std::vector<torch::Tensor>& frames)
{
    EvalScope scope(nets);
    std::vector<RigidTransform> out;
    const size_t chunk = 8;
    for (size_t start = 0; start + 1 < frames.size(); start += chunk) {
        std::vector<torch::Tensor> targets, sources;
        for (size_t k = start; k < std::min(start + chunk, frames.size() - 1); ++k) {
            targets.push_back(frames[k + 1]);
            sources.push_back(frames[k]);
        }
        // Fed as (target = k+1, source = k), the network predicts the
        // transform from frame k+1 into frame k: the pose of k+1 seen from k.
        const auto motion = nets::motion_forward(nets, torch::stack(targets), torch::stack(sources), false);
        const auto v = motion.ego_motion.to(torch::kFloat64).contiguous();
        for (int64_t i = 0; i < v.size(0); ++i) {
            geometry::PoseVector pv;
            for (int j = 0; j < 6; ++j)
                pv(j) = v[i][j].item<double>();
            out.push_back(geometry::pose_vector_to_transform(pv));
        }
    }
    return out;
}

LatencyResult inference_latency(nets::ComponentSet& nets, int trials, int height, int width, int warmup)
{
    if (trials < 1)
        throw std::invalid_argument("latency needs at least one trial");
    EvalScope scope(nets);
    const auto target = torch::rand({1, 3, height, width});
    const auto source = torch::rand({1, 3, height, width});
    for (int i = 0; i < warmup; ++i)
        (void)nets::motion_forward(nets, target, source, false);

    const auto field_calls = nets.field->call_count();
    double total_ms = 0.0;
    for (int i = 0; i < trials; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = nets::motion_forward(nets, target, source, false);
        (void)out.ego_motion.sum().item<float>();
        const auto t1 = std::chrono::steady_clock::now();
        total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    if (nets.field->call_count() != field_calls)
        throw std::logic_error("the field decoder ran during the VO latency measurement");
    return {total_ms / trials, trials};
}

}  // namespace asanet::eval
