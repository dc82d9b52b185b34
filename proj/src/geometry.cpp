#include "asanet/geometry.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace asanet::geometry {

void CameraIntrinsics::validate() const
{
    std::ostringstream problem;
    if (!(fx > 0.0) || !(fy > 0.0))
        problem << "focal lengths must be positive (fx=" << fx << ", fy=" << fy << ")";
    else if (width <= 0 || height <= 0)
        problem << "image size must be positive (" << width << "x" << height << ")";
    else if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
        problem << "principal point (" << cx << ", " << cy << ") outside the " << width << "x" << height
                << " image";
    if (!problem.str().empty())
        throw std::invalid_argument("CameraIntrinsics: " + problem.str());
}

CameraIntrinsics CameraIntrinsics::resized(int new_width, int new_height) const
{
    const double sx = static_cast<double>(new_width) / width;
    const double sy = static_cast<double>(new_height) / height;
    CameraIntrinsics out = *this;
    out.fx = fx * sx;
    out.fy = fy * sy;
    out.cx = (cx + 0.5) * sx - 0.5;
    out.cy = (cy + 0.5) * sy - 0.5;
    out.width = new_width;
    out.height = new_height;
    return out;
}

CameraIntrinsics CameraIntrinsics::flipped() const
{
    CameraIntrinsics out = *this;
    out.cx = width - 1.0 - cx;
    return out;
}

Eigen::Matrix3d CameraIntrinsics::matrix() const
{
    Eigen::Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
}

torch::Tensor CameraIntrinsics::tensor(torch::TensorOptions options) const
{
    auto k = torch::zeros({3, 3}, torch::kFloat64);
    auto a = k.accessor<double, 2>();
    a[0][0] = fx;
    a[0][2] = cx;
    a[1][1] = fy;
    a[1][2] = cy;
    a[2][2] = 1.0;
    return k.to(options);
}

bool RigidTransform::is_valid(double tolerance) const
{
    if (!rotation.allFinite() || !translation.allFinite())
        return false;
    const double orthogonality = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    return orthogonality <= tolerance && std::abs(rotation.determinant() - 1.0) <= tolerance;
}

Eigen::Matrix4d RigidTransform::matrix() const
{
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
}

RigidTransform RigidTransform::from_matrix(const Eigen::Matrix4d& m)
{
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b)
{
    return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

RigidTransform invert_transform(const RigidTransform& t)
{
    const Eigen::Matrix3d rt = t.rotation.transpose();
    return {rt, -(rt * t.translation)};
}

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& w)
{
    Eigen::Matrix3d s;
    s << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    return s;
}

constexpr double kSmallAngle = 1e-8;

}  // namespace

RigidTransform pose_vector_to_transform(const PoseVector& v)
{
    const Eigen::Vector3d w = v.head<3>();
    const double theta2 = w.squaredNorm();
    const double theta = std::sqrt(theta2);
    double a = 0.0;
    double b = 0.0;
    if (theta < kSmallAngle) {
        a = 1.0 - theta2 / 6.0;
        b = 0.5 - theta2 / 24.0;
    } else {
        const double half = std::sin(0.5 * theta);
        a = std::sin(theta) / theta;
        b = 2.0 * half * half / theta2;
    }
    const Eigen::Matrix3d k = skew(w);
    return {Eigen::Matrix3d::Identity() + a * k + b * k * k, v.tail<3>()};
}

double rotation_angle(const Eigen::Matrix3d& rotation)
{
    const Eigen::Vector3d vee(rotation(2, 1) - rotation(1, 2), rotation(0, 2) - rotation(2, 0),
                              rotation(1, 0) - rotation(0, 1));
    const double cos_theta = 0.5 * (rotation.trace() - 1.0);
    return std::atan2(0.5 * vee.norm(), cos_theta);
}

Eigen::Vector3d rotation_log(const Eigen::Matrix3d& rotation)
{
    const Eigen::Vector3d vee(rotation(2, 1) - rotation(1, 2), rotation(0, 2) - rotation(2, 0),
                              rotation(1, 0) - rotation(0, 1));
    const double sin_theta = 0.5 * vee.norm();
    const double cos_theta = 0.5 * (rotation.trace() - 1.0);
    const double theta = std::atan2(sin_theta, cos_theta);
    if (theta < 1e-6)
        return 0.5 * vee;  // first order: R - R^T = 2 [w]_x
    if (std::numbers::pi - theta > 1e-3)
        return (theta / (2.0 * std::sin(theta))) * vee;

    // Near pi the antisymmetric part vanishes; read the axis off R + I = 2 a a^T
    // (up to O(pi - theta)) and fix its sign with vee.
    const Eigen::Matrix3d sym = 0.5 * (rotation + Eigen::Matrix3d::Identity());
    Eigen::Index col = 0;
    sym.diagonal().maxCoeff(&col);
    Eigen::Vector3d axis = sym.col(col) / std::sqrt(std::max(sym(col, col), 1e-300));
    axis.normalize();
    if (axis.dot(vee) < 0.0)
        axis = -axis;
    return theta * axis;
}

PoseVector transform_to_pose_vector(const RigidTransform& t)
{
    PoseVector v;
    v.head<3>() = rotation_log(t.rotation);
    v.tail<3>() = t.translation;
    return v;
}

PoseBatch pose_vectors_to_transforms(const torch::Tensor& vectors)
{
    TORCH_CHECK(vectors.dim() == 2 && vectors.size(1) == 6, "pose vectors must be [B, 6], got ",
                vectors.sizes());
    const auto w = vectors.narrow(1, 0, 3);
    const auto theta2 = (w * w).sum(1);
    const auto small = theta2 < kSmallAngle * kSmallAngle;
    // Keep the large-angle branch away from sqrt(0) so its gradient stays finite.
    const auto safe_theta2 = torch::where(small, torch::ones_like(theta2), theta2);
    const auto theta = safe_theta2.sqrt();
    const auto half_sin = torch::sin(0.5 * theta);
    const auto a = torch::where(small, 1.0 - theta2 / 6.0, torch::sin(theta) / theta);
    const auto b = torch::where(small, 0.5 - theta2 / 24.0, 2.0 * half_sin * half_sin / safe_theta2);

    const auto zero = torch::zeros_like(theta2);
    const auto wx = w.select(1, 0);
    const auto wy = w.select(1, 1);
    const auto wz = w.select(1, 2);
    const auto k = torch::stack({zero, -wz, wy, wz, zero, -wx, -wy, wx, zero}, 1).view({-1, 3, 3});
    const auto eye = torch::eye(3, vectors.options()).expand_as(k);
    const auto rotation = eye + a.view({-1, 1, 1}) * k + b.view({-1, 1, 1}) * torch::bmm(k, k);
    return {rotation, vectors.narrow(1, 3, 3)};
}

PoseBatch make_pose_batch(std::span<const RigidTransform> transforms, torch::TensorOptions options)
{
    const auto n = static_cast<int64_t>(transforms.size());
    auto rotation = torch::empty({n, 3, 3}, torch::kFloat64);
    auto translation = torch::empty({n, 3}, torch::kFloat64);
    auto ra = rotation.accessor<double, 3>();
    auto ta = translation.accessor<double, 2>();
    for (int64_t b = 0; b < n; ++b) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j)
                ra[b][i][j] = transforms[b].rotation(i, j);
            ta[b][i] = transforms[b].translation(i);
        }
    }
    return {rotation.to(options), translation.to(options)};
}

RigidTransform pose_batch_element(const PoseBatch& poses, int64_t index)
{
    const auto r = poses.rotation[index].detach().to(torch::kCPU, torch::kFloat64).contiguous();
    const auto t = poses.translation[index].detach().to(torch::kCPU, torch::kFloat64).contiguous();
    RigidTransform out;
    auto ra = r.accessor<double, 2>();
    auto ta = t.accessor<double, 1>();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j)
            out.rotation(i, j) = ra[i][j];
        out.translation(i) = ta[i];
    }
    return out;
}

torch::Tensor disparity_to_depth(const torch::Tensor& disparity, double min_depth, double max_depth)
{
    if (!(min_depth > 0.0) || !(min_depth < max_depth))
        throw std::invalid_argument("disparity_to_depth: need 0 < min_depth < max_depth");
    if (!torch::isfinite(disparity).all().item<bool>())
        throw std::invalid_argument("disparity_to_depth: non-finite disparity values");
    const double min_disp = 1.0 / max_depth;
    const double max_disp = 1.0 / min_depth;
    return 1.0 / (min_disp + (max_disp - min_disp) * disparity);
}

torch::Tensor identity_grid(int64_t batch, int64_t height, int64_t width, torch::TensorOptions options)
{
    const auto xs = torch::arange(width, options);
    const auto ys = torch::arange(height, options);
    const auto mesh = torch::meshgrid({ys, xs}, "ij");
    return torch::stack({mesh[1], mesh[0]}, -1).unsqueeze(0).expand({batch, height, width, 2});
}

torch::Tensor expand_intrinsics(const torch::Tensor& intrinsics, int64_t batch)
{
    if (intrinsics.dim() == 2)
        return intrinsics.unsqueeze(0).expand({batch, 3, 3});
    TORCH_CHECK(intrinsics.dim() == 3 && intrinsics.size(0) == batch, "intrinsics must be [3,3] or [",
                batch, ",3,3], got ", intrinsics.sizes());
    return intrinsics;
}

SampleGrid reproject(const torch::Tensor& depth, const PoseBatch& pose, const torch::Tensor& intrinsics,
                     const std::optional<torch::Tensor>& residual_translation)
{
    TORCH_CHECK(depth.dim() == 4 && depth.size(1) == 1, "depth must be [B,1,H,W], got ", depth.sizes());
    const int64_t batch = depth.size(0);
    const int64_t height = depth.size(2);
    const int64_t width = depth.size(3);
    const int64_t n = height * width;
    TORCH_CHECK(pose.size() == batch, "pose batch ", pose.size(), " does not match depth batch ", batch);

    const auto k = expand_intrinsics(intrinsics, batch).to(depth.dtype());
    const auto k_inv = torch::linalg_inv(k);

    const auto pixels = identity_grid(1, height, width, depth.options().requires_grad(false)).reshape({n, 2});
    const auto homogeneous = torch::cat({pixels.t(), torch::ones({1, n}, depth.options())}, 0);  // [3, N]

    const auto rays = torch::matmul(k_inv, homogeneous);  // [B, 3, N]
    const auto points = rays * depth.reshape({batch, 1, n});
    auto moved = torch::bmm(pose.rotation.to(depth.dtype()), points) +
                 pose.translation.to(depth.dtype()).unsqueeze(-1);
    if (residual_translation) {
        const auto& residual = *residual_translation;
        TORCH_CHECK(residual.dim() == 4 && residual.size(0) == batch && residual.size(1) == 3 &&
                        residual.size(2) == height && residual.size(3) == width,
                    "residual translation must be [B,3,H,W] matching depth, got ", residual.sizes());
        moved = moved + residual.reshape({batch, 3, n});
    }

    const auto z = moved.select(1, 2);
    const auto out_of_frustum = z <= kMinProjectedDepth;
    const auto z_safe = z.clamp_min(kMinProjectedDepth);
    const auto camera = torch::stack({moved.select(1, 0), moved.select(1, 1), z_safe}, 1);
    const auto projected = torch::bmm(k, camera);
    const auto xy = projected.narrow(1, 0, 2) / projected.narrow(1, 2, 1);

    return {xy.permute({0, 2, 1}).reshape({batch, height, width, 2}), z_safe.reshape({batch, 1, height, width}),
            out_of_frustum.reshape({batch, 1, height, width})};
}

torch::Tensor bilinear_sample(const torch::Tensor& source, const torch::Tensor& coords, Padding padding)
{
    TORCH_CHECK(source.dim() == 4, "source must be [B,C,H,W], got ", source.sizes());
    TORCH_CHECK(coords.dim() == 4 && coords.size(3) == 2 && coords.size(0) == source.size(0),
                "coords must be [B,H,W,2] matching the source batch, got ", coords.sizes());
    const int64_t batch = source.size(0);
    const int64_t channels = source.size(1);
    const int64_t src_h = source.size(2);
    const int64_t src_w = source.size(3);
    const int64_t out_h = coords.size(1);
    const int64_t out_w = coords.size(2);
    const int64_t n = out_h * out_w;

    auto x = coords.select(3, 0).reshape({batch, 1, n}).to(source.dtype());
    auto y = coords.select(3, 1).reshape({batch, 1, n}).to(source.dtype());
    if (padding == Padding::border) {
        x = x.clamp(0.0, static_cast<double>(src_w - 1));
        y = y.clamp(0.0, static_cast<double>(src_h - 1));
    }

    // Lower corner; the last row/column uses the cell to its left/above with
    // weight one so exact border coordinates reproduce the border value.
    auto x0 = x.detach().floor();
    auto y0 = y.detach().floor();
    if (padding == Padding::border) {
        x0 = x0.clamp(0.0, static_cast<double>(std::max<int64_t>(src_w - 2, 0)));
        y0 = y0.clamp(0.0, static_cast<double>(std::max<int64_t>(src_h - 2, 0)));
    }
    const auto wx = x - x0;
    const auto wy = y - y0;

    const auto flat = source.reshape({batch, channels, src_h * src_w});
    auto corner = [&](const torch::Tensor& cx, const torch::Tensor& cy) {
        const auto inside = (cx >= 0) & (cx <= src_w - 1) & (cy >= 0) & (cy <= src_h - 1);
        const auto ix = cx.clamp(0, src_w - 1).to(torch::kLong);
        const auto iy = cy.clamp(0, src_h - 1).to(torch::kLong);
        const auto index = (iy * src_w + ix).expand({batch, channels, n});
        auto values = flat.gather(2, index);
        if (padding == Padding::zeros)
            values = values * inside.to(source.dtype());
        return values;
    };

    const auto v00 = corner(x0, y0);
    const auto v10 = corner(x0 + 1, y0);
    const auto v01 = corner(x0, y0 + 1);
    const auto v11 = corner(x0 + 1, y0 + 1);
    const auto top = v00 * (1.0 - wx) + v10 * wx;
    const auto bottom = v01 * (1.0 - wx) + v11 * wx;
    return (top * (1.0 - wy) + bottom * wy).reshape({batch, channels, out_h, out_w});
}

torch::Tensor flow_from_grid(const SampleGrid& grid)
{
    const auto& coords = grid.coords;
    const auto base = identity_grid(coords.size(0), coords.size(1), coords.size(2), coords.options());
    return (coords - base).permute({0, 3, 1, 2});
}

torch::Tensor flow_from_projection(const torch::Tensor& depth, const PoseBatch& pose, const torch::Tensor& intrinsics,
                                   const std::optional<torch::Tensor>& residual_translation)
{
    return flow_from_grid(reproject(depth, pose, intrinsics, residual_translation));
}

}  // namespace asanet::geometry
