#include "images.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace asanet::cli {

namespace fs = std::filesystem;

namespace {

torch::Tensor as_plane(const torch::Tensor& map)
{
    auto t = map.detach().to(torch::kCPU, torch::kFloat64);
    if (t.dim() == 3 && t.size(0) == 1)
        t = t[0];
    if (t.dim() != 2)
        throw std::invalid_argument("expected an [H, W] or [1, H, W] map");
    return t.contiguous();
}

cv::Mat to_mat(const torch::Tensor& plane)
{
    cv::Mat m(static_cast<int>(plane.size(0)), static_cast<int>(plane.size(1)), CV_64F,
              const_cast<double*>(plane.data_ptr<double>()));
    return m.clone();
}

void save(const cv::Mat& image, const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), image))
        throw std::runtime_error("cannot write image '" + path.string() + "'");
}

}  // namespace

void write_rgb(const torch::Tensor& image, const fs::path& path)
{
    if (image.dim() != 3 || image.size(0) != 3)
        throw std::invalid_argument("write_rgb expects [3, H, W]");
    auto hwc = (image.detach().to(torch::kCPU, torch::kFloat32).clamp(0, 1) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    save(bgr, path);
}

void write_colormap(const torch::Tensor& map, const fs::path& path, double vmax)
{
    const auto plane = as_plane(map);
    if (vmax <= 0.0) {
        const auto flat = plane.reshape({-1});
        vmax = flat.numel() > 0 ? torch::quantile(flat, 0.95).item<double>() : 1.0;
        if (!(vmax > 0.0))
            vmax = std::max(flat.max().item<double>(), 1e-12);
    }
    cv::Mat scaled;
    to_mat(plane).convertTo(scaled, CV_8U, 255.0 / vmax);  // saturating
    cv::Mat colored;
    cv::applyColorMap(scaled, colored, cv::COLORMAP_MAGMA);
    save(colored, path);
}

void write_mask(const torch::Tensor& mask, const fs::path& path)
{
    const auto plane = as_plane(mask);
    cv::Mat binary;
    cv::threshold(to_mat(plane), binary, 0.5, 255.0, cv::THRESH_BINARY);
    cv::Mat out;
    binary.convertTo(out, CV_8U);
    save(out, path);
}

void write_depth16(const torch::Tensor& depth, const fs::path& path)
{
    const auto plane = as_plane(depth);
    cv::Mat out;
    to_mat(plane).convertTo(out, CV_16U, 256.0);  // rounds and saturates
    save(out, path);
}

void write_trajectory_plot(const eval::Trajectory& reference, const eval::Trajectory& estimated,
                           const fs::path& path, int size)
{
    double min_x = 0, max_x = 0, min_z = 0, max_z = 0;
    bool first = true;
    for (const auto* traj : {&reference, &estimated}) {
        for (const auto& pose : traj->poses) {
            const double x = pose.translation.x(), z = pose.translation.z();
            if (first) {
                min_x = max_x = x;
                min_z = max_z = z;
                first = false;
            }
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_z = std::min(min_z, z);
            max_z = std::max(max_z, z);
        }
    }
    const int margin = 40;
    const double span = std::max({max_x - min_x, max_z - min_z, 1e-6});
    const double scale = (size - 2 * margin) / span;
    const double cx = 0.5 * (min_x + max_x), cz = 0.5 * (min_z + max_z);
    auto to_pixel = [&](const geometry::RigidTransform& pose) {
        return cv::Point(static_cast<int>(std::lround(size / 2.0 + (pose.translation.x() - cx) * scale)),
                         static_cast<int>(std::lround(size / 2.0 - (pose.translation.z() - cz) * scale)));
    };
    cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
    auto draw = [&](const eval::Trajectory& traj, const cv::Scalar& color) {
        std::vector<cv::Point> points;
        for (const auto& pose : traj.poses)
            points.push_back(to_pixel(pose));
        if (points.size() >= 2)
            cv::polylines(canvas, points, false, color, 2, cv::LINE_AA);
        if (!points.empty())
            cv::circle(canvas, points.front(), 5, cv::Scalar(0, 0, 0), cv::FILLED);
    };
    draw(reference, cv::Scalar(60, 160, 60));
    draw(estimated, cv::Scalar(40, 40, 220));
    cv::putText(canvas, "ground truth", {margin, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(60, 160, 60), 2);
    cv::putText(canvas, "estimate", {margin + 170, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(40, 40, 220), 2);
    save(canvas, path);
}

}  // namespace asanet::cli
