#pragma once

// Snippets, the synthetic moving-object renderer, dataset persistence and
// KITTI-format ingestion.

#include "asanet/geometry.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace asanet::data {

using geometry::CameraIntrinsics;
using geometry::RigidTransform;

/// Three frames <I_{t-1}, I_t, I_{t+1}>, each [3, H, W] in [0, 1].
struct Snippet
{
    std::string id;
    std::array<torch::Tensor, 3> frames;
    CameraIntrinsics intrinsics;

    // Optional ground truth.
    std::optional<torch::Tensor> depth;                     // [1, H, W] meters, 0 = no measurement
    std::optional<std::array<RigidTransform, 2>> poses;     // T_{t->t-1}, T_{t->t+1}
    std::optional<torch::Tensor> moving_mask;               // [1, H, W] in {0, 1}

    const torch::Tensor& target() const { return frames[1]; }
    int64_t height() const { return frames[1].size(1); }
    int64_t width() const { return frames[1].size(2); }

    /// Throws std::invalid_argument when frames or ground truth disagree in size.
    void validate() const;
};

/// Sum of random sinusoids evaluated on plane coordinates in meters.
struct Texture
{
    struct Wave
    {
        double fu = 0.0, fv = 0.0;  // cycles per meter
        double phase = 0.0;
        std::array<double, 3> amplitude{};
    };
    std::array<double, 3> base{0.5, 0.5, 0.5};
    std::vector<Wave> waves;

    /// Random texture whose finest wavelength spans at least `min_wavelength_px`
    /// pixels when seen fronto-parallel at `reference_depth` with focal `focal`.
    static Texture random(uint64_t seed, double reference_depth, double focal, double min_wavelength_px = 6.0,
                          int wave_count = 10);

    std::array<double, 3> color(double u, double v) const;
};

struct SpriteSpec
{
    uint64_t texture_seed = 0;
    double width = 1.0, height = 1.0;      // meters
    Eigen::Vector3d center{0.0, 0.0, 5.0};  // at time t, frame t coordinates
    Eigen::Vector3d velocity{0.0, 0.0, 0.0};  // meters per frame step

    bool moving() const { return velocity.squaredNorm() > 0.0; }
};

struct SyntheticSceneSpec
{
    uint64_t background_seed = 0;
    // Background plane through depth `far_depth` on the top row and
    // `near_depth` on the bottom row of the target view (equal: fronto-parallel).
    double near_depth = 8.0;
    double far_depth = 8.0;
    // Camera motion from t to t+1 as a pose vector (camera at t+1 expressed in
    // frame t); the camera at t-1 is the inverse.
    geometry::PoseVector camera_step = geometry::PoseVector::Zero();
    std::vector<SpriteSpec> sprites;

    /// Throws std::invalid_argument on non-physical values.
    void validate() const;
};

nlohmann::json to_json(const SyntheticSceneSpec& spec);
SyntheticSceneSpec scene_spec_from_json(const nlohmann::json& j);

/// Rendered view of a scene from one camera pose at one time step.
struct RenderedView
{
    torch::Tensor image;     // [3, H, W]
    torch::Tensor depth;     // [1, H, W]
    torch::Tensor object;    // [1, H, W] int64: -1 background, else sprite index
};

/// Render the scene with camera pose `camera` (camera-to-frame-t) at time
/// offset `step` (sprites are at center + step * velocity).
RenderedView render_view(const SyntheticSceneSpec& spec, const RigidTransform& camera, double step,
                         const CameraIntrinsics& k);

/// Render a full snippet with exact depth, relative poses and moving mask.
/// Throws std::invalid_argument when a sprite leaves the view in any frame or
/// fewer than 80% of target pixels stay in view of each source.
Snippet generate_synthetic_snippet(const SyntheticSceneSpec& spec, const CameraIntrinsics& k,
                                   const std::string& id = "synthetic");

struct RandomSceneOptions
{
    int min_sprites = 1;
    int max_sprites = 2;
    double moving_probability = 0.8;
    double min_sprite_speed = 0.15;   // meters per step
    double max_sprite_speed = 0.35;
    double max_forward_step = 0.25;   // camera forward motion, meters
    double max_rotation = 0.02;       // radians per step, per axis
};

/// Random valid scene for intrinsics `k` (retries until the renderer accepts it).
SyntheticSceneSpec random_scene_spec(uint64_t seed, const CameraIntrinsics& k, const RandomSceneOptions& options = {});

/// A hand-written scene added to a synthetic dataset under a fixed id.
struct ExplicitScene
{
    std::string id;
    std::string split = "train";
    SyntheticSceneSpec spec;
};

struct SyntheticDatasetConfig
{
    uint64_t seed = 0;
    int train_count = 50;
    int val_count = 10;
    int width = 192;
    int height = 64;
    double focal = 100.0;
    RandomSceneOptions scene;
    std::vector<ExplicitScene> scenes;  // rendered after the random ones
    int sequence_frames = 0;            // > 0: also write sequences/sequence_00.pt

    CameraIntrinsics intrinsics() const;
};

nlohmann::json to_json(const SyntheticDatasetConfig& config);
SyntheticDatasetConfig synthetic_config_from_json(const nlohmann::json& j);

/// Writes `manifest.json` and `snippets/<id>.pt` under `root`. The manifest
/// lists every snippet with its split, seed and scene spec; it contains no
/// timestamps so identical seeds give identical bytes. A scene the renderer
/// rejects raises std::invalid_argument naming the snippet id.
void write_synthetic_dataset(const SyntheticDatasetConfig& config, const std::filesystem::path& root);

/// Write/read one snippet archive (frames, intrinsics and whatever ground truth is present).
void save_snippet(const Snippet& snippet, const std::filesystem::path& path);
Snippet load_snippet(const std::filesystem::path& path);

/// Random access over snippets.
class SnippetDataset
{
public:
    virtual ~SnippetDataset() = default;
    virtual size_t size() const = 0;
    virtual Snippet get(size_t index) const = 0;
};

class InMemoryDataset : public SnippetDataset
{
public:
    explicit InMemoryDataset(std::vector<Snippet> snippets) : snippets_(std::move(snippets)) {}
    size_t size() const override { return snippets_.size(); }
    Snippet get(size_t index) const override { return snippets_.at(index); }

private:
    std::vector<Snippet> snippets_;
};

/// Load one split ("train", "val" or "test"; test is an alias of val for
/// synthetic data) of a dataset written by write_synthetic_dataset.
std::unique_ptr<SnippetDataset> load_synthetic_split(const std::filesystem::path& root, const std::string& split);

/// A sequence of frames with ground-truth absolute poses (camera-to-world).
struct Sequence
{
    std::string name;
    std::vector<torch::Tensor> frames;  // [3, H, W]
    CameraIntrinsics intrinsics;
    std::vector<RigidTransform> poses;  // may be empty when no ground truth
};

/// Camera sliding along a textured wall with a gently curving path; every frame
/// is rendered with exact poses. Used to exercise the odometry path end to end.
Sequence generate_synthetic_sequence(uint64_t seed, int frame_count, const CameraIntrinsics& k);

void save_sequence(const Sequence& sequence, const std::filesystem::path& path);
Sequence load_sequence(const std::filesystem::path& path);

// ---------------------------------------------------------------- KITTI

/// Parse "key: v1 v2 ..." calibration text. Values are kept as written.
std::map<std::string, std::vector<double>> read_calibration(const std::filesystem::path& path);

/// Intrinsics of the rectified color camera ('l': P_rect_02 / P2, 'r':
/// P_rect_03 / P3) for an image of width x height pixels.
CameraIntrinsics kitti_intrinsics(const std::filesystem::path& calib_file, int width, int height, char side = 'l');

enum class Split
{
    eigen_train,
    eigen_val,
    eigen_test,
    odom_train,
    odom_val,
};

Split parse_split(const std::string& name);

/// One line of a split file: "<folder> <frame index> <l|r>".
struct SplitEntry
{
    std::string folder;
    int64_t frame = 0;
    char side = 'l';
};

std::vector<SplitEntry> read_split_file(const std::filesystem::path& path);

/// Relative location of the split list under a splits directory laid out as
/// eigen_zhou/{train,val}_files.txt, eigen/test_files.txt, odom/{train,val}_files.txt.
std::filesystem::path split_file(const std::filesystem::path& splits_dir, Split split);

struct KittiOptions
{
    int width = 640;
    int height = 192;
    std::string image_extension = ".png";
};

/// Lazily loaded KITTI snippets. Raw-data splits read
/// <root>/<date>/<drive>/image_0{2,3}/data/%010d<ext>; odometry splits read
/// <root>/sequences/%02d/image_{2,3}/%06d<ext>. Eigen test entries carry
/// projected laser depth at the original resolution.
class KittiDataset : public SnippetDataset
{
public:
    KittiDataset(std::filesystem::path root, Split split, std::vector<SplitEntry> entries, KittiOptions options);

    size_t size() const override { return entries_.size(); }
    Snippet get(size_t index) const override;

    const std::vector<SplitEntry>& entries() const { return entries_; }

private:
    std::filesystem::path root_;
    Split split_;
    std::vector<SplitEntry> entries_;
    KittiOptions options_;
};

/// Read a split list and keep the entries whose frames exist under root.
/// Entries with missing calibration are dropped with a warning on stderr.
std::unique_ptr<KittiDataset> load_kitti_split(const std::filesystem::path& root,
                                                const std::filesystem::path& splits_dir, Split split,
                                                const KittiOptions& options = {});

/// Project velodyne points into the rectified left color camera. Returns an
/// [1, H, W] depth map at the calibration's image size; when several points
/// land on one pixel the nearest is kept.
torch::Tensor project_velodyne(const std::filesystem::path& velodyne_bin, const std::filesystem::path& calib_dir,
                               int width, int height);

/// Read an image file as [3, H, W] float in [0, 1], resized when width/height > 0.
torch::Tensor read_image(const std::filesystem::path& path, int width = 0, int height = 0);

/// Pose files: one line per frame, 12 whitespace-separated floats holding the
/// row-major 3x4 [R|t] of the camera-to-world transform.
std::vector<RigidTransform> read_pose_file(const std::filesystem::path& path);
void write_pose_file(const std::vector<RigidTransform>& poses, const std::filesystem::path& path);

/// KITTI odometry sequence images + optional ground-truth poses file.
Sequence load_kitti_odometry_sequence(const std::filesystem::path& root, const std::string& sequence,
                                      const KittiOptions& options = {});

// ---------------------------------------------------------------- preprocessing

/// Indices of frames kept after dropping frames whose mean absolute intensity
/// difference to the last kept frame is below `threshold`. The first frame is
/// always kept; threshold 0 keeps everything.
std::vector<size_t> filter_static_frames(const std::vector<torch::Tensor>& frames, double threshold);

struct AugmentOptions
{
    bool flip = true;
    double flip_probability = 0.5;
    bool color_jitter = true;
    double brightness = 0.2;
    double contrast = 0.2;
    double saturation = 0.2;
};

/// Horizontal mirror of a snippet: frames, intrinsics and ground truth.
Snippet flip_snippet(const Snippet& snippet);

/// Random flip and colour jitter; the same jitter applies to all three frames.
Snippet augment(const Snippet& snippet, const AugmentOptions& options, std::mt19937_64& rng);

/// Stack snippets into batch tensors.
struct Batch
{
    std::vector<std::string> ids;
    torch::Tensor target;                    // [B, 3, H, W]
    std::array<torch::Tensor, 2> sources;    // previous, next
    torch::Tensor intrinsics;                // [B, 3, 3]
};

Batch collate(const std::vector<Snippet>& snippets, const torch::TensorOptions& options = {});

}  // namespace asanet::data
