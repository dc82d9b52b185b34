#include "asanet/data.hpp"
#include "asanet/json_keys.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace asanet::data {

namespace fs = std::filesystem;
using nlohmann::json;

void Snippet::validate() const
{
    for (const auto& frame : frames) {
        if (!frame.defined() || frame.dim() != 3 || frame.size(0) != 3)
            throw std::invalid_argument("snippet '" + id + "': frames must be [3, H, W]");
        if (frame.sizes() != frames[1].sizes())
            throw std::invalid_argument("snippet '" + id + "': frames differ in size");
    }
    if (intrinsics.width != width() || intrinsics.height != height())
        throw std::invalid_argument("snippet '" + id + "': intrinsics do not match the frame size");
    const std::vector<int64_t> map_shape{1, height(), width()};
    if (depth && depth->sizes() != map_shape)
        throw std::invalid_argument("snippet '" + id + "': depth must be [1, H, W]");
    if (moving_mask && moving_mask->sizes() != map_shape)
        throw std::invalid_argument("snippet '" + id + "': moving mask must be [1, H, W]");
}

// ---------------------------------------------------------------- textures

Texture Texture::random(uint64_t seed, double reference_depth, double focal, double min_wavelength_px,
                        int wave_count)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Texture texture;
    for (auto& b : texture.base)
        b = 0.3 + 0.4 * unit(rng);
    const double max_frequency = focal / reference_depth / min_wavelength_px;
    for (int i = 0; i < wave_count; ++i) {
        Wave wave;
        // Log-uniform over roughly three octaves below the finest frequency.
        const double magnitude = max_frequency * std::pow(2.0, -3.0 * unit(rng));
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        wave.fu = magnitude * std::cos(angle);
        wave.fv = magnitude * std::sin(angle);
        wave.phase = 2.0 * std::numbers::pi * unit(rng);
        const double strength = 0.28 * (unit(rng) - 0.5);
        for (auto& a : wave.amplitude)
            a = strength * (0.7 + 0.6 * unit(rng));
        texture.waves.push_back(wave);
    }
    return texture;
}

std::array<double, 3> Texture::color(double u, double v) const
{
    std::array<double, 3> c = base;
    for (const auto& wave : waves) {
        const double s = std::sin(2.0 * std::numbers::pi * (wave.fu * u + wave.fv * v) + wave.phase);
        for (int ch = 0; ch < 3; ++ch)
            c[ch] += wave.amplitude[ch] * s;
    }
    for (auto& x : c)
        x = std::clamp(x, 0.0, 1.0);
    return c;
}

// ---------------------------------------------------------------- scene specs

void SyntheticSceneSpec::validate() const
{
    if (!(near_depth > 0.0) || !(far_depth >= near_depth) || !std::isfinite(far_depth))
        throw std::invalid_argument("scene: background depths must satisfy 0 < near <= far");
    if (!camera_step.allFinite())
        throw std::invalid_argument("scene: camera step must be finite");
    for (size_t i = 0; i < sprites.size(); ++i) {
        const auto& s = sprites[i];
        if (!(s.width > 0.0) || !(s.height > 0.0) || !s.center.allFinite() || !s.velocity.allFinite())
            throw std::invalid_argument("scene: sprite " + std::to_string(i) + " has invalid size or motion");
        for (int step : {-1, 0, 1}) {
            if (!(s.center.z() + step * s.velocity.z() > 0.1))
                throw std::invalid_argument("scene: sprite " + std::to_string(i) + " leaves the frustum in depth");
        }
    }
}

namespace {

json vector_json(const Eigen::Vector3d& v)
{
    return json::array({v.x(), v.y(), v.z()});
}

Eigen::Vector3d vector_from_json(const json& j)
{
    if (!j.is_array() || j.size() != 3)
        throw std::invalid_argument("expected a 3-element array");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

json to_json(const SyntheticSceneSpec& spec)
{
    json sprites = json::array();
    for (const auto& s : spec.sprites) {
        sprites.push_back({{"texture_seed", s.texture_seed},
                           {"width", s.width},
                           {"height", s.height},
                           {"center", vector_json(s.center)},
                           {"velocity", vector_json(s.velocity)}});
    }
    json step = json::array();
    for (int i = 0; i < 6; ++i)
        step.push_back(spec.camera_step(i));
    return {{"background_seed", spec.background_seed},
            {"near_depth", spec.near_depth},
            {"far_depth", spec.far_depth},
            {"camera_step", step},
            {"sprites", sprites}};
}

SyntheticSceneSpec scene_spec_from_json(const json& j)
{
    reject_unknown_keys(j, {"background_seed", "near_depth", "far_depth", "camera_step", "sprites"}, "scene spec");
    SyntheticSceneSpec spec;
    spec.background_seed = j.value("background_seed", spec.background_seed);
    spec.near_depth = j.value("near_depth", spec.near_depth);
    spec.far_depth = j.value("far_depth", spec.far_depth);
    if (j.contains("camera_step")) {
        const auto& step = j.at("camera_step");
        if (!step.is_array() || step.size() != 6)
            throw std::invalid_argument("scene spec: camera_step must have 6 entries");
        for (int i = 0; i < 6; ++i)
            spec.camera_step(i) = step[static_cast<size_t>(i)].get<double>();
    }
    if (j.contains("sprites")) {
        for (const auto& s : j.at("sprites")) {
            reject_unknown_keys(s, {"texture_seed", "width", "height", "center", "velocity"}, "sprite spec");
            SpriteSpec sprite;
            sprite.texture_seed = s.value("texture_seed", sprite.texture_seed);
            sprite.width = s.value("width", sprite.width);
            sprite.height = s.value("height", sprite.height);
            if (s.contains("center"))
                sprite.center = vector_from_json(s.at("center"));
            if (s.contains("velocity"))
                sprite.velocity = vector_from_json(s.at("velocity"));
            spec.sprites.push_back(sprite);
        }
    }
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------- renderer

namespace {

struct Plane
{
    Eigen::Vector3d origin;
    Eigen::Vector3d axis_u;
    Eigen::Vector3d axis_v;
    Eigen::Vector3d normal;
};

Plane background_plane(const SyntheticSceneSpec& spec, const CameraIntrinsics& k)
{
    auto ray = [&](double x, double y) { return Eigen::Vector3d((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0); };
    const Eigen::Vector3d top = ray(k.cx, 0.0) * spec.far_depth;
    const Eigen::Vector3d bottom = ray(k.cx, k.height - 1.0) * spec.near_depth;
    Plane plane;
    plane.origin = top;
    plane.axis_u = Eigen::Vector3d::UnitX();
    plane.axis_v = (bottom - top).normalized();
    plane.normal = plane.axis_u.cross(plane.axis_v).normalized();
    return plane;
}

}  // namespace

RenderedView render_view(const SyntheticSceneSpec& spec, const RigidTransform& camera, double step,
                         const CameraIntrinsics& k)
{
    k.validate();
    const int h = k.height;
    const int w = k.width;
    const Plane plane = background_plane(spec, k);
    // The far edge of the plane shows the texture at its smallest scale.
    const Texture background = Texture::random(spec.background_seed, spec.far_depth, std::min(k.fx, k.fy));
    std::vector<Texture> sprite_textures;
    std::vector<Eigen::Vector3d> centers;
    for (const auto& s : spec.sprites) {
        sprite_textures.push_back(Texture::random(s.texture_seed, s.center.z(), std::min(k.fx, k.fy)));
        centers.push_back(s.center + step * s.velocity);
    }

    RenderedView view;
    view.image = torch::empty({3, h, w}, torch::kFloat32);
    view.depth = torch::empty({1, h, w}, torch::kFloat32);
    view.object = torch::full({1, h, w}, -1, torch::kInt64);
    auto image = view.image.accessor<float, 3>();
    auto depth = view.depth.accessor<float, 3>();
    auto object = view.object.accessor<int64_t, 3>();

    const Eigen::Vector3d origin = camera.translation;
    const double plane_offset = plane.normal.dot(plane.origin);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Eigen::Vector3d ray((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
            const Eigen::Vector3d dir = camera.rotation * ray;
            double best = std::numeric_limits<double>::infinity();
            int best_object = -2;
            const double denom = plane.normal.dot(dir);
            if (std::abs(denom) > 1e-12) {
                const double lambda = (plane_offset - plane.normal.dot(origin)) / denom;
                if (lambda > 1e-6) {
                    best = lambda;
                    best_object = -1;
                }
            }
            for (size_t i = 0; i < spec.sprites.size(); ++i) {
                if (std::abs(dir.z()) < 1e-12)
                    continue;
                const double lambda = (centers[i].z() - origin.z()) / dir.z();
                if (!(lambda > 1e-6) || lambda >= best)
                    continue;
                const Eigen::Vector3d hit = origin + lambda * dir;
                if (std::abs(hit.x() - centers[i].x()) <= 0.5 * spec.sprites[i].width &&
                    std::abs(hit.y() - centers[i].y()) <= 0.5 * spec.sprites[i].height) {
                    best = lambda;
                    best_object = static_cast<int>(i);
                }
            }
            if (best_object == -2)
                throw std::invalid_argument("scene: a camera ray hits no surface");
            const Eigen::Vector3d hit = origin + best * dir;
            std::array<double, 3> color;
            if (best_object == -1) {
                const Eigen::Vector3d rel = hit - plane.origin;
                color = background.color(rel.dot(plane.axis_u), rel.dot(plane.axis_v));
            } else {
                const auto& c = centers[static_cast<size_t>(best_object)];
                color = sprite_textures[static_cast<size_t>(best_object)].color(hit.x() - c.x(), hit.y() - c.y());
            }
            for (int ch = 0; ch < 3; ++ch)
                image[ch][y][x] = static_cast<float>(color[static_cast<size_t>(ch)]);
            depth[0][y][x] = static_cast<float>(best);  // ray z component is 1
            object[0][y][x] = best_object;
        }
    }
    return view;
}

Snippet generate_synthetic_snippet(const SyntheticSceneSpec& spec, const CameraIntrinsics& k, const std::string& id)
{
    spec.validate();
    k.validate();
    const RigidTransform next_camera = geometry::pose_vector_to_transform(spec.camera_step);
    const RigidTransform previous_camera = geometry::invert_transform(next_camera);
    const std::array<RigidTransform, 3> cameras{previous_camera, RigidTransform::identity(), next_camera};

    Snippet snippet;
    snippet.id = id;
    snippet.intrinsics = k;
    std::array<torch::Tensor, 3> objects;
    for (int f = 0; f < 3; ++f) {
        auto view = render_view(spec, cameras[static_cast<size_t>(f)], f - 1.0, k);
        snippet.frames[static_cast<size_t>(f)] = view.image;
        objects[static_cast<size_t>(f)] = view.object;
        if (f == 1)
            snippet.depth = view.depth;
    }
    for (size_t i = 0; i < spec.sprites.size(); ++i) {
        for (int f = 0; f < 3; ++f) {
            if (!(objects[static_cast<size_t>(f)] == static_cast<int64_t>(i)).any().item<bool>())
                throw std::invalid_argument("scene '" + id + "': sprite " + std::to_string(i) +
                                            " is not visible in frame " + std::to_string(f - 1));
        }
    }
    // Points move from frame t into camera s by the inverse of camera s's pose.
    snippet.poses = std::array<RigidTransform, 2>{geometry::invert_transform(previous_camera),
                                                  geometry::invert_transform(next_camera)};

    auto mask = torch::zeros({1, k.height, k.width}, torch::kFloat32);
    for (size_t i = 0; i < spec.sprites.size(); ++i) {
        if (spec.sprites[i].moving())
            mask.masked_fill_(objects[1] == static_cast<int64_t>(i), 1.0);
    }
    snippet.moving_mask = mask;

    // Require most of the target to stay in view of both sources.
    const auto depth = snippet.depth->unsqueeze(0).to(torch::kFloat64);
    const auto kt = k.tensor(torch::kFloat64);
    for (size_t s = 0; s < 2; ++s) {
        const auto pose = geometry::make_pose_batch(std::vector{(*snippet.poses)[s]}, torch::kFloat64);
        const auto grid = geometry::reproject(depth, pose, kt);
        const auto x = grid.coords.select(3, 0);
        const auto y = grid.coords.select(3, 1);
        const auto inside = (x >= 0) & (x <= k.width - 1) & (y >= 0) & (y <= k.height - 1) &
                            grid.out_of_frustum.squeeze(1).logical_not();
        const double fraction = inside.to(torch::kFloat64).mean().item<double>();
        if (fraction < 0.8)
            throw std::invalid_argument("scene '" + id + "': only " + std::to_string(fraction) +
                                        " of the target stays in view of a source (need 0.8)");
    }
    snippet.validate();
    return snippet;
}

SyntheticSceneSpec random_scene_spec(uint64_t seed, const CameraIntrinsics& k, const RandomSceneOptions& options)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    for (int attempt = 0; attempt < 100; ++attempt) {
        SyntheticSceneSpec spec;
        spec.background_seed = rng();
        spec.near_depth = uniform(5.0, 8.0);
        spec.far_depth = spec.near_depth * uniform(1.5, 3.0);
        spec.camera_step << uniform(-1.0, 1.0) * options.max_rotation * 0.5,
            uniform(-1.0, 1.0) * options.max_rotation, uniform(-1.0, 1.0) * options.max_rotation * 0.5,
            uniform(-0.05, 0.05), uniform(-0.02, 0.02), options.max_forward_step * uniform(0.4, 1.0);
        const int count = options.min_sprites +
                          static_cast<int>(unit(rng) * (options.max_sprites - options.min_sprites + 1) * 0.9999);
        for (int i = 0; i < count; ++i) {
            SpriteSpec sprite;
            sprite.texture_seed = rng();
            const double z = spec.near_depth * uniform(0.45, 0.85);
            const double view_w = k.width / k.fx * z;
            const double view_h = k.height / k.fy * z;
            sprite.width = view_w * uniform(0.15, 0.3);
            sprite.height = view_h * uniform(0.4, 0.7);
            const double px = k.cx + uniform(-0.3, 0.3) * k.width;
            const double py = k.cy + uniform(-0.15, 0.15) * k.height;
            sprite.center = Eigen::Vector3d((px - k.cx) / k.fx * z, (py - k.cy) / k.fy * z, z);
            if (unit(rng) < options.moving_probability) {
                const double speed = uniform(options.min_sprite_speed, options.max_sprite_speed);
                const double heading = uniform(-0.5, 0.5);
                const double direction = unit(rng) < 0.5 ? -1.0 : 1.0;
                sprite.velocity =
                    Eigen::Vector3d(direction * speed * std::cos(heading), 0.0, speed * std::sin(heading));
            }
            spec.sprites.push_back(sprite);
        }
        try {
            (void)generate_synthetic_snippet(spec, k);
            return spec;
        } catch (const std::invalid_argument&) {
            continue;
        }
    }
    throw std::runtime_error("random_scene_spec: no valid scene after 100 attempts (seed " + std::to_string(seed) +
                             ")");
}

// ---------------------------------------------------------------- datasets

CameraIntrinsics SyntheticDatasetConfig::intrinsics() const
{
    return {focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height};
}

json to_json(const SyntheticDatasetConfig& config)
{
    json j{{"seed", config.seed},
            {"train_count", config.train_count},
            {"val_count", config.val_count},
            {"width", config.width},
            {"height", config.height},
            {"focal", config.focal},
            {"min_sprites", config.scene.min_sprites},
            {"max_sprites", config.scene.max_sprites},
            {"moving_probability", config.scene.moving_probability},
            {"min_sprite_speed", config.scene.min_sprite_speed},
            {"max_sprite_speed", config.scene.max_sprite_speed},
            {"max_forward_step", config.scene.max_forward_step},
            {"max_rotation", config.scene.max_rotation}};
    json scenes = json::array();
    for (const auto& scene : config.scenes)
        scenes.push_back({{"id", scene.id}, {"split", scene.split}, {"spec", to_json(scene.spec)}});
    j["scenes"] = scenes;
    j["sequence_frames"] = config.sequence_frames;
    return j;
}

SyntheticDatasetConfig synthetic_config_from_json(const json& j)
{
    reject_unknown_keys(j,
                        {"seed", "train_count", "val_count", "width", "height", "focal", "min_sprites", "max_sprites",
                         "moving_probability", "min_sprite_speed", "max_sprite_speed", "max_forward_step",
                         "max_rotation", "scenes", "sequence_frames"},
                        "synthetic");
    SyntheticDatasetConfig c;
    c.seed = j.value("seed", c.seed);
    c.train_count = j.value("train_count", c.train_count);
    c.val_count = j.value("val_count", c.val_count);
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.focal = j.value("focal", c.focal);
    c.scene.min_sprites = j.value("min_sprites", c.scene.min_sprites);
    c.scene.max_sprites = j.value("max_sprites", c.scene.max_sprites);
    c.scene.moving_probability = j.value("moving_probability", c.scene.moving_probability);
    c.scene.min_sprite_speed = j.value("min_sprite_speed", c.scene.min_sprite_speed);
    c.scene.max_sprite_speed = j.value("max_sprite_speed", c.scene.max_sprite_speed);
    c.scene.max_forward_step = j.value("max_forward_step", c.scene.max_forward_step);
    c.scene.max_rotation = j.value("max_rotation", c.scene.max_rotation);
    c.sequence_frames = j.value("sequence_frames", c.sequence_frames);
    if (j.contains("scenes")) {
        for (const auto& item : j.at("scenes")) {
            reject_unknown_keys(item, {"id", "split", "spec"}, "synthetic scene");
            ExplicitScene scene;
            scene.id = item.at("id").get<std::string>();
            scene.split = item.value("split", scene.split);
            if (scene.split != "train" && scene.split != "val")
                throw std::invalid_argument("synthetic scene '" + scene.id + "': split must be train or val");
            try {
                scene.spec = scene_spec_from_json(item.at("spec"));
            } catch (const std::exception& e) {
                throw std::invalid_argument("snippet '" + scene.id + "': " + e.what());
            }
            c.scenes.push_back(std::move(scene));
        }
    }
    if (c.train_count < 0 || c.val_count < 0 || c.width <= 0 || c.height <= 0 || !(c.focal > 0.0) ||
        c.scene.min_sprites < 0 || c.scene.max_sprites < c.scene.min_sprites || c.sequence_frames < 0 ||
        c.sequence_frames == 1)
        throw std::invalid_argument("synthetic: invalid dataset configuration");
    return c;
}

namespace {

torch::Tensor intrinsics_to_tensor(const CameraIntrinsics& k)
{
    return torch::tensor({k.fx, k.fy, k.cx, k.cy, static_cast<double>(k.width), static_cast<double>(k.height)},
                         torch::kFloat64);
}

CameraIntrinsics intrinsics_from_tensor(const torch::Tensor& t)
{
    const auto a = t.accessor<double, 1>();
    return {a[0], a[1], a[2], a[3], static_cast<int>(a[4]), static_cast<int>(a[5])};
}

torch::Tensor transforms_to_tensor(const std::vector<RigidTransform>& poses)
{
    auto out = torch::empty({static_cast<int64_t>(poses.size()), 4, 4}, torch::kFloat64);
    auto a = out.accessor<double, 3>();
    for (size_t i = 0; i < poses.size(); ++i) {
        const Eigen::Matrix4d m = poses[i].matrix();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c)
                a[static_cast<int64_t>(i)][r][c] = m(r, c);
    }
    return out;
}

std::vector<RigidTransform> transforms_from_tensor(const torch::Tensor& t)
{
    std::vector<RigidTransform> poses;
    const auto a = t.accessor<double, 3>();
    for (int64_t i = 0; i < t.size(0); ++i) {
        Eigen::Matrix4d m;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c)
                m(r, c) = a[i][r][c];
        poses.push_back(RigidTransform::from_matrix(m));
    }
    return poses;
}

bool try_read_tensor(torch::serialize::InputArchive& archive, const std::string& key, torch::Tensor& out)
{
    return archive.try_read(key, out);
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key)
{
    c10::IValue value;
    archive.read(key, value);
    return value.toStringRef();
}

}  // namespace

void save_snippet(const Snippet& snippet, const fs::path& path)
{
    snippet.validate();
    torch::serialize::OutputArchive archive;
    archive.write("id", c10::IValue(snippet.id));
    archive.write("frames", torch::stack({snippet.frames[0], snippet.frames[1], snippet.frames[2]}));
    archive.write("intrinsics", intrinsics_to_tensor(snippet.intrinsics));
    if (snippet.depth)
        archive.write("depth", *snippet.depth);
    if (snippet.poses)
        archive.write("poses", transforms_to_tensor({(*snippet.poses)[0], (*snippet.poses)[1]}));
    if (snippet.moving_mask)
        archive.write("moving_mask", *snippet.moving_mask);
    archive.save_to(path.string());
}

Snippet load_snippet(const fs::path& path)
{
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    Snippet snippet;
    snippet.id = read_string(archive, "id");
    torch::Tensor frames;
    archive.read("frames", frames);
    for (int64_t f = 0; f < 3; ++f)
        snippet.frames[static_cast<size_t>(f)] = frames[f].clone();
    torch::Tensor k;
    archive.read("intrinsics", k);
    snippet.intrinsics = intrinsics_from_tensor(k);
    torch::Tensor t;
    if (try_read_tensor(archive, "depth", t))
        snippet.depth = t;
    torch::Tensor poses;
    if (try_read_tensor(archive, "poses", poses)) {
        const auto list = transforms_from_tensor(poses);
        snippet.poses = std::array<RigidTransform, 2>{list.at(0), list.at(1)};
    }
    torch::Tensor mask;
    if (try_read_tensor(archive, "moving_mask", mask))
        snippet.moving_mask = mask;
    snippet.validate();
    return snippet;
}

void write_synthetic_dataset(const SyntheticDatasetConfig& config, const fs::path& root)
{
    const auto k = config.intrinsics();
    k.validate();
    fs::create_directories(root / "snippets");
    std::mt19937_64 master(config.seed);
    json entries = json::array();
    auto render = [&](const std::string& id, const std::string& split, const SyntheticSceneSpec& spec,
                      std::optional<uint64_t> seed) {
        Snippet snippet;
        try {
            snippet = generate_synthetic_snippet(spec, k, id);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("snippet '" + id + "': " + e.what());
        }
        save_snippet(snippet, root / "snippets" / (id + ".pt"));
        json entry{{"id", id}, {"split", split}, {"spec", to_json(spec)}};
        if (seed)
            entry["seed"] = *seed;
        entries.push_back(entry);
    };
    auto emit = [&](const std::string& split, int count) {
        for (int i = 0; i < count; ++i) {
            const uint64_t seed = master();
            char id[64];
            std::snprintf(id, sizeof(id), "%s_%04d", split.c_str(), i);
            render(id, split, random_scene_spec(seed, k, config.scene), seed);
        }
    };
    emit("train", config.train_count);
    emit("val", config.val_count);
    for (const auto& scene : config.scenes)
        render(scene.id, scene.split, scene.spec, std::nullopt);
    if (config.sequence_frames > 0)
        save_sequence(generate_synthetic_sequence(master(), config.sequence_frames, k),
                      root / "sequences" / "sequence_00.pt");
    const json manifest{{"config", to_json(config)}, {"snippets", entries}};
    std::ofstream out(root / "manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out)
        throw std::runtime_error("cannot write manifest under '" + root.string() + "'");
}

std::unique_ptr<SnippetDataset> load_synthetic_split(const fs::path& root, const std::string& split)
{
    std::ifstream in(root / "manifest.json");
    if (!in)
        throw std::runtime_error("no manifest.json under '" + root.string() + "'");
    const json manifest = json::parse(in);
    const std::string wanted = split == "test" ? "val" : split;
    if (wanted != "train" && wanted != "val")
        throw std::invalid_argument("unknown synthetic split '" + split + "'");
    std::vector<Snippet> snippets;
    for (const auto& entry : manifest.at("snippets")) {
        if (entry.at("split").get<std::string>() != wanted)
            continue;
        snippets.push_back(load_snippet(root / "snippets" / (entry.at("id").get<std::string>() + ".pt")));
    }
    return std::make_unique<InMemoryDataset>(std::move(snippets));
}

Sequence generate_synthetic_sequence(uint64_t seed, int frame_count, const CameraIntrinsics& k)
{
    if (frame_count < 2)
        throw std::invalid_argument("synthetic sequence needs at least two frames");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SyntheticSceneSpec wall;
    wall.background_seed = rng();
    wall.near_depth = 8.0;
    wall.far_depth = 8.0;
    const double speed = 0.3 + 0.1 * unit(rng);
    const double wobble = 0.5 + unit(rng);
    Sequence sequence;
    sequence.name = "synthetic_" + std::to_string(seed);
    sequence.intrinsics = k;
    for (int i = 0; i < frame_count; ++i) {
        geometry::PoseVector v;
        const double s = static_cast<double>(i);
        v << 0.0, 0.08 * std::sin(s / 25.0), 0.0, speed * s, 0.0, wobble * std::sin(s / 40.0);
        const auto camera = geometry::pose_vector_to_transform(v);
        sequence.poses.push_back(camera);
        sequence.frames.push_back(render_view(wall, camera, 0.0, k).image);
    }
    return sequence;
}

void save_sequence(const Sequence& sequence, const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    torch::serialize::OutputArchive archive;
    archive.write("name", c10::IValue(sequence.name));
    archive.write("frames", torch::stack(sequence.frames));
    archive.write("intrinsics", intrinsics_to_tensor(sequence.intrinsics));
    if (!sequence.poses.empty())
        archive.write("poses", transforms_to_tensor(sequence.poses));
    archive.save_to(path.string());
}

Sequence load_sequence(const fs::path& path)
{
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    Sequence sequence;
    sequence.name = read_string(archive, "name");
    torch::Tensor frames;
    archive.read("frames", frames);
    for (int64_t i = 0; i < frames.size(0); ++i)
        sequence.frames.push_back(frames[i].clone());
    torch::Tensor k;
    archive.read("intrinsics", k);
    sequence.intrinsics = intrinsics_from_tensor(k);
    torch::Tensor poses;
    if (try_read_tensor(archive, "poses", poses))
        sequence.poses = transforms_from_tensor(poses);
    return sequence;
}

// ---------------------------------------------------------------- KITTI

std::map<std::string, std::vector<double>> read_calibration(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("missing calibration file '" + path.string() + "'");
    std::map<std::string, std::vector<double>> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos)
            continue;
        const std::string key = line.substr(0, colon);
        std::istringstream values(line.substr(colon + 1));
        std::vector<double> numbers;
        std::string token;
        bool numeric = true;
        while (values >> token) {
            try {
                size_t used = 0;
                numbers.push_back(std::stod(token, &used));
                if (used != token.size())
                    numeric = false;
            } catch (const std::exception&) {
                numeric = false;
            }
            if (!numeric)
                break;
        }
        if (numeric && !numbers.empty())
            out[key] = std::move(numbers);
    }
    return out;
}

CameraIntrinsics kitti_intrinsics(const fs::path& calib_file, int width, int height, char side)
{
    const auto calib = read_calibration(calib_file);
    const char* keys_left[] = {"P_rect_02", "P2"};
    const char* keys_right[] = {"P_rect_03", "P3"};
    const auto& keys = side == 'r' ? keys_right : keys_left;
    for (const char* key : keys) {
        const auto it = calib.find(key);
        if (it == calib.end())
            continue;
        if (it->second.size() != 12)
            throw std::runtime_error("calibration entry " + std::string(key) + " in '" + calib_file.string() +
                                     "' does not hold 12 values");
        const auto& p = it->second;
        CameraIntrinsics k{p[0], p[5], p[2], p[6], width, height};
        k.validate();
        return k;
    }
    throw std::runtime_error("no projection matrix for the color camera in '" + calib_file.string() + "'");
}

Split parse_split(const std::string& name)
{
    if (name == "eigen_train")
        return Split::eigen_train;
    if (name == "eigen_val")
        return Split::eigen_val;
    if (name == "eigen_test")
        return Split::eigen_test;
    if (name == "odom_train" || name == "odom_seqs")
        return Split::odom_train;
    if (name == "odom_val")
        return Split::odom_val;
    throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<SplitEntry> read_split_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open split file '" + path.string() + "'");
    std::vector<SplitEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream fields(line);
        SplitEntry entry;
        std::string side;
        if (!(fields >> entry.folder))
            continue;
        if (!(fields >> entry.frame))
            throw std::runtime_error("malformed split line '" + line + "' in '" + path.string() + "'");
        if (fields >> side)
            entry.side = side.empty() ? 'l' : side[0];
        entries.push_back(entry);
    }
    return entries;
}

fs::path split_file(const fs::path& splits_dir, Split split)
{
    switch (split) {
    case Split::eigen_train:
        return splits_dir / "eigen_zhou" / "train_files.txt";
    case Split::eigen_val:
        return splits_dir / "eigen_zhou" / "val_files.txt";
    case Split::eigen_test:
        return splits_dir / "eigen" / "test_files.txt";
    case Split::odom_train:
        return splits_dir / "odom" / "train_files.txt";
    case Split::odom_val:
        return splits_dir / "odom" / "val_files.txt";
    }
    throw std::invalid_argument("unknown split");
}

namespace {

bool is_odometry(Split split)
{
    return split == Split::odom_train || split == Split::odom_val;
}

fs::path frame_path(const fs::path& root, Split split, const SplitEntry& entry, int64_t frame,
                    const std::string& extension)
{
    char name[32];
    if (is_odometry(split)) {
        char sequence[16];
        std::snprintf(sequence, sizeof(sequence), "%02d", std::stoi(entry.folder));
        std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(frame));
        return root / "sequences" / sequence / (entry.side == 'r' ? "image_3" : "image_2") / (name + extension);
    }
    std::snprintf(name, sizeof(name), "%010lld", static_cast<long long>(frame));
    return root / entry.folder / (entry.side == 'r' ? "image_03" : "image_02") / "data" / (name + extension);
}

fs::path calibration_path(const fs::path& root, Split split, const SplitEntry& entry)
{
    if (is_odometry(split)) {
        char sequence[16];
        std::snprintf(sequence, sizeof(sequence), "%02d", std::stoi(entry.folder));
        return root / "sequences" / sequence / "calib.txt";
    }
    return root / fs::path(entry.folder).parent_path() / "calib_cam_to_cam.txt";
}

}  // namespace

torch::Tensor read_image(const fs::path& path, int width, int height)
{
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty())
        throw std::runtime_error("cannot read image '" + path.string() + "'");
    if (width > 0 && height > 0 && (bgr.cols != width || bgr.rows != height))
        cv::resize(bgr, bgr, cv::Size(width, height), 0, 0, cv::INTER_AREA);
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto tensor = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return tensor.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

KittiDataset::KittiDataset(fs::path root, Split split, std::vector<SplitEntry> entries, KittiOptions options)
    : root_(std::move(root)), split_(split), entries_(std::move(entries)), options_(std::move(options))
{
}

Snippet KittiDataset::get(size_t index) const
{
    const auto& entry = entries_.at(index);
    Snippet snippet;
    snippet.id = entry.folder + " " + std::to_string(entry.frame) + " " + entry.side;
    const auto target_path = frame_path(root_, split_, entry, entry.frame, options_.image_extension);
    const cv::Mat probe = cv::imread(target_path.string(), cv::IMREAD_UNCHANGED);
    if (probe.empty())
        throw std::runtime_error("cannot read image '" + target_path.string() + "'");
    const auto original = kitti_intrinsics(calibration_path(root_, split_, entry), probe.cols, probe.rows, entry.side);
    snippet.intrinsics = original.resized(options_.width, options_.height);
    if (split_ == Split::eigen_test) {
        const auto frame = read_image(target_path, options_.width, options_.height);
        snippet.frames = {frame, frame, frame};
        char name[32];
        std::snprintf(name, sizeof(name), "%010lld.bin", static_cast<long long>(entry.frame));
        const auto velodyne = root_ / entry.folder / "velodyne_points" / "data" / name;
        snippet.depth = project_velodyne(velodyne, root_ / fs::path(entry.folder).parent_path(), probe.cols,
                                         probe.rows);
    } else {
        for (int offset = -1; offset <= 1; ++offset) {
            snippet.frames[static_cast<size_t>(offset + 1)] =
                read_image(frame_path(root_, split_, entry, entry.frame + offset, options_.image_extension),
                           options_.width, options_.height);
        }
    }
    return snippet;
}

std::unique_ptr<KittiDataset> load_kitti_split(const fs::path& root, const fs::path& splits_dir, Split split,
                                                const KittiOptions& options)
{
    const auto all = read_split_file(split_file(splits_dir, split));
    std::vector<SplitEntry> kept;
    std::map<fs::path, bool> calibration_ok;
    for (const auto& entry : all) {
        const auto calib = calibration_path(root, split, entry);
        auto it = calibration_ok.find(calib);
        if (it == calibration_ok.end())
            it = calibration_ok.emplace(calib, fs::exists(calib)).first;
        if (!it->second) {
            std::cerr << "warning: missing calibration '" << calib.string() << "', dropping "
                      << entry.folder << " " << entry.frame << "\n";
            continue;
        }
        bool present = true;
        const int64_t lo = split == Split::eigen_test ? 0 : -1;
        const int64_t hi = split == Split::eigen_test ? 0 : 1;
        for (int64_t offset = lo; offset <= hi && present; ++offset)
            present = fs::exists(frame_path(root, split, entry, entry.frame + offset, options.image_extension));
        if (present)
            kept.push_back(entry);
    }
    return std::make_unique<KittiDataset>(root, split, std::move(kept), options);
}

torch::Tensor project_velodyne(const fs::path& velodyne_bin, const fs::path& calib_dir, int width, int height)
{
    const auto cam = read_calibration(calib_dir / "calib_cam_to_cam.txt");
    const auto velo = read_calibration(calib_dir / "calib_velo_to_cam.txt");
    auto need = [](const std::map<std::string, std::vector<double>>& calib, const std::string& key, size_t n) {
        const auto it = calib.find(key);
        if (it == calib.end() || it->second.size() != n)
            throw std::runtime_error("calibration entry '" + key + "' missing or malformed");
        return it->second;
    };
    const auto r = need(velo, "R", 9);
    const auto t = need(velo, "T", 3);
    const auto r_rect = need(cam, "R_rect_00", 9);
    const auto p_rect = need(cam, "P_rect_02", 12);
    Eigen::Matrix4d velo_to_cam = Eigen::Matrix4d::Identity();
    Eigen::Matrix4d rect = Eigen::Matrix4d::Identity();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            velo_to_cam(i, j) = r[static_cast<size_t>(3 * i + j)];
            rect(i, j) = r_rect[static_cast<size_t>(3 * i + j)];
        }
        velo_to_cam(i, 3) = t[static_cast<size_t>(i)];
    }
    Eigen::Matrix<double, 3, 4> p;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            p(i, j) = p_rect[static_cast<size_t>(4 * i + j)];
    const Eigen::Matrix<double, 3, 4> velo_to_image = p * rect * velo_to_cam;

    if (width <= 0 || height <= 0) {
        const auto size = need(cam, "S_rect_02", 2);
        width = static_cast<int>(size[0]);
        height = static_cast<int>(size[1]);
    }

    std::ifstream in(velodyne_bin, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open laser scan '" + velodyne_bin.string() + "'");
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<size_t>(in.tellg());
    in.seekg(0);
    std::vector<float> points(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(points.data()), static_cast<std::streamsize>(points.size() * sizeof(float)));

    auto depth = torch::zeros({1, height, width}, torch::kFloat32);
    auto d = depth.accessor<float, 3>();
    for (size_t i = 0; i + 3 < points.size(); i += 4) {
        if (points[i] < 0.0f)  // behind the sensor
            continue;
        const Eigen::Vector4d x(points[i], points[i + 1], points[i + 2], 1.0);
        const Eigen::Vector3d uvz = velo_to_image * x;
        const double z = uvz.z();
        if (!(z > 0.0))
            continue;
        // The reference devkit rounds and subtracts one (1-based pixel centers).
        const long u = std::lround(uvz.x() / z) - 1;
        const long v = std::lround(uvz.y() / z) - 1;
        if (u < 0 || v < 0 || u >= width || v >= height)
            continue;
        float& cell = d[0][v][u];
        if (cell == 0.0f || z < cell)
            cell = static_cast<float>(z);
    }
    return depth;
}

std::vector<RigidTransform> read_pose_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open pose file '" + path.string() + "'");
    std::vector<RigidTransform> poses;
    std::string line;
    int line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        std::istringstream fields(line);
        std::vector<double> values;
        double v = 0.0;
        while (fields >> v)
            values.push_back(v);
        if (values.empty())
            continue;
        if (values.size() != 12)
            throw std::runtime_error("pose file '" + path.string() + "' line " + std::to_string(line_number) +
                                     ": expected 12 values, got " + std::to_string(values.size()));
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                m(r, c) = values[static_cast<size_t>(4 * r + c)];
        poses.push_back(RigidTransform::from_matrix(m));
    }
    return poses;
}

void write_pose_file(const std::vector<RigidTransform>& poses, const fs::path& path)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write pose file '" + path.string() + "'");
    out.precision(9);
    out << std::scientific;
    for (const auto& pose : poses) {
        const Eigen::Matrix4d m = pose.matrix();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                out << m(r, c) << (r == 2 && c == 3 ? "\n" : " ");
    }
}

Sequence load_kitti_odometry_sequence(const fs::path& root, const std::string& sequence, const KittiOptions& options)
{
    const auto dir = root / "sequences" / sequence;
    std::vector<fs::path> files;
    for (const auto& item : fs::directory_iterator(dir / "image_2")) {
        if (item.path().extension() == options.image_extension)
            files.push_back(item.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw std::runtime_error("no frames under '" + (dir / "image_2").string() + "'");
    const cv::Mat probe = cv::imread(files.front().string(), cv::IMREAD_UNCHANGED);
    if (probe.empty())
        throw std::runtime_error("cannot read image '" + files.front().string() + "'");
    Sequence out;
    out.name = sequence;
    out.intrinsics = kitti_intrinsics(dir / "calib.txt", probe.cols, probe.rows).resized(options.width, options.height);
    for (const auto& file : files)
        out.frames.push_back(read_image(file, options.width, options.height));
    const auto pose_path = root / "poses" / (sequence + ".txt");
    if (fs::exists(pose_path)) {
        out.poses = read_pose_file(pose_path);
        if (out.poses.size() != out.frames.size())
            throw std::runtime_error("pose file '" + pose_path.string() + "' does not match the frame count");
    }
    return out;
}

// ---------------------------------------------------------------- preprocessing

std::vector<size_t> filter_static_frames(const std::vector<torch::Tensor>& frames, double threshold)
{
    std::vector<size_t> kept;
    if (frames.empty())
        return kept;
    kept.push_back(0);
    for (size_t i = 1; i < frames.size(); ++i) {
        const double difference = (frames[i] - frames[kept.back()]).abs().mean().item<double>();
        if (!(difference < threshold))
            kept.push_back(i);
    }
    return kept;
}

Snippet flip_snippet(const Snippet& snippet)
{
    Snippet out = snippet;
    for (auto& frame : out.frames)
        frame = frame.flip({2});
    out.intrinsics = snippet.intrinsics.flipped();
    if (out.depth)
        out.depth = out.depth->flip({2});
    if (out.moving_mask)
        out.moving_mask = out.moving_mask->flip({2});
    if (out.poses) {
        const Eigen::Matrix3d s = Eigen::Vector3d(-1.0, 1.0, 1.0).asDiagonal();
        for (auto& pose : *out.poses) {
            pose.rotation = s * pose.rotation * s;
            pose.translation = s * pose.translation;
        }
    }
    return out;
}

Snippet augment(const Snippet& snippet, const AugmentOptions& options, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Snippet out = snippet;
    if (options.flip && unit(rng) < options.flip_probability)
        out = flip_snippet(out);
    if (options.color_jitter) {
        const double brightness = 1.0 + options.brightness * (2.0 * unit(rng) - 1.0);
        const double contrast = 1.0 + options.contrast * (2.0 * unit(rng) - 1.0);
        const double saturation = 1.0 + options.saturation * (2.0 * unit(rng) - 1.0);
        for (auto& frame : out.frames) {
            auto x = (frame * brightness).clamp(0.0, 1.0);
            const auto gray = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0);
            x = ((x - gray.mean()) * contrast + gray.mean()).clamp(0.0, 1.0);
            const auto gray2 = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0);
            frame = ((x - gray2) * saturation + gray2).clamp(0.0, 1.0);
        }
    }
    return out;
}

Batch collate(const std::vector<Snippet>& snippets, const torch::TensorOptions& options)
{
    if (snippets.empty())
        throw std::invalid_argument("collate: empty batch");
    Batch batch;
    std::vector<torch::Tensor> targets, previous, next, ks;
    for (const auto& s : snippets) {
        batch.ids.push_back(s.id);
        previous.push_back(s.frames[0]);
        targets.push_back(s.frames[1]);
        next.push_back(s.frames[2]);
        ks.push_back(s.intrinsics.tensor(options));
    }
    batch.target = torch::stack(targets).to(options);
    batch.sources = {torch::stack(previous).to(options), torch::stack(next).to(options)};
    batch.intrinsics = torch::stack(ks);
    return batch;
}

}  // namespace asanet::data
