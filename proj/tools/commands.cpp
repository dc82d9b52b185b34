#include "commands.hpp"

#include "images.hpp"

#include "asanet/evaluation.hpp"
#include "asanet/geometry.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace asanet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags
{
    std::string config;
    std::optional<uint64_t> seed;
    bool force = false;
    std::vector<int> phases;
    std::string checkpoint;
    std::string output;
    bool resume = false;
    bool oracle = false;
    bool save_maps = false;
    std::string sequence;
    std::vector<std::string> ids;
};

/// Raised for invalid input: bad flags, missing files, malformed data.
struct UserError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

ExperimentConfig resolve_config(const Flags& flags, bool output_is_dataset)
{
    ExperimentConfig config;
    if (!flags.config.empty())
        config = load_experiment(flags.config);
    if (flags.seed) {
        config.seed = *flags.seed;
        config.propagate_seed();
    }
    if (!flags.output.empty()) {
        if (output_is_dataset)
            config.dataset.root = flags.output;
        else
            config.output_dir = flags.output;
    }
    if (!flags.phases.empty()) {
        config.training.phases = flags.phases;
        config.training.validate();
    }
    return config;
}

void write_json(const json& j, const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out)
        throw std::runtime_error("cannot write '" + path.string() + "'");
}

std::string file_stem(const std::string& id)
{
    std::string s = id;
    std::replace_if(s.begin(), s.end(), [](char c) { return c == '/' || c == ' ' || c == '\\'; }, '_');
    return s;
}

data::KittiOptions kitti_options(const ExperimentConfig& c)
{
    return {c.dataset.width, c.dataset.height, c.dataset.image_extension};
}

std::unique_ptr<data::SnippetDataset> load_split(const ExperimentConfig& c, const std::string& role)
{
    if (c.dataset.kind == "synthetic") {
        if (!fs::exists(c.dataset.root / "manifest.json"))
            throw UserError("no synthetic dataset at '" + c.dataset.root.string() + "' (run synth first)");
        return data::load_synthetic_split(c.dataset.root, role);
    }
    const std::string name = role == "train" ? c.dataset.train_split
                             : role == "val" ? c.dataset.val_split
                                             : c.dataset.test_split;
    auto dataset = data::load_kitti_split(c.dataset.root, c.dataset.splits_dir, data::parse_split(name),
                                          kitti_options(c));
    if (dataset->size() == 0)
        throw UserError("split '" + name + "' has no frames under '" + c.dataset.root.string() + "'");
    return dataset;
}

fs::path resolve_checkpoint(const Flags& flags, const ExperimentConfig& c)
{
    if (!flags.checkpoint.empty()) {
        if (!fs::exists(flags.checkpoint))
            throw UserError("checkpoint not found: " + flags.checkpoint);
        return flags.checkpoint;
    }
    const auto latest = training::latest_checkpoint(c.output_dir);
    if (!latest)
        throw UserError("no checkpoint under '" + c.output_dir.string() + "' (pass --checkpoint)");
    return *latest;
}

// ------------------------------------------------------------------ synth

int cmd_synth(const Flags& flags, std::ostream& out)
{
    auto config = resolve_config(flags, true);
    if (config.dataset.kind != "synthetic")
        throw UserError("synth needs dataset.kind = synthetic");
    const auto& root = config.dataset.root;
    if (fs::exists(root) && !fs::is_empty(root) && !flags.force)
        throw UserError("output directory '" + root.string() + "' is not empty (use --force)");
    data::write_synthetic_dataset(config.synthetic, root);
    write_experiment(config, root / "config.json");
    out << "wrote " << config.synthetic.train_count << " train + " << config.synthetic.val_count << " val + "
        << config.synthetic.scenes.size() << " explicit snippets to " << root.string() << "\n";
    return kSuccess;
}

// ------------------------------------------------------------------ train

int cmd_train(Flags flags, std::ostream& out)
{
    // Resuming without a config reuses the effective config of the run.
    if (flags.resume && flags.config.empty()) {
        const fs::path dir = flags.output.empty() ? ExperimentConfig{}.output_dir : fs::path(flags.output);
        if (fs::exists(dir / "config.json"))
            flags.config = (dir / "config.json").string();
    }
    auto config = resolve_config(flags, false);
    apply_determinism(config);
    auto train = load_split(config, "train");
    std::unique_ptr<data::SnippetDataset> val;
    try {
        val = load_split(config, "val");
    } catch (const UserError&) {
        val.reset();
    }
    if (val && val->size() == 0)
        val.reset();

    auto nets = make_networks(config, out);
    fs::create_directories(config.output_dir);
    training::Trainer trainer(*nets, config.training, config.output_dir);
    if (flags.resume || !flags.checkpoint.empty()) {
        const auto ckpt = resolve_checkpoint(flags, config);
        trainer.load_checkpoint(ckpt);
        out << "resumed from " << ckpt.string() << " at step " << trainer.state().global_step << "\n";
    }
    write_experiment(config, config.output_dir / "config.json");

    const int every = std::max(1, config.training.log_every);
    trainer.on_step = [&out, every](const training::StepRecord& r) {
        if (r.step % every != 0)
            return;
        out << "phase " << r.phase << " epoch " << r.global_epoch << " step " << r.step << " loss "
            << r.components.at("total") << std::endl;
    };
    const auto summary = trainer.run(*train, val.get());
    for (const auto& path : summary.phase_checkpoints)
        out << "checkpoint " << path.string() << "\n";
    out << "training finished after " << trainer.state().global_step << " steps\n";
    return kSuccess;
}

// ------------------------------------------------------------------ eval-depth

torch::Tensor garg_crop_mask(int64_t h, int64_t w)
{
    auto mask = torch::zeros({1, h, w}, torch::kBool);
    const auto r0 = static_cast<int64_t>(0.40810811 * static_cast<double>(h));
    const auto r1 = static_cast<int64_t>(0.99189189 * static_cast<double>(h));
    const auto c0 = static_cast<int64_t>(0.03594771 * static_cast<double>(w));
    const auto c1 = static_cast<int64_t>(0.96405229 * static_cast<double>(w));
    mask.index_put_({torch::indexing::Slice(), torch::indexing::Slice(r0, r1), torch::indexing::Slice(c0, c1)},
                    true);
    return mask;
}

int cmd_eval_depth(const Flags& flags, std::ostream& out)
{
    auto config = resolve_config(flags, false);
    apply_determinism(config);
    auto test = load_split(config, "test");
    if (test->size() == 0)
        throw UserError("test split is empty");
    auto nets = make_networks(config, out);
    if (!flags.oracle)
        load_weights(*nets, resolve_checkpoint(flags, config));

    const fs::path dir = config.output_dir / "eval_depth";
    const auto& range = config.training.loss.depth_range;
    const bool crop = config.dataset.kind == "kitti" && config.evaluation.garg_crop;
    json per_image = json::array();
    std::vector<eval::DepthMetrics> all;
    for (size_t i = 0; i < test->size(); ++i) {
        const auto snippet = test->get(i);
        if (!snippet.depth)
            throw UserError("snippet '" + snippet.id + "' has no ground-truth depth");
        auto gt = snippet.depth->to(torch::kFloat64);
        const auto gh = gt.size(1), gw = gt.size(2);
        if (crop)
            gt = torch::where(garg_crop_mask(gh, gw), gt, torch::zeros_like(gt));

        torch::Tensor pred;
        torch::Tensor disparity;
        if (flags.oracle) {
            pred = torch::where(gt > 0, gt, torch::ones_like(gt));
        } else {
            disparity = eval::predict_disparity(*nets, snippet.target().unsqueeze(0));
            disparity = torch::nn::functional::interpolate(
                            disparity, torch::nn::functional::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{gh, gw})
                                           .mode(torch::kBilinear)
                                           .align_corners(false))
                            .squeeze(0);
            pred = geometry::disparity_to_depth(disparity, range.min_depth, range.max_depth).to(torch::kFloat64);
        }
        const auto m = eval::depth_metrics(pred, gt, config.evaluation.depth);
        json entry{{"id", snippet.id}};
        if (m) {
            entry["metrics"] = eval::to_json(*m);
            all.push_back(*m);
        } else {
            entry["metrics"] = nullptr;
        }
        per_image.push_back(entry);
        if (flags.save_maps) {
            const auto stem = file_stem(snippet.id);
            const double scale = m ? m->scale : 1.0;
            write_depth16((pred * scale).clamp(0, config.evaluation.depth.max_depth), dir / "maps" / (stem + "_depth.png"));
            write_colormap(disparity.defined() ? disparity : 1.0 / pred, dir / "maps" / (stem + "_disparity.png"));
        }
    }
    if (all.empty())
        throw UserError("no test image has valid ground-truth pixels");
    const auto aggregate = eval::mean_metrics(all);
    write_json({{"aggregate", eval::to_json(aggregate)},
                {"images", per_image},
                {"evaluated", all.size()},
                {"oracle", flags.oracle}},
               dir / "report.json");
    out << std::fixed << std::setprecision(4) << "abs_rel " << aggregate.abs_rel << " sq_rel " << aggregate.sq_rel
        << " rmse " << aggregate.rmse << " rmse_log " << aggregate.rmse_log << " d1 " << aggregate.delta1 << " d2 "
        << aggregate.delta2 << " d3 " << aggregate.delta3 << "\n";
    out << "report " << (dir / "report.json").string() << "\n";
    return kSuccess;
}

// ------------------------------------------------------------------ eval-odom

data::Sequence load_odometry_sequence(const ExperimentConfig& c, const std::string& name)
{
    if (c.dataset.kind == "kitti")
        return data::load_kitti_odometry_sequence(c.dataset.root, name.empty() ? "09" : name, kitti_options(c));
    fs::path path = name.empty() ? fs::path("sequence_00") : fs::path(name);
    if (!path.has_extension())
        path = c.dataset.root / "sequences" / (path.string() + ".pt");
    if (!fs::exists(path))
        throw UserError("sequence not found: " + path.string());
    return data::load_sequence(path);
}

int cmd_eval_odom(const Flags& flags, std::ostream& out)
{
    auto config = resolve_config(flags, false);
    apply_determinism(config);
    const auto sequence = load_odometry_sequence(config, flags.sequence);
    if (sequence.frames.size() < 3)
        throw UserError("sequence '" + sequence.name + "' has fewer than three frames");
    if (sequence.poses.size() != sequence.frames.size())
        throw UserError("sequence '" + sequence.name + "' has no ground-truth poses for every frame");
    auto nets = make_networks(config, out);
    if (!flags.oracle)
        load_weights(*nets, resolve_checkpoint(flags, config));

    eval::Trajectory reference;
    const auto origin = geometry::invert_transform(sequence.poses.front());
    for (const auto& pose : sequence.poses)
        reference.poses.push_back(geometry::compose(origin, pose));

    const auto relative =
        flags.oracle ? eval::relative_motions(reference) : eval::predict_relative_motions(*nets, sequence.frames);
    const auto estimated = eval::accumulate_trajectory(relative);
    const auto alignment = eval::align_umeyama_7dof(estimated, reference);

    const fs::path dir = config.output_dir / ("odometry_" + file_stem(sequence.name));
    fs::create_directories(dir);
    data::write_pose_file(estimated.poses, dir / "poses.txt");
    data::write_pose_file(alignment.aligned.poses, dir / "poses_aligned.txt");
    write_trajectory_plot(reference, alignment.aligned, dir / "trajectory.png");

    const auto errors = eval::odometry_errors(alignment.aligned, reference, config.evaluation.odometry);
    const auto h = static_cast<int>(sequence.frames.front().size(1));
    const auto w = static_cast<int>(sequence.frames.front().size(2));
    const auto latency = eval::inference_latency(*nets, config.evaluation.latency_trials, h, w);

    json report{{"sequence", sequence.name},
                {"frames", sequence.frames.size()},
                {"alignment",
                 {{"scale", alignment.similarity.scale},
                  {"rmse", alignment.rmse},
                  {"degenerate", alignment.degenerate}}},
                {"latency_ms", latency.mean_ms},
                {"latency_trials", latency.trials},
                {"oracle", flags.oracle}};
    report["errors"] = errors ? eval::to_json(*errors) : json(nullptr);
    write_json(report, dir / "report.json");
    if (!errors)
        throw UserError("sequence '" + sequence.name + "' is shorter than every evaluation length");
    out << std::fixed << std::setprecision(4) << "t_err " << errors->t_err << " % r_err " << errors->r_err
        << " deg/100m over " << errors->segments << " segments, latency " << latency.mean_ms << " ms\n";
    out << "report " << (dir / "report.json").string() << "\n";
    return kSuccess;
}

// ------------------------------------------------------------------ export-maps

std::optional<data::Snippet> find_snippet(const ExperimentConfig& c, const std::string& id)
{
    if (c.dataset.kind == "synthetic") {
        const auto path = c.dataset.root / "snippets" / (id + ".pt");
        if (id.find('/') != std::string::npos || !fs::exists(path))
            return std::nullopt;
        return data::load_snippet(path);
    }
    for (const auto* role : {"val", "test", "train"}) {
        const auto name = std::string(role) == "val" ? c.dataset.val_split
                          : std::string(role) == "test" ? c.dataset.test_split
                                                          : c.dataset.train_split;
        auto dataset = data::load_kitti_split(c.dataset.root, c.dataset.splits_dir, data::parse_split(name),
                                              kitti_options(c));
        for (size_t i = 0; i < dataset->size(); ++i) {
            const auto& e = dataset->entries()[i];
            if (e.folder + " " + std::to_string(e.frame) + " " + e.side == id)
                return dataset->get(i);
        }
    }
    return std::nullopt;
}

int cmd_export_maps(const Flags& flags, std::ostream& out, std::ostream& err)
{
    auto config = resolve_config(flags, false);
    apply_determinism(config);
    if (flags.ids.empty())
        throw UserError("export-maps needs at least one snippet id (--ids)");
    auto nets = make_networks(config, out);
    load_weights(*nets, resolve_checkpoint(flags, config));

    const fs::path dir = config.output_dir / "maps";
    json entries = json::array();
    std::vector<std::string> unknown;
    for (const auto& id : flags.ids) {
        const auto snippet = find_snippet(config, id);
        if (!snippet) {
            unknown.push_back(id);
            continue;
        }
        const auto maps = compute_snippet_maps(*nets, *snippet, config.training.loss);
        const fs::path sub = dir / file_stem(id);
        write_rgb(snippet->target(), sub / "input.png");
        write_colormap(maps.disparity, sub / "disparity.png");
        write_mask(maps.auto_mask, sub / "auto_mask.png");
        write_mask(maps.dynamic_mask, sub / "dynamic_mask.png");
        // Both error maps share the ego-only scale so they compare visually.
        const double vmax = std::max(torch::quantile(maps.pe_ego.reshape({-1}), 0.95).item<double>(), 1e-6);
        write_colormap(maps.pe_ego, sub / "pe_ego.png", vmax);
        write_colormap(maps.pe_merged, sub / "pe_merged.png", vmax);
        const auto masked = maps.auto_mask > 0.5;
        const auto masked_mean = [&](const torch::Tensor& m) {
            return masked.any().item<bool>() ? m.masked_select(masked).mean().item<double>() : 0.0;
        };
        json entry{{"id", id},
                   {"dynamic_fraction", maps.dynamic_mask.mean().item<double>()},
                   {"auto_mask_fraction", maps.auto_mask.mean().item<double>()},
                   {"pe_ego_mean", masked_mean(maps.pe_ego)},
                   {"pe_merged_mean", masked_mean(maps.pe_merged)},
                   {"iou", maps.iou ? json(*maps.iou) : json(nullptr)}};
        entries.push_back(entry);
        out << "exported " << id << "\n";
    }
    for (const auto& id : unknown)
        err << "unknown snippet id '" << id << "', skipped\n";
    write_json({{"snippets", entries}, {"unknown", unknown}}, dir / "report.json");
    return kSuccess;
}

}  // namespace

void apply_determinism(const ExperimentConfig& config)
{
    torch::manual_seed(config.seed);
    at::globalContext().setDeterministicAlgorithms(config.deterministic, false);
}

std::unique_ptr<nets::ComponentSet> make_networks(const ExperimentConfig& config, std::ostream& log)
{
    auto nets = std::make_unique<nets::ComponentSet>(config.network);
    if (!config.pretrained.empty()) {
        if (!fs::exists(config.pretrained))
            throw UserError("pretrained weights not found: " + config.pretrained);
        const int copied = nets->load_pretrained_encoder(config.pretrained);
        log << "loaded " << copied << " pretrained encoder tensors\n";
    }
    return nets;
}

void load_weights(nets::ComponentSet& nets, const fs::path& checkpoint)
{
    torch::serialize::InputArchive archive;
    archive.load_from(checkpoint.string());
    nets.load(archive);
}

SnippetMaps compute_snippet_maps(nets::ComponentSet& nets, const data::Snippet& snippet,
                                 const training::LossOptions& options)
{
    const auto batch = data::collate({snippet});
    SnippetMaps maps;
    {
        torch::NoGradGuard no_grad;
        nets.eval();
        try {
            const auto loss = training::compute_phase_loss(3, batch, nets, options);
            maps.auto_mask = loss.full_resolution.auto_mask[0];
            maps.dynamic_mask = loss.full_resolution.dynamic_mask[0];
            maps.pe_ego = loss.full_resolution.ego_min_photometric[0];
            maps.pe_merged = loss.full_resolution.min_photometric[0];
        } catch (...) {
            nets.restore_modes();
            throw;
        }
        nets.restore_modes();
    }
    maps.disparity = eval::predict_disparity(nets, batch.target)[0];
    if (snippet.moving_mask)
        maps.iou = eval::mask_iou(maps.dynamic_mask, *snippet.moving_mask);
    return maps;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Self-supervised depth and ego-motion with attention-based static/dynamic separation"};
    app.require_subcommand(1);
    Flags flags;

    auto add_common = [&flags](CLI::App* sub, const std::string& output_help = "Override the output directory") {
        sub->add_option("--config", flags.config, "Experiment config (JSON)");
        sub->add_option("--seed", flags.seed, "Override the seed");
        sub->add_option("--output", flags.output, output_help);
    };
    auto* synth = app.add_subcommand("synth", "Render the synthetic dataset");
    add_common(synth, "Dataset root to write (default: dataset.root)");
    synth->add_flag("--force", flags.force, "Write into a non-empty directory");

    auto* train = app.add_subcommand("train", "Run the training schedule");
    add_common(train);
    train->add_option("--phases", flags.phases, "Phases to run, e.g. 1 or 1,2,3")->delimiter(',');
    train->add_flag("--resume", flags.resume, "Continue from the latest checkpoint");
    train->add_option("--checkpoint", flags.checkpoint, "Continue from this checkpoint");

    auto* depth = app.add_subcommand("eval-depth", "Depth metrics on the test split");
    add_common(depth);
    depth->add_option("--checkpoint", flags.checkpoint, "Checkpoint (default: latest)");
    depth->add_flag("--oracle", flags.oracle, "Use ground truth as the prediction");
    depth->add_flag("--save-maps", flags.save_maps, "Write 16-bit depth and disparity images");

    auto* odom = app.add_subcommand("eval-odom", "Visual odometry on a sequence");
    add_common(odom);
    odom->add_option("--checkpoint", flags.checkpoint, "Checkpoint (default: latest)");
    odom->add_option("--sequence", flags.sequence, "Sequence name or .pt path");
    odom->add_flag("--oracle", flags.oracle, "Use ground-truth motion as the prediction");

    auto* maps = app.add_subcommand("export-maps", "Write mask and error-map images");
    add_common(maps);
    maps->add_option("--checkpoint", flags.checkpoint, "Checkpoint (default: latest)");
    maps->add_option("--ids", flags.ids, "Snippet ids")->delimiter(',');

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUserError;
    }

    try {
        if (synth->parsed())
            return cmd_synth(flags, out);
        if (train->parsed())
            return cmd_train(flags, out);
        if (depth->parsed())
            return cmd_eval_depth(flags, out);
        if (odom->parsed())
            return cmd_eval_odom(flags, out);
        return cmd_export_maps(flags, out, err);
    } catch (const training::NumericalFailure& e) {
        err << "numerical failure: " << e.what();
        if (!e.snippet_ids().empty()) {
            err << " (snippets:";
            for (const auto& id : e.snippet_ids())
                err << " " << id;
            err << ")";
        }
        err << "\n";
        return kNumericalFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUserError;
    }
}

}  // namespace asanet::cli
