#include "asanet/training.hpp"
#include "asanet/json_keys.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace asanet::training {

namespace fs = std::filesystem;
using nlohmann::json;

std::map<std::string, bool> phase_trainable(int phase)
{
    switch (phase) {
    case 1:
        return {{"depth", true}, {"asa", true}, {"ego", true}, {"field", false}};
    case 2:
        return {{"depth", false}, {"asa", false}, {"ego", false}, {"field", true}};
    case 3:
        return {{"depth", true}, {"asa", true}, {"ego", true}, {"field", true}};
    default:
        throw std::invalid_argument("phase must be 1, 2 or 3, got " + std::to_string(phase));
    }
}

void OptimizerConfig::validate(int total_epochs) const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw std::invalid_argument("learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw std::invalid_argument("Adam betas must lie in [0, 1)");
    if (!(decay_factor >= 1.0))
        throw std::invalid_argument("decay_factor must be >= 1");
    if (decay_epoch < 0 || decay_epoch > std::max(total_epochs, 0) + 1000000)
        throw std::invalid_argument("decay_epoch must be non-negative");
    if (batch_size < 1)
        throw std::invalid_argument("batch_size must be >= 1");
    if (!(gradient_clip >= 0.0))
        throw std::invalid_argument("gradient_clip must be >= 0");
}

double learning_rate_at(const OptimizerConfig& config, int global_epoch)
{
    return global_epoch >= config.decay_epoch ? config.learning_rate / config.decay_factor : config.learning_rate;
}

// ---------------------------------------------------------------- objectives

ViewErrors view_errors(const torch::Tensor& target, const torch::Tensor& source, const torch::Tensor& depth,
                       const torch::Tensor& source_depth, const geometry::PoseBatch& pose,
                       const torch::Tensor& intrinsics, const std::optional<torch::Tensor>& residual, double alpha)
{
    const auto grid = geometry::reproject(depth, pose, intrinsics, residual);
    ViewErrors out;
    out.warped = geometry::bilinear_sample(source, grid.coords, geometry::Padding::border);
    out.pe = losses::photometric_error(target, out.warped, alpha);
    const auto interpolated = geometry::bilinear_sample(source_depth, grid.coords, geometry::Padding::border);
    out.ge = losses::normalized_depth_difference(grid.projected_depth, interpolated);
    out.flow = geometry::flow_from_grid(grid);
    return out;
}

namespace {

void check_inputs(const ObjectiveInputs& in, bool needs_residuals)
{
    const size_t n = in.sources.size();
    if (n == 0)
        throw std::invalid_argument("objective needs at least one source view");
    if (in.source_depths.size() != n || in.poses.size() != n)
        throw std::invalid_argument("objective inputs disagree on the number of source views");
    if (needs_residuals && in.residuals.size() != n)
        throw std::invalid_argument("objective needs one motion-field residual per source view");
}

std::vector<torch::Tensor> identity_errors(const ObjectiveInputs& in, double alpha)
{
    std::vector<torch::Tensor> out;
    for (const auto& source : in.sources)
        out.push_back(losses::photometric_error(in.target, source, alpha).detach());
    return out;
}

torch::Tensor zero_like_scalar(const torch::Tensor& t)
{
    return torch::zeros({}, t.options());
}

// Masked photometric + geometric terms over per-source error lists.
void fill_masked_terms(ObjectiveTerms& terms, const std::vector<torch::Tensor>& pe,
                       const std::vector<torch::Tensor>& ge, const std::vector<torch::Tensor>& identity)
{
    const auto min_pe = losses::per_pixel_min(pe);
    terms.min_photometric = min_pe.detach();
    terms.auto_mask = losses::auto_mask_from_errors(min_pe.detach(), losses::per_pixel_min(identity));
    terms.photometric = losses::min_reduce_masked(pe, terms.auto_mask);
    terms.geometric = losses::min_reduce_masked(ge, terms.auto_mask);
}

}  // namespace

ObjectiveTerms rigid_objective(const ObjectiveInputs& in, const losses::LossConfig& config)
{
    check_inputs(in, false);
    std::vector<torch::Tensor> pe, ge;
    for (size_t i = 0; i < in.sources.size(); ++i) {
        auto v = view_errors(in.target, in.sources[i], in.depth, in.source_depths[i], in.poses[i], in.intrinsics,
                             std::nullopt, config.alpha);
        pe.push_back(v.pe);
        ge.push_back(v.ge);
    }
    ObjectiveTerms terms;
    fill_masked_terms(terms, pe, ge, identity_errors(in, config.alpha));
    terms.ego_min_photometric = terms.min_photometric;
    terms.dynamic_mask = torch::zeros_like(terms.auto_mask);
    terms.disparity_smoothness = losses::disparity_smoothness(in.disparity, in.target);
    terms.field_smoothness = zero_like_scalar(terms.photometric);
    terms.total = terms.photometric + config.lambda_g * terms.geometric + config.lambda_d * terms.disparity_smoothness;
    return terms;
}

ObjectiveTerms field_objective(const ObjectiveInputs& in, const losses::LossConfig& config)
{
    check_inputs(in, true);
    std::vector<torch::Tensor> pe, ge;
    auto fs_sum = zero_like_scalar(in.target);
    const auto depth_weight = in.depth.detach();
    for (size_t i = 0; i < in.sources.size(); ++i) {
        auto v = view_errors(in.target, in.sources[i], in.depth, in.source_depths[i], in.poses[i], in.intrinsics,
                             in.residuals[i], config.alpha);
        pe.push_back(v.pe);
        ge.push_back(v.ge);
        fs_sum = fs_sum + losses::motion_field_smoothness(v.flow, depth_weight);
    }
    ObjectiveTerms terms;
    fill_masked_terms(terms, pe, ge, identity_errors(in, config.alpha));
    {
        torch::NoGradGuard no_grad;
        std::vector<torch::Tensor> ego_pe;
        for (size_t i = 0; i < in.sources.size(); ++i)
            ego_pe.push_back(view_errors(in.target, in.sources[i], in.depth, in.source_depths[i], in.poses[i],
                                         in.intrinsics, std::nullopt, config.alpha)
                                 .pe);
        terms.ego_min_photometric = losses::per_pixel_min(ego_pe);
    }
    terms.dynamic_mask = torch::zeros_like(terms.auto_mask);
    terms.disparity_smoothness = zero_like_scalar(terms.photometric);
    terms.field_smoothness = fs_sum / static_cast<double>(in.sources.size());
    terms.total = terms.photometric + config.lambda_g * terms.geometric + config.lambda_f * terms.field_smoothness;
    return terms;
}

ObjectiveTerms merged_objective(const ObjectiveInputs& in, const losses::LossConfig& config)
{
    check_inputs(in, true);
    std::vector<torch::Tensor> pe, ge, ego_pe;
    std::vector<torch::Tensor> dynamic;
    auto fs_sum = zero_like_scalar(in.target);
    const auto depth_fixed = in.depth.detach();
    for (size_t i = 0; i < in.sources.size(); ++i) {
        auto rigid = view_errors(in.target, in.sources[i], in.depth, in.source_depths[i], in.poses[i], in.intrinsics,
                                 std::nullopt, config.alpha);
        auto field = view_errors(in.target, in.sources[i], in.depth, in.source_depths[i], in.poses[i],
                                 in.intrinsics, in.residuals[i], config.alpha);
        const auto mask = losses::dynamic_select_mask(rigid.pe, field.pe, rigid.ge, field.ge, config.eta);
        pe.push_back(losses::merge_consistency(rigid.pe, field.pe, mask));
        ge.push_back(losses::merge_consistency(rigid.ge, field.ge, mask));
        ego_pe.push_back(rigid.pe.detach());
        dynamic.push_back(mask);

        // The smoothness prior only shapes the motion field: depth and
        // ego-motion enter as constants.
        const auto flow =
            geometry::flow_from_projection(depth_fixed, in.poses[i].detached(), in.intrinsics, in.residuals[i]);
        fs_sum = fs_sum + losses::motion_field_smoothness(flow, depth_fixed);
    }
    ObjectiveTerms terms;
    fill_masked_terms(terms, pe, ge, identity_errors(in, config.alpha));
    terms.ego_min_photometric = losses::per_pixel_min(ego_pe);
    auto any_dynamic = dynamic.front();
    for (size_t i = 1; i < dynamic.size(); ++i)
        any_dynamic = torch::maximum(any_dynamic, dynamic[i]);
    terms.dynamic_mask = any_dynamic;
    terms.disparity_smoothness = losses::disparity_smoothness(in.disparity, in.target);
    terms.field_smoothness = fs_sum / static_cast<double>(in.sources.size());
    terms.total = terms.photometric + config.lambda_g * terms.geometric + config.lambda_f * terms.field_smoothness +
                  config.lambda_d * terms.disparity_smoothness;
    return terms;
}

// ---------------------------------------------------------------- phase loss

namespace {

torch::Tensor upsample_to(const torch::Tensor& x, int64_t height, int64_t width)
{
    if (x.size(2) == height && x.size(3) == width)
        return x;
    namespace F = torch::nn::functional;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

double scalar(const torch::Tensor& t)
{
    return t.detach().to(torch::kFloat64).item<double>();
}

}  // namespace

PhaseLoss compute_phase_loss(int phase, const data::Batch& batch, nets::ComponentSet& nets,
                             const LossOptions& options)
{
    const auto expected = phase_trainable(phase);
    if (torch::GradMode::is_enabled() && nets.trainable_flags() != expected)
        throw std::invalid_argument("component trainable flags do not match phase " + std::to_string(phase));
    options.loss.validate();
    if (options.scales < 1 || options.scales > 4)
        throw std::invalid_argument("scales must be between 1 and 4");

    const auto& target = batch.target;
    const int64_t b = target.size(0);
    const int64_t h = target.size(2);
    const int64_t w = target.size(3);
    const size_t n_src = batch.sources.size();

    // Depth for the target and both sources in one pass.
    std::vector<torch::Tensor> disparities;
    {
        std::optional<torch::NoGradGuard> guard;
        if (!nets.is_trainable("depth"))
            guard.emplace();
        disparities = nets.depth(torch::cat({target, batch.sources[0], batch.sources[1]}, 0));
    }
    for (const auto& d : disparities) {
        if (!torch::isfinite(d).all().item<bool>())
            throw NumericalFailure("non-finite disparity in phase " + std::to_string(phase), batch.ids);
    }

    // Ego-motion and, from phase 2 on, the motion field, per source view.
    std::vector<geometry::PoseBatch> poses;
    std::vector<torch::Tensor> residuals;
    for (const auto& source : batch.sources) {
        nets::MotionOutput motion;
        if (phase == 2) {
            {
                torch::NoGradGuard no_grad;
                motion = nets::motion_forward(nets, target, source, false);
            }
            motion.motion_field = nets.field(motion.features);
        } else {
            motion = nets::motion_forward(nets, target, source, phase == 3);
        }
        poses.push_back(geometry::pose_vectors_to_transforms(motion.ego_motion));
        if (phase >= 2)
            residuals.push_back(motion.motion_field);
    }

    PhaseLoss out;
    std::map<std::string, double> sums;
    auto total = torch::zeros({}, target.options());
    for (int s = 0; s < options.scales; ++s) {
        const auto disp_all = upsample_to(disparities.at(static_cast<size_t>(s)), h, w);
        const auto depth_all =
            geometry::disparity_to_depth(disp_all, options.depth_range.min_depth, options.depth_range.max_depth);

        ObjectiveInputs in;
        in.target = target;
        in.sources.assign(batch.sources.begin(), batch.sources.end());
        in.disparity = disp_all.narrow(0, 0, b);
        in.depth = depth_all.narrow(0, 0, b);
        for (size_t i = 0; i < n_src; ++i)
            in.source_depths.push_back(depth_all.narrow(0, static_cast<int64_t>(i + 1) * b, b));
        in.poses = poses;
        in.residuals = residuals;
        in.intrinsics = batch.intrinsics;

        ObjectiveTerms terms;
        switch (phase) {
        case 1:
            terms = rigid_objective(in, options.loss);
            break;
        case 2:
            terms = field_objective(in, options.loss);
            break;
        default:
            terms = merged_objective(in, options.loss);
            break;
        }
        total = total + terms.total;
        sums["photometric"] += scalar(terms.photometric);
        sums["geometric"] += scalar(terms.geometric);
        sums["disparity_smoothness"] += scalar(terms.disparity_smoothness);
        sums["field_smoothness"] += scalar(terms.field_smoothness);
        if (s == 0) {
            sums["photometric_unmasked"] = scalar(terms.min_photometric.mean());
            sums["dynamic_fraction"] = scalar(terms.dynamic_mask.mean());
            sums["auto_mask_fraction"] = scalar(terms.auto_mask.mean());
            out.full_resolution = terms;
        }
    }
    const double scales = static_cast<double>(options.scales);
    out.total = total / scales;
    for (auto& [key, value] : sums) {
        if (key == "photometric" || key == "geometric" || key == "disparity_smoothness" || key == "field_smoothness")
            value /= scales;
    }
    sums["total"] = scalar(out.total);
    out.components = std::move(sums);
    return out;
}

// ---------------------------------------------------------------- config

int TrainingConfig::phase_offset(int phase) const
{
    if (phase < 1 || phase > 3)
        throw std::invalid_argument("phase must be 1, 2 or 3");
    int offset = 0;
    for (int p = 1; p < phase; ++p)
        offset += phase_epochs[static_cast<size_t>(p - 1)];
    return offset;
}

void TrainingConfig::validate() const
{
    for (int e : phase_epochs) {
        if (e < 0)
            throw std::invalid_argument("phase epochs must be non-negative");
    }
    if (phases.empty())
        throw std::invalid_argument("at least one phase must be selected");
    for (size_t i = 0; i < phases.size(); ++i) {
        if (phases[i] < 1 || phases[i] > 3)
            throw std::invalid_argument("phases must be 1, 2 or 3");
        if (i > 0 && phases[i] <= phases[i - 1])
            throw std::invalid_argument("phases must be listed once, in increasing order");
    }
    optimizer.validate(total_epochs());
    loss.loss.validate();
    if (!(loss.depth_range.min_depth > 0.0) || !(loss.depth_range.max_depth > loss.depth_range.min_depth))
        throw std::invalid_argument("depth range must satisfy 0 < min_depth < max_depth");
    if (loss.scales < 1 || loss.scales > 4)
        throw std::invalid_argument("scales must be between 1 and 4");
    if (max_steps_per_phase < 0)
        throw std::invalid_argument("max_steps_per_phase must be non-negative");
    if (log_every < 1)
        throw std::invalid_argument("log_every must be >= 1");
}

json to_json(const TrainingConfig& c)
{
    return json{
        {"phase_epochs", c.phase_epochs},
        {"phases", c.phases},
        {"optimizer",
         {{"learning_rate", c.optimizer.learning_rate},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"decay_factor", c.optimizer.decay_factor},
          {"decay_epoch", c.optimizer.decay_epoch},
          {"batch_size", c.optimizer.batch_size},
          {"gradient_clip", c.optimizer.gradient_clip}}},
        {"loss",
         {{"alpha", c.loss.loss.alpha},
          {"eta", c.loss.loss.eta},
          {"lambda_g", c.loss.loss.lambda_g},
          {"lambda_f", c.loss.loss.lambda_f},
          {"lambda_d", c.loss.loss.lambda_d},
          {"min_depth", c.loss.depth_range.min_depth},
          {"max_depth", c.loss.depth_range.max_depth},
          {"scales", c.loss.scales}}},
        {"seed", c.seed},
        {"augment", c.augment},
        {"augment_options",
         {{"flip", c.augment_options.flip},
          {"flip_probability", c.augment_options.flip_probability},
          {"color_jitter", c.augment_options.color_jitter},
          {"brightness", c.augment_options.brightness},
          {"contrast", c.augment_options.contrast},
          {"saturation", c.augment_options.saturation}}},
        {"max_steps_per_phase", c.max_steps_per_phase},
        {"checkpoint_each_epoch", c.checkpoint_each_epoch},
        {"log_every", c.log_every},
    };
}

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

}  // namespace

TrainingConfig training_config_from_json(const json& j)
{
    reject_unknown_keys(j,
                        {"phase_epochs", "phases", "optimizer", "loss", "seed", "augment", "augment_options",
                         "max_steps_per_phase", "checkpoint_each_epoch", "log_every"},
                        "training config");
    TrainingConfig c;
    read_if(j, "phase_epochs", c.phase_epochs);
    read_if(j, "phases", c.phases);
    read_if(j, "seed", c.seed);
    read_if(j, "augment", c.augment);
    read_if(j, "max_steps_per_phase", c.max_steps_per_phase);
    read_if(j, "checkpoint_each_epoch", c.checkpoint_each_epoch);
    read_if(j, "log_every", c.log_every);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        reject_unknown_keys(o,
                            {"learning_rate", "beta1", "beta2", "decay_factor", "decay_epoch", "batch_size",
                             "gradient_clip"},
                            "optimizer config");
        read_if(o, "learning_rate", c.optimizer.learning_rate);
        read_if(o, "beta1", c.optimizer.beta1);
        read_if(o, "beta2", c.optimizer.beta2);
        read_if(o, "decay_factor", c.optimizer.decay_factor);
        read_if(o, "decay_epoch", c.optimizer.decay_epoch);
        read_if(o, "batch_size", c.optimizer.batch_size);
        read_if(o, "gradient_clip", c.optimizer.gradient_clip);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        reject_unknown_keys(
            l, {"alpha", "eta", "lambda_g", "lambda_f", "lambda_d", "min_depth", "max_depth", "scales"}, "loss config");
        read_if(l, "alpha", c.loss.loss.alpha);
        read_if(l, "eta", c.loss.loss.eta);
        read_if(l, "lambda_g", c.loss.loss.lambda_g);
        read_if(l, "lambda_f", c.loss.loss.lambda_f);
        read_if(l, "lambda_d", c.loss.loss.lambda_d);
        read_if(l, "min_depth", c.loss.depth_range.min_depth);
        read_if(l, "max_depth", c.loss.depth_range.max_depth);
        read_if(l, "scales", c.loss.scales);
    }
    if (j.contains("augment_options")) {
        const auto& a = j.at("augment_options");
        reject_unknown_keys(a, {"flip", "flip_probability", "color_jitter", "brightness", "contrast", "saturation"},
                            "augment options");
        read_if(a, "flip", c.augment_options.flip);
        read_if(a, "flip_probability", c.augment_options.flip_probability);
        read_if(a, "color_jitter", c.augment_options.color_jitter);
        read_if(a, "brightness", c.augment_options.brightness);
        read_if(a, "contrast", c.augment_options.contrast);
        read_if(a, "saturation", c.augment_options.saturation);
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- trainer

namespace {

torch::optim::Adam make_optimizer(nets::ComponentSet& nets, const OptimizerConfig& config)
{
    return torch::optim::Adam(nets.all_parameters(), torch::optim::AdamOptions(config.learning_rate)
                                                          .betas({config.beta1, config.beta2}));
}

json components_json(const std::map<std::string, double>& components)
{
    json j = json::object();
    for (const auto& [k, v] : components)
        j[k] = std::isfinite(v) ? json(v) : json(nullptr);
    return j;
}

void write_atomically(const fs::path& path, const std::function<void(const fs::path&)>& writer)
{
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    writer(tmp);
    fs::rename(tmp, path);
}

constexpr const char* kCheckpointDir = "checkpoints";

}  // namespace

Trainer::Trainer(nets::ComponentSet& nets, TrainingConfig config, fs::path output_dir)
    : nets_(nets), config_(std::move(config)), output_dir_(std::move(output_dir)),
      optimizer_(make_optimizer(nets, config_.optimizer))
{
    config_.validate();
}

int Trainer::current_global_epoch() const
{
    if (state_.phase_index >= static_cast<int>(config_.phases.size()))
        return config_.total_epochs();
    const int phase = config_.phases[static_cast<size_t>(state_.phase_index)];
    return config_.phase_offset(phase) + state_.epoch_in_phase;
}

void Trainer::log_line(const json& line) const
{
    if (output_dir_.empty())
        return;
    fs::create_directories(output_dir_);
    std::ofstream out(output_dir_ / "metrics.jsonl", std::ios::app);
    out << line.dump() << '\n';
}

StepRecord Trainer::step(const data::Batch& batch, int phase)
{
    if (nets_.trainable_flags() != phase_trainable(phase))
        throw std::invalid_argument("component trainable flags do not match phase " + std::to_string(phase));

    const double lr = learning_rate_at(config_.optimizer, current_global_epoch());
    for (auto& group : optimizer_.param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

    optimizer_.zero_grad();
    auto loss = compute_phase_loss(phase, batch, nets_, config_.loss);
    if (!std::isfinite(loss.components.at("total")))
        throw NumericalFailure("non-finite loss in phase " + std::to_string(phase), batch.ids);
    loss.total.backward();

    std::vector<torch::Tensor> with_grad;
    for (const auto& p : nets_.all_parameters()) {
        if (p.grad().defined())
            with_grad.push_back(p);
    }
    double grad_norm = 0.0;
    if (!with_grad.empty()) {
        if (config_.optimizer.gradient_clip > 0.0) {
            grad_norm = torch::nn::utils::clip_grad_norm_(with_grad, config_.optimizer.gradient_clip);
        } else {
            torch::NoGradGuard no_grad;
            auto sq = torch::zeros({}, torch::kFloat64);
            for (const auto& p : with_grad)
                sq = sq + p.grad().to(torch::kFloat64).pow(2).sum();
            grad_norm = std::sqrt(sq.item<double>());
        }
    }
    if (!std::isfinite(grad_norm))
        throw NumericalFailure("non-finite gradient in phase " + std::to_string(phase), batch.ids);
    optimizer_.step();

    ++state_.global_step;
    ++state_.steps_in_phase;
    StepRecord record;
    record.step = state_.global_step;
    record.phase = phase;
    record.global_epoch = current_global_epoch();
    record.learning_rate = lr;
    record.components = loss.components;
    record.components["grad_norm"] = grad_norm;
    return record;
}

std::map<std::string, double> Trainer::evaluate(const data::SnippetDataset& dataset, int phase)
{
    std::map<std::string, double> sums;
    if (dataset.size() == 0)
        return sums;
    torch::NoGradGuard no_grad;
    nets_.eval();
    size_t count = 0;
    const auto batch_size = static_cast<size_t>(config_.optimizer.batch_size);
    for (size_t start = 0; start < dataset.size(); start += batch_size) {
        std::vector<data::Snippet> snippets;
        for (size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i)
            snippets.push_back(dataset.get(i));
        const auto loss = compute_phase_loss(phase, data::collate(snippets), nets_, config_.loss);
        for (const auto& [k, v] : loss.components)
            sums[k] += v * static_cast<double>(snippets.size());
        count += snippets.size();
    }
    nets_.restore_modes();
    for (auto& [k, v] : sums)
        v /= static_cast<double>(count);
    return sums;
}

void Trainer::save_checkpoint(const fs::path& path) const
{
    write_atomically(path, [&](const fs::path& tmp) {
        torch::serialize::OutputArchive archive;
        nets_.save(archive);
        torch::serialize::OutputArchive opt;
        optimizer_.save(opt);
        archive.write("optimizer", opt);
        archive.write("training_state",
                      torch::tensor({static_cast<int64_t>(state_.phase_index),
                                     static_cast<int64_t>(state_.epoch_in_phase), state_.global_step,
                                     state_.steps_in_phase, static_cast<int64_t>(state_.finished)},
                                    torch::kInt64));
        archive.write("training_config", c10::IValue(to_json(config_).dump()));
        archive.save_to(tmp.string());
    });
}

void Trainer::load_checkpoint(const fs::path& path)
{
    if (!fs::exists(path))
        throw std::invalid_argument("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    nets_.load(archive);
    torch::serialize::InputArchive opt;
    archive.read("optimizer", opt);
    optimizer_.load(opt);
    torch::Tensor st;
    archive.read("training_state", st);
    const auto v = st.to(torch::kInt64).contiguous();
    const auto* p = v.data_ptr<int64_t>();
    state_.phase_index = static_cast<int>(p[0]);
    state_.epoch_in_phase = static_cast<int>(p[1]);
    state_.global_step = p[2];
    state_.steps_in_phase = p[3];
    state_.finished = p[4] != 0;
}

RunSummary Trainer::run(const data::SnippetDataset& train, const data::SnippetDataset* validation)
{
    if (train.size() == 0)
        throw std::invalid_argument("training set is empty");
    RunSummary summary;
    const fs::path ckpt_dir = output_dir_.empty() ? fs::path{} : output_dir_ / kCheckpointDir;
    const auto batch_size = static_cast<size_t>(config_.optimizer.batch_size);

    while (state_.phase_index < static_cast<int>(config_.phases.size())) {
        const int phase = config_.phases[static_cast<size_t>(state_.phase_index)];
        const int epochs = config_.phase_epochs[static_cast<size_t>(phase - 1)];
        nets_.set_trainable(phase_trainable(phase));
        log_line({{"type", "phase_start"}, {"phase", phase}, {"epoch_in_phase", state_.epoch_in_phase},
                  {"step", state_.global_step}});

        bool budget_reached = false;
        while (state_.epoch_in_phase < epochs && !budget_reached) {
            const int global_epoch = current_global_epoch();
            std::mt19937_64 rng(config_.seed * 1000003ULL + static_cast<uint64_t>(global_epoch));
            std::vector<size_t> order(train.size());
            std::iota(order.begin(), order.end(), size_t{0});
            std::shuffle(order.begin(), order.end(), rng);

            double loss_sum = 0.0, pe_sum = 0.0;
            size_t batches = 0;
            for (size_t start = 0; start < order.size(); start += batch_size) {
                if (config_.max_steps_per_phase > 0 && state_.steps_in_phase >= config_.max_steps_per_phase) {
                    budget_reached = true;
                    break;
                }
                std::vector<data::Snippet> snippets;
                for (size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
                    auto s = train.get(order[i]);
                    snippets.push_back(config_.augment ? data::augment(s, config_.augment_options, rng) : s);
                }
                const auto batch = data::collate(snippets);
                StepRecord record;
                try {
                    record = step(batch, phase);
                } catch (const NumericalFailure& e) {
                    log_line({{"type", "failure"}, {"phase", phase}, {"step", state_.global_step + 1},
                              {"message", e.what()}, {"snippets", e.snippet_ids()}});
                    throw;
                }
                loss_sum += record.components.at("total");
                pe_sum += record.components.at("photometric_unmasked");
                ++batches;
                if (record.step % config_.log_every == 0)
                    log_line({{"type", "step"}, {"step", record.step}, {"phase", phase},
                              {"epoch", record.global_epoch}, {"lr", record.learning_rate},
                              {"loss", components_json(record.components)}});
                if (on_step)
                    on_step(record);
                summary.steps.push_back(std::move(record));
            }
            if (config_.max_steps_per_phase > 0 && state_.steps_in_phase >= config_.max_steps_per_phase)
                budget_reached = true;

            EpochRecord epoch;
            epoch.phase = phase;
            epoch.global_epoch = global_epoch;
            epoch.mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
            epoch.mean_photometric_unmasked = batches ? pe_sum / static_cast<double>(batches) : 0.0;
            if (validation != nullptr && validation->size() > 0) {
                const auto val = evaluate(*validation, phase);
                epoch.val_loss = val.at("total");
                epoch.val_photometric = val.at("photometric_unmasked");
            }
            json line{{"type", "epoch"},
                      {"phase", phase},
                      {"epoch", global_epoch},
                      {"step", state_.global_step},
                      {"mean_loss", epoch.mean_loss},
                      {"mean_photometric_unmasked", epoch.mean_photometric_unmasked}};
            if (epoch.val_loss) {
                line["val_loss"] = *epoch.val_loss;
                line["val_photometric"] = *epoch.val_photometric;
            }
            log_line(line);
            summary.epochs.push_back(epoch);

            ++state_.epoch_in_phase;
            if (budget_reached)
                state_.epoch_in_phase = epochs;
            const bool phase_done = state_.epoch_in_phase >= epochs;
            if (phase_done) {
                ++state_.phase_index;
                state_.epoch_in_phase = 0;
                state_.steps_in_phase = 0;
                state_.finished = state_.phase_index >= static_cast<int>(config_.phases.size());
            }
            if (!ckpt_dir.empty()) {
                if (config_.checkpoint_each_epoch) {
                    char name[32];
                    std::snprintf(name, sizeof(name), "epoch_%03d.pt", global_epoch + 1);
                    save_checkpoint(ckpt_dir / name);
                }
                save_checkpoint(ckpt_dir / "latest.pt");
            }
            if (phase_done)
                break;
        }
        if (epochs == 0) {
            ++state_.phase_index;
            state_.epoch_in_phase = 0;
            state_.steps_in_phase = 0;
            state_.finished = state_.phase_index >= static_cast<int>(config_.phases.size());
        }
        if (!ckpt_dir.empty()) {
            const auto path = ckpt_dir / ("phase_" + std::to_string(phase) + ".pt");
            save_checkpoint(path);
            summary.phase_checkpoints.push_back(path);
        }
        log_line({{"type", "phase_end"}, {"phase", phase}, {"step", state_.global_step}});
    }
    state_.finished = true;
    nets_.restore_modes();
    return summary;
}

std::optional<fs::path> latest_checkpoint(const fs::path& output_dir)
{
    const auto path = output_dir / kCheckpointDir / "latest.pt";
    if (fs::exists(path))
        return path;
    return std::nullopt;
}

}  // namespace asanet::training
