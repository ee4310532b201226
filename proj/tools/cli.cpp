#include "cli.hpp"

#include "dafdft/gradient_suite.hpp"
#include "dafdft/pipeline.hpp"
#include "dafdft/version.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace dafdft::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::uint64_t default_seed()
{
    if (const char* env = std::getenv("DAFDFT_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw UsageError(std::string("DAFDFT_SEED is not an unsigned integer: ") + env);
        }
    }
    return 0;
}

std::string two_decimals(double fraction)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
    return buf;
}

fs::path sibling(const fs::path& file, const std::string& suffix)
{
    fs::path p = file;
    p.replace_extension();
    return p.string() + suffix;
}

void ensure_parent(const fs::path& file)
{
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

void write_text(const fs::path& path, const std::string& text)
{
    ensure_parent(path);
    std::ofstream f(path);
    f << text;
    if (!f) throw DataError("failed writing " + path.string());
}

void write_manifest(const fs::path& path, const std::string& command, const std::vector<std::string>& args,
                    json config, json inputs, json outputs)
{
    const json manifest{{"command", command},
                        {"arguments", args},
                        {"config", std::move(config)},
                        {"inputs", std::move(inputs)},
                        {"outputs", std::move(outputs)},
                        {"toolkit_version", kVersion}};
    write_text(path, manifest.dump(2) + "\n");
}

Dataset load(const fs::path& root, int resolution, std::ostream& err)
{
    LoadReport report;
    Dataset data = load_dataset(root, resolution, &report);
    for (const auto& w : report.warnings) err << "warning: skipped " << w << '\n';
    if (!report.warnings.empty()) err << "warning: " << report.warnings.size() << " unreadable file(s) skipped\n";
    return data;
}

// Flags shared by the training commands.
struct TrainFlags {
    int epochs = 200;
    int batch_size = 0;  // 0: phase default
    int patience = 20;
    int eval_batch_size = 16;
    std::string optimizer = "adam";
    double lr = 0.0;  // 0: phase default
    double max_grad_norm = 0.0;
    std::uint64_t seed = 0;

    void add(CLI::App* app)
    {
        app->add_option("--epochs", epochs, "Maximum number of epochs")->check(CLI::PositiveNumber);
        app->add_option("--batch-size", batch_size, "Mini-batch size")->check(CLI::Range(2, 1 << 20));
        app->add_option("--patience", patience, "Early-stopping patience in epochs")->check(CLI::PositiveNumber);
        app->add_option("--eval-batch-size", eval_batch_size, "Images per inference chunk")->check(CLI::PositiveNumber);
        app->add_option("--optimizer", optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
        app->add_option("--lr", lr, "Learning rate")->check(CLI::PositiveNumber);
        app->add_option("--max-grad-norm", max_grad_norm, "Clip gradients to this global norm")->check(CLI::PositiveNumber);
        app->add_option("--seed", seed, "Seed for initialisation, shuffling and augmentation (default $DAFDFT_SEED or 0)");
    }

    TrainConfig resolve(const TrainConfig& phase_defaults) const
    {
        TrainConfig c = phase_defaults;
        const OptimizerKind kind = parse_optimizer_kind(optimizer);
        if (kind != c.optimizer.kind) c.optimizer = OptimizerConfig::defaults(kind);
        if (lr > 0) c.optimizer.learning_rate = lr;
        if (max_grad_norm > 0) c.optimizer.max_grad_norm = max_grad_norm;
        if (batch_size > 0) c.batch_size = batch_size;
        c.max_epochs = epochs;
        c.patience = patience;
        c.eval_batch_size = eval_batch_size;
        c.seed = seed;
        return c;
    }
};

json to_json(const TrainConfig& c)
{
    return {{"optimizer", c.optimizer}, {"batch_size", c.batch_size},           {"max_epochs", c.max_epochs},
            {"patience", c.patience},   {"eval_batch_size", c.eval_batch_size}, {"seed", c.seed}};
}

json to_json(const CutoutConfig& c)
{
    return {{"base_mask", c.base_mask}, {"alpha", c.iterations}, {"beta", c.size_multiplier}, {"enabled", c.enabled}};
}

struct FinetuneFlags {
    int ftt_repeats = 3;
    int mb_repeats = 4;
    int cutout_alpha = 3;
    int cutout_beta = 5;
    bool no_cutout = false;
    TrainFlags train;

    void add(CLI::App* app)
    {
        app->add_option("--ftt-repeats", ftt_repeats, "FTT stages (M)")->check(CLI::Range(2, 6));
        app->add_option("--mb-repeats", mb_repeats, "MBblockV3 repeats (N)")->check(CLI::PositiveNumber);
        app->add_option("--cutout-alpha", cutout_alpha, "Cutout masks per image")->check(CLI::PositiveNumber);
        app->add_option("--cutout-beta", cutout_beta, "Largest Cutout size multiplier (5 for face swaps, 10 for GAN images)")
            ->check(CLI::PositiveNumber);
        app->add_flag("--no-cutout", no_cutout, "Disable Cutout augmentation");
        train.add(app);
    }

    /// Full fine-tune config against a given backbone checkpoint.
    FinetuneConfig resolve(const Checkpoint& backbone) const
    {
        FinetuneConfig c;
        c.model.ftt_repeats = ftt_repeats;
        c.model.mbblock_repeats = mb_repeats;
        c.model.ftt_channels.clear();
        for (int i = 0; i < ftt_repeats; ++i) c.model.ftt_channels.push_back(std::min(32 << i, 256));
        try {
            c.model.backbone_kind = parse_backbone_kind(backbone.metadata.at("backbone_kind").get<std::string>());
            c.model.input_resolution = backbone.metadata.at("input_resolution").get<int>();
        } catch (const std::exception& e) {
            throw CheckpointError(CheckpointError::Code::Malformed, std::string("backbone checkpoint metadata: ") + e.what());
        }
        c.cutout.iterations = cutout_alpha;
        c.cutout.size_multiplier = cutout_beta;
        c.cutout.enabled = !no_cutout;
        c.train = train.resolve(c.train);
        c.model.validate();
        return c;
    }
};

json to_json(const FinetuneConfig& c)
{
    return {{"model", c.model}, {"cutout", to_json(c.cutout)}, {"train", to_json(c.train)}};
}

Checkpoint load_backbone_checkpoint(const fs::path& path)
{
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.metadata.value("kind", std::string()) != "backbone")
        throw CheckpointError(CheckpointError::Code::ConfigMismatch, path.string() + " is not a backbone checkpoint");
    return ckpt;
}

void report_warnings(const TrainResult& r, std::ostream& err)
{
    for (const auto& w : r.warnings) err << "warning: " << w << '\n';
}

/// Copies the epoch log into a file and, tagged, to the progress stream.
class EpochLog : public std::streambuf {
public:
    EpochLog(const fs::path& path, std::ostream& progress, std::string tag) : progress_(progress), tag_(std::move(tag))
    {
        ensure_parent(path);
        file_.open(path);
        if (!file_) throw DataError("cannot write " + path.string());
    }

protected:
    int overflow(int c) override
    {
        if (c == traits_type::eof()) return 0;
        file_.put(static_cast<char>(c));
        line_.push_back(static_cast<char>(c));
        if (c == '\n') {
            file_.flush();
            progress_ << tag_ << ' ' << line_ << std::flush;
            line_.clear();
        }
        return c;
    }

private:
    std::ofstream file_;
    std::ostream& progress_;
    std::string tag_, line_;
};

TrainResult run_finetune(const Checkpoint& backbone, const Dataset& data, FinetuneConfig config, const fs::path& log_path,
                         std::ostream& err, const std::string& tag)
{
    EpochLog log(log_path, err, tag);
    std::ostream stream(&log);
    config.train.log = &stream;
    TrainResult result = finetune(backbone, data, config);
    report_warnings(result, err);
    return result;
}

const DatasetSplit& role_split(const Dataset& data, Role role)
{
    const auto it = data.find(role);
    if (it == data.end() || it->second.empty())
        throw DataError("the " + std::string(to_string(role)) + " split is missing or empty");
    return it->second;
}

json eval_json(const EvalResult& r)
{
    return {{"accuracy", r.accuracy},
            {"auroc", r.auroc ? json(*r.auroc) : json()},
            {"n_samples", r.n_samples},
            {"threshold", r.threshold},
            {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}}};
}

// Subcommands.

struct Invocation {
    std::vector<std::string> args;
    std::ostream& out;
    std::ostream& err;
};

int cmd_synth(const Invocation& io, const fs::path& out_dir, const SynthSpec& spec)
{
    const Dataset data = synth_dataset(spec);
    write_dataset(data, out_dir);
    json counts;
    for (const auto& [role, split] : data) counts[std::string(to_string(role))] = split.size();
    write_manifest(out_dir / "manifest.json", "synth", io.args,
                   {{"n_per_class", spec.n_per_class},
                    {"seed", spec.seed},
                    {"amplitude", spec.amplitude},
                    {"resolution", spec.resolution}},
                   json::object(), {{"dataset", out_dir.string()}, {"items", counts}});
    io.out << "wrote synthetic dataset to " << out_dir.string() << ' ' << counts.dump() << '\n';
    return kOk;
}

int cmd_pretrain(const Invocation& io, const fs::path& data_dir, const std::string& backbone, const fs::path& out,
                 int resolution, const TrainFlags& flags)
{
    PretrainConfig config;
    config.backbone_kind = parse_backbone_kind(backbone);
    config.input_resolution = resolution;
    config.train = flags.resolve(config.train);
    const Dataset data = load(data_dir, resolution, io.err);

    const fs::path log_path = sibling(out, ".log.csv");
    EpochLog log(log_path, io.err, "pretrain");
    std::ostream stream(&log);
    config.train.log = &stream;
    const TrainResult result = pretrain(data, config);
    report_warnings(result, io.err);

    ensure_parent(out);
    save_checkpoint(result.checkpoint, out);
    write_manifest(sibling(out, ".manifest.json"), "pretrain", io.args,
                   {{"backbone_kind", backbone}, {"input_resolution", resolution}, {"train", to_json(config.train)}},
                   {{"data", data_dir.string()}}, {{"checkpoint", out.string()}, {"log", log_path.string()}});
    io.out << "best epoch " << result.state.best_epoch << " of " << result.state.epoch << ", validation loss "
           << result.state.best_val_loss << "\nwrote " << out.string() << '\n';
    return kOk;
}

int cmd_finetune(const Invocation& io, const fs::path& backbone_path, const fs::path& data_dir, const fs::path& out,
                 bool no_channel_attention, const FinetuneFlags& flags)
{
    const Checkpoint backbone = load_backbone_checkpoint(backbone_path);
    FinetuneConfig config = flags.resolve(backbone);
    config.model.use_channel_attention = !no_channel_attention;
    const Dataset data = load(data_dir, config.model.input_resolution, io.err);

    const fs::path log_path = sibling(out, ".log.csv");
    const TrainResult result = run_finetune(backbone, data, config, log_path, io.err, "finetune");
    ensure_parent(out);
    save_checkpoint(result.checkpoint, out);
    write_manifest(sibling(out, ".manifest.json"), "finetune", io.args, to_json(config),
                   {{"backbone_checkpoint", backbone_path.string()}, {"data", data_dir.string()}},
                   {{"checkpoint", out.string()}, {"log", log_path.string()}});
    io.out << "best epoch " << result.state.best_epoch << " of " << result.state.epoch << ", validation loss "
           << result.state.best_val_loss << "\nwrote " << out.string() << '\n';
    return kOk;
}

int cmd_eval(const Invocation& io, const fs::path& ckpt_path, const fs::path& data_dir, const std::string& role_name,
             fs::path result_path, int eval_batch_size)
{
    const Role role = parse_role(role_name);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::string kind = ckpt.metadata.value("kind", std::string());

    std::vector<double> scores;
    const DatasetSplit* split = nullptr;
    Dataset data;
    if (kind == "model") {
        Model model = Model::from_checkpoint(ckpt);
        data = load(data_dir, model.config().input_resolution, io.err);
        split = &role_split(data, role);
        scores = predict(model, *split, eval_batch_size);
    } else if (kind == "backbone") {
        auto backbone = backbone_from_checkpoint(ckpt);
        data = load(data_dir, ckpt.metadata.value("input_resolution", 64), io.err);
        split = &role_split(data, role);
        scores = predict(backbone, *split, eval_batch_size);
    } else {
        throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                              ckpt_path.string() + " holds neither a model nor a backbone");
    }

    const EvalResult result = evaluate(scores, split->labels);
    if (result_path.empty()) result_path = sibling(ckpt_path, "." + role_name + ".eval.json");
    write_text(result_path, eval_json(result).dump(2) + "\n");
    write_manifest(sibling(result_path, ".manifest.json"), "eval", io.args,
                   {{"role", role_name}, {"threshold", result.threshold}},
                   {{"checkpoint", ckpt_path.string()}, {"data", data_dir.string()}}, {{"result", result_path.string()}});

    io.out << "ACC (%): " << two_decimals(result.accuracy)
           << "  AUROC (%): " << (result.auroc ? two_decimals(*result.auroc) : std::string("undefined")) << '\n';
    if (!result.auroc) {
        io.err << "error: AUROC is undefined because the " << role_name << " split holds a single class\n";
        return kDataError;
    }
    return kOk;
}

int cmd_ablate(const Invocation& io, const fs::path& backbone_path, const fs::path& data_dir, const fs::path& out_dir,
               const FinetuneFlags& flags)
{
    const Checkpoint backbone = load_backbone_checkpoint(backbone_path);
    FinetuneConfig with_ca = flags.resolve(backbone);
    with_ca.model.use_channel_attention = true;
    FinetuneConfig without_ca = with_ca;
    without_ca.model.use_channel_attention = false;
    const Dataset data = load(data_dir, with_ca.model.input_resolution, io.err);
    const DatasetSplit& test = role_split(data, Role::Test);

    struct Arm {
        std::string label, file;
        FinetuneConfig config;
        EvalResult result;
    };
    std::vector<Arm> arms{{"FDFtNet", "fdftnet", without_ca, {}}, {"DA-FDFtNet", "da-fdftnet", with_ca, {}}};
    json outputs;
    for (auto& arm : arms) {
        const TrainResult trained =
            run_finetune(backbone, data, arm.config, out_dir / (arm.file + ".log.csv"), io.err, arm.file);
        const fs::path ckpt_path = out_dir / (arm.file + ".ckpt");
        save_checkpoint(trained.checkpoint, ckpt_path);
        Model model = Model::from_checkpoint(trained.checkpoint);
        arm.result = evaluate(predict(model, test, arm.config.train.eval_batch_size), test.labels);
        outputs[arm.file] = {{"checkpoint", ckpt_path.string()},
                             {"log", (out_dir / (arm.file + ".log.csv")).string()},
                             {"best_epoch", trained.state.best_epoch},
                             {"epochs_run", trained.state.epoch},
                             {"test", eval_json(arm.result)}};
    }

    const AblationReport report =
        ablation_compare(arms[1].result, arms[0].result, arms[1].label, arms[0].label, std::string(to_string(with_ca.model.backbone_kind)));
    write_text(out_dir / "ablation.txt", report.to_text());
    write_text(out_dir / "ablation.csv", report.to_csv());
    outputs["report_text"] = (out_dir / "ablation.txt").string();
    outputs["report_csv"] = (out_dir / "ablation.csv").string();
    write_manifest(out_dir / "manifest.json", "ablate", io.args, to_json(with_ca),
                   {{"backbone_checkpoint", backbone_path.string()}, {"data", data_dir.string()}}, outputs);
    io.out << report.to_text();
    return kOk;
}

int cmd_gradcheck(const Invocation& io, double tolerance, int seeds)
{
    GradientSuiteOptions options;
    options.tolerance = tolerance;
    options.seeds = seeds;
    const auto reports = run_gradient_suite(options);
    int failures = 0;
    for (const auto& r : reports) {
        char line[160];
        std::snprintf(line, sizeof line, "%-20s max_rel_err %.3e  %s", r.op_name.c_str(), r.max_relative_error,
                      r.passed ? "PASS" : "FAIL");
        io.out << line << '\n';
        for (const auto& [param, err] : r.per_parameter_errors) {
            std::snprintf(line, sizeof line, "    %-36s %.3e", param.c_str(), err);
            io.out << line << '\n';
        }
        if (!r.failure.empty()) io.out << "    " << r.failure << '\n';
        failures += r.passed ? 0 : 1;
    }
    io.out << reports.size() - static_cast<std::size_t>(failures) << '/' << reports.size()
           << " operations within relative tolerance " << tolerance << " over " << seeds << " seeds\n";
    return failures == 0 ? kOk : kCheckFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Fake-image detection toolkit: pretrain, fine-tune, evaluate, ablate", "dafdft"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    const Invocation io{args, out, err};
    std::function<int()> action;
    std::uint64_t seed = 0;
    try {
        seed = default_seed();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kBadFlags;
    }

    // synth
    auto* synth = app.add_subcommand("synth", "Write the synthetic checkerboard-artifact dataset");
    std::string synth_out;
    SynthSpec spec;
    spec.seed = seed;
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_option("--n-per-class", spec.n_per_class, "Images per class before splitting")->check(CLI::PositiveNumber);
    synth->add_option("--seed", spec.seed, "Generator seed");
    synth->add_option("--amplitude", spec.amplitude, "Checkerboard amplitude on fake images")->check(CLI::Range(0.0, 1.0));
    synth->add_option("--resolution", spec.resolution, "Image side length")->check(CLI::PositiveNumber);
    synth->callback([&] { action = [&] { return cmd_synth(io, synth_out, spec); }; });

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Train a backbone with its own classification head");
    std::string pre_data, pre_backbone, pre_out;
    int pre_resolution = 64;
    TrainFlags pre_flags;
    pre_flags.seed = seed;
    pre->add_option("--data", pre_data, "Dataset root")->required();
    pre->add_option("--backbone", pre_backbone, "plain-cnn or sep-cnn")->required()->check(CLI::IsMember({"plain-cnn", "sep-cnn"}));
    pre->add_option("--out", pre_out, "Output checkpoint")->required();
    pre->add_option("--resolution", pre_resolution, "Input side length")->check(CLI::PositiveNumber);
    pre_flags.add(pre);
    pre->callback([&] { action = [&] { return cmd_pretrain(io, pre_data, pre_backbone, pre_out, pre_resolution, pre_flags); }; });

    // finetune
    auto* ft = app.add_subcommand("finetune", "Fine-tune the full model around a frozen backbone");
    std::string ft_backbone, ft_data, ft_out;
    bool ft_no_ca = false;
    FinetuneFlags ft_flags;
    ft_flags.train.seed = seed;
    ft->add_option("--backbone-ckpt", ft_backbone, "Pretrained backbone checkpoint")->required();
    ft->add_option("--data", ft_data, "Dataset root")->required();
    ft->add_option("--out", ft_out, "Output model checkpoint")->required();
    ft->add_flag("--no-channel-attention", ft_no_ca, "Drop the channel attention module");
    ft_flags.add(ft);
    ft->callback([&] { action = [&] { return cmd_finetune(io, ft_backbone, ft_data, ft_out, ft_no_ca, ft_flags); }; });

    // eval
    auto* ev = app.add_subcommand("eval", "Report ACC and AUROC of a checkpoint on one split");
    std::string ev_ckpt, ev_data, ev_role = "test", ev_out;
    int ev_batch = 16;
    ev->add_option("--ckpt", ev_ckpt, "Model or backbone checkpoint")->required();
    ev->add_option("--data", ev_data, "Dataset root")->required();
    ev->add_option("--role", ev_role, "Split to evaluate")->check(CLI::IsMember({"train", "validation", "test", "finetune"}));
    ev->add_option("--out", ev_out, "Result file (default: beside the checkpoint)");
    ev->add_option("--eval-batch-size", ev_batch, "Images per inference chunk")->check(CLI::PositiveNumber);
    ev->callback([&] { action = [&] { return cmd_eval(io, ev_ckpt, ev_data, ev_role, ev_out, ev_batch); }; });

    // ablate
    auto* ab = app.add_subcommand("ablate", "Fine-tune with and without channel attention and compare");
    std::string ab_backbone, ab_data, ab_out;
    FinetuneFlags ab_flags;
    ab_flags.train.seed = seed;
    ab->add_option("--backbone-ckpt", ab_backbone, "Pretrained backbone checkpoint")->required();
    ab->add_option("--data", ab_data, "Dataset root")->required();
    ab->add_option("--out-dir", ab_out, "Output directory")->required();
    ab_flags.add(ab);
    ab->callback([&] { action = [&] { return cmd_ablate(io, ab_backbone, ab_data, ab_out, ab_flags); }; });

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks over every operation");
    double gc_tolerance = 1e-3;
    int gc_seeds = 5;
    gc->add_option("--tolerance", gc_tolerance, "Relative error tolerance")->check(CLI::PositiveNumber);
    gc->add_option("--seeds", gc_seeds, "Seeds per operation")->check(CLI::PositiveNumber);
    gc->callback([&] { action = [&] { return cmd_gradcheck(io, gc_tolerance, gc_seeds); }; });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subcommands = app.get_subcommands();
        err << (subcommands.empty() ? app.help() : subcommands.front()->help());
        return kBadFlags;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kBadFlags;
    }

    try {
        return action();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kBadFlags;
    } catch (const MetricError& e) {
        err << "error: metrics: " << e.what() << '\n';
        return kDataError;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kBadFlags;
    } catch (const NonFiniteLoss& e) {
        err << "error: training diverged: " << e.what() << '\n';
        return kNonFinite;
    } catch (const CheckpointError& e) {
        err << "error: checkpoint: " << e.what() << '\n';
        return kDataError;
    } catch (const DataError& e) {
        err << "error: data: " << e.what() << '\n';
        return kDataError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternalError;
    }
}

}  // namespace dafdft::cli
