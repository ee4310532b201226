#include "dafdft/model.hpp"

namespace dafdft {

namespace {

using Code = CheckpointError::Code;

void require(bool ok, const std::string& message)
{
    if (!ok) throw std::invalid_argument("invalid model config: " + message);
}

void freeze(const std::vector<NamedTensor>& tensors)
{
    for (auto t : tensors) {
        t.tensor.set_requires_grad(false);
        t.tensor.zero_grad();
    }
}

}  // namespace

void ModelConfig::validate() const
{
    require(ftt_repeats >= 2, "ftt_repeats (M) must be at least 2 to fuse with backbone features");
    require(static_cast<int>(ftt_channels.size()) == ftt_repeats, "ftt_channels must list one width per FTT stage");
    require(mbblock_repeats >= 1, "mbblock_repeats (N) must be positive");
    require(mbblock_expansion >= 1, "mbblock_expansion must be positive");
    require(mbblock_channels >= 1, "mbblock_channels must be positive");
    require(se_ratio >= 1, "se_ratio must be positive");
    require(input_resolution > 0 && input_resolution % (1 << ftt_repeats) == 0,
            "input_resolution must be divisible by 2^M");
    require(input_resolution % 4 == 0, "input_resolution must be divisible by 4");
    for (int i = 0; i < ftt_repeats; ++i) {
        require(ftt_channels[static_cast<std::size_t>(i)] > 0, "ftt_channels must be positive");
        // stage i attends over the previous width (the stem width for stage 0)
        const int attended = ftt_channels[static_cast<std::size_t>(std::max(i - 1, 0))];
        require(attended % 8 == 0, "self-attention widths must be divisible by 8");
    }
    const int fused = static_cast<int>(kBackboneChannels.back()) + ftt_channels.back();
    require((fused * mbblock_expansion) % se_ratio == 0 && (mbblock_channels * mbblock_expansion) % se_ratio == 0,
            "se_ratio must divide every MBblockV3 hidden width");
}

int ModelConfig::backbone_pool_factor() const { return (1 << ftt_repeats) / 4; }

void to_json(nlohmann::json& j, const ModelConfig& c)
{
    j = nlohmann::json{{"ftt_repeats", c.ftt_repeats},
                       {"mbblock_repeats", c.mbblock_repeats},
                       {"ftt_channels", c.ftt_channels},
                       {"mbblock_expansion", c.mbblock_expansion},
                       {"mbblock_channels", c.mbblock_channels},
                       {"se_ratio", c.se_ratio},
                       {"backbone_kind", std::string(to_string(c.backbone_kind))},
                       {"use_channel_attention", c.use_channel_attention},
                       {"input_resolution", c.input_resolution}};
}

void from_json(const nlohmann::json& j, ModelConfig& c)
{
    j.at("ftt_repeats").get_to(c.ftt_repeats);
    j.at("mbblock_repeats").get_to(c.mbblock_repeats);
    j.at("ftt_channels").get_to(c.ftt_channels);
    j.at("mbblock_expansion").get_to(c.mbblock_expansion);
    j.at("mbblock_channels").get_to(c.mbblock_channels);
    j.at("se_ratio").get_to(c.se_ratio);
    c.backbone_kind = parse_backbone_kind(j.at("backbone_kind").get<std::string>());
    j.at("use_channel_attention").get_to(c.use_channel_attention);
    j.at("input_resolution").get_to(c.input_resolution);
}

std::vector<NamedTensor> backbone_tensors(const BackboneParams<float>& backbone, bool with_head)
{
    std::vector<NamedTensor> out;
    backbone.visit(
        "backbone", [&](const std::string& name, const Tensor& t, ParamKind) { out.push_back({name, t}); }, with_head);
    return out;
}

Checkpoint backbone_to_checkpoint(const BackboneParams<float>& backbone, int input_resolution)
{
    Checkpoint ckpt;
    ckpt.metadata = {{"kind", "backbone"},
                     {"backbone_kind", std::string(to_string(backbone.kind))},
                     {"input_resolution", input_resolution}};
    for (const auto& t : backbone_tensors(backbone)) ckpt.tensors.push_back({t.name, t.tensor.detach()});
    return ckpt;
}

BackboneParams<float> backbone_from_checkpoint(const Checkpoint& checkpoint)
{
    if (checkpoint.metadata.value("kind", std::string()) != "backbone")
        throw CheckpointError(Code::ConfigMismatch, "checkpoint does not hold a standalone backbone");
    BackboneKind kind;
    try {
        kind = parse_backbone_kind(checkpoint.metadata.at("backbone_kind").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(Code::Malformed, std::string("backbone checkpoint metadata: ") + e.what());
    }
    auto backbone = build_backbone<float>(kind, std::uint64_t{0});
    restore_tensors(checkpoint, backbone_tensors(backbone));
    return backbone;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {}

Model Model::initialise(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    Model m(config);
    Rng rng(seed);
    m.backbone = build_backbone<float>(config.backbone_kind, rng);
    m.ftt = FttParams<float>::create(config.ftt_channels, rng);
    Index in = kBackboneChannels.back() + config.ftt_channels.back();
    for (int i = 0; i < config.mbblock_repeats; ++i) {
        m.mbblocks.push_back(MBBlockParams<float>::create(in, config.mbblock_channels, config.mbblock_expansion,
                                                          config.se_ratio, 1, rng));
        in = config.mbblock_channels;
    }
    m.classifier = DenseParams<float>::glorot(in, 1, rng);
    return m;
}

Model Model::assemble(const Checkpoint& backbone_checkpoint, const ModelConfig& config, std::uint64_t seed)
{
    const auto& meta = backbone_checkpoint.metadata;
    if (meta.value("kind", std::string()) != "backbone")
        throw CheckpointError(Code::ConfigMismatch, "assemble() needs a standalone backbone checkpoint");
    if (meta.value("backbone_kind", std::string()) != to_string(config.backbone_kind))
        throw CheckpointError(Code::ConfigMismatch, "checkpoint backbone is " + meta.value("backbone_kind", std::string("?")) +
                                                        " but the config asks for " +
                                                        std::string(to_string(config.backbone_kind)));
    if (meta.value("input_resolution", 0) != config.input_resolution)
        throw CheckpointError(Code::ConfigMismatch, "checkpoint input resolution does not match the config");

    Model m = initialise(config, seed);
    m.backbone = backbone_from_checkpoint(backbone_checkpoint);
    freeze(backbone_tensors(m.backbone));
    return m;
}

Model Model::from_checkpoint(const Checkpoint& checkpoint)
{
    if (checkpoint.metadata.value("kind", std::string()) != "model")
        throw CheckpointError(Code::ConfigMismatch, "checkpoint does not hold an assembled model");
    ModelConfig config;
    try {
        config = checkpoint.metadata.at("config").get<ModelConfig>();
        config.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(Code::Malformed, std::string("model checkpoint config: ") + e.what());
    }
    Model m = initialise(config, 0);
    std::vector<NamedTensor> targets;
    m.visit([&](const std::string& name, const Tensor& t, ParamKind) { targets.push_back({name, t}); });
    restore_tensors(checkpoint, targets);
    freeze(backbone_tensors(m.backbone));
    return m;
}

template <typename Visit>
void Model::visit(Visit&& f) const
{
    backbone.visit("backbone", f, false);
    ftt.visit("ftt", f);
    for (std::size_t i = 0; i < mbblocks.size(); ++i) mbblocks[i].visit("mbblock" + std::to_string(i), f);
    classifier.visit("classifier", f);
}

std::vector<NamedParameter> Model::parameters() const
{
    std::vector<NamedParameter> out;
    visit([&](const std::string& name, const Tensor& t, ParamKind kind) {
        out.push_back({name, t, kind, name.rfind("backbone.", 0) != 0});
    });
    return out;
}

std::map<std::string, bool> Model::trainable_flags() const
{
    std::map<std::string, bool> flags;
    for (const auto& p : parameters())
        if (p.kind == ParamKind::Trainable) flags[p.name] = p.trainable;
    return flags;
}

Index Model::parameter_count() const
{
    Index total = 0;
    for (const auto& p : parameters())
        if (p.kind == ParamKind::Trainable) total += p.tensor.numel();
    return total;
}

Checkpoint Model::to_checkpoint() const
{
    Checkpoint ckpt;
    ckpt.metadata = {{"kind", "model"}, {"config", config_}};
    visit([&](const std::string& name, const Tensor& t, ParamKind) { ckpt.tensors.push_back({name, t.detach()}); });
    return ckpt;
}

Tensor Model::forward(const Tensor& batch, Mode mode, const ForwardOptions& options)
{
    const Index res = config_.input_resolution;
    if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != res || batch.dim(3) != res)
        throw ShapeError("model expects [B,3," + std::to_string(res) + "," + std::to_string(res) + "], got " +
                         to_string(batch.shape()));

    Tensor features;
    {
        // frozen: running statistics only, no graph
        NoGradGuard no_grad;
        features = avg_pool2d(backbone_features(batch, backbone, Mode::Infer), config_.backbone_pool_factor());
    }
    Tensor z = concat_channels(features, ftt_forward(batch, ftt, mode, options.strip_attention));
    for (auto& block : mbblocks) z = mbblock_forward(z, block, mode);
    if (config_.use_channel_attention) z = channel_attention_forward(z).y;
    return sigmoid(dense(global_avg_pool(z), classifier));
}

}  // namespace dafdft
