#pragma once

// The assembled detector: frozen backbone and FTT side by side, fused by
// pooling + channel concatenation, an MBblockV3 stack, optional channel
// attention, then GAP -> dense -> sigmoid.

#include "dafdft/blocks.hpp"
#include "dafdft/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>

namespace dafdft {

struct ModelConfig {
    int ftt_repeats = 3;                     // M
    int mbblock_repeats = 4;                 // N
    std::vector<int> ftt_channels{32, 64, 128};
    int mbblock_expansion = 6;
    int mbblock_channels = 128;
    int se_ratio = 4;
    BackboneKind backbone_kind = BackboneKind::PlainCnn;
    bool use_channel_attention = true;
    int input_resolution = 64;

    /// Throws std::invalid_argument naming the first violated constraint.
    void validate() const;

    /// Backbone maps [res] -> [res/4]; FTT maps [res] -> [res/2^M].
    int backbone_pool_factor() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct NamedParameter {
    std::string name;
    Tensor tensor;
    ParamKind kind = ParamKind::Trainable;
    bool trainable = true;  // false for everything under the frozen backbone
};

/// Collects (name, tensor, kind) triples from a params struct with visit().
template <typename Params>
std::vector<NamedTensor> named_tensors(const Params& params, const std::string& prefix)
{
    std::vector<NamedTensor> out;
    params.visit(prefix, [&](const std::string& name, const Tensor& t, ParamKind) { out.push_back({name, t}); });
    return out;
}

struct ForwardOptions {
    /// Replace every FTT self-attention module by the identity.
    bool strip_attention = false;
};

// Standalone backbone checkpoints (pretraining output).
Checkpoint backbone_to_checkpoint(const BackboneParams<float>& backbone, int input_resolution);
BackboneParams<float> backbone_from_checkpoint(const Checkpoint& checkpoint);
std::vector<NamedTensor> backbone_tensors(const BackboneParams<float>& backbone, bool with_head = true);

class Model {
public:
    /// Loads the backbone (dropping its head), freezes it and initialises
    /// everything else from `seed`.
    static Model assemble(const Checkpoint& backbone_checkpoint, const ModelConfig& config, std::uint64_t seed);

    /// Rebuilds a model saved with to_checkpoint().
    static Model from_checkpoint(const Checkpoint& checkpoint);

    /// Fake probability per image, [B,1].
    Tensor forward(const Tensor& batch, Mode mode, const ForwardOptions& options = {});

    const ModelConfig& config() const { return config_; }
    std::vector<NamedParameter> parameters() const;
    std::map<std::string, bool> trainable_flags() const;

    /// Element count over trainable-kind tensors (frozen ones included),
    /// running statistics excluded.
    Index parameter_count() const;

    Checkpoint to_checkpoint() const;

    BackboneParams<float> backbone;
    FttParams<float> ftt;
    std::vector<MBBlockParams<float>> mbblocks;
    DenseParams<float> classifier;

private:
    explicit Model(ModelConfig config);
    static Model initialise(const ModelConfig& config, std::uint64_t seed);

    template <typename Visit>
    void visit(Visit&& f) const;

    ModelConfig config_;
};

}  // namespace dafdft
