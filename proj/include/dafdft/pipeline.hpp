#pragma once

// Two-phase training: backbone pretraining on the train split, then
// fine-tuning of everything but the frozen backbone on the small fine-tune
// split. Both phases early-stop on validation loss.

#include "dafdft/augment.hpp"
#include "dafdft/data_io.hpp"
#include "dafdft/metrics.hpp"
#include "dafdft/model.hpp"

#include <iosfwd>
#include <limits>
#include <optional>

namespace dafdft {

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy of probabilities [B,1] against labels [B,1].
/// Probabilities are clamped into [1e-7, 1 - 1e-7]; the gradient is zero
/// where the clamp is active.
template <typename Scalar>
TensorT<Scalar> bce_loss(const TensorT<Scalar>& probabilities, const TensorT<Scalar>& labels)
{
    detail::require_same_shape(probabilities, labels, "bce_loss");
    if (probabilities.rank() != 2 || probabilities.dim(1) != 1)
        throw ShapeError("bce_loss expects [B,1], got " + to_string(probabilities.shape()));
    const auto& p = probabilities.data();
    const auto& y = labels.data();
    for (Index i = 0; i < y.size(); ++i)
        if (y[i] != Scalar(0) && y[i] != Scalar(1))
            throw std::invalid_argument("bce_loss labels must be 0 or 1, got " + std::to_string(double(y[i])));

    const auto lo = static_cast<Scalar>(kProbabilityClamp);
    const Buffer<Scalar> pc = p.cwiseMax(lo).cwiseMin(Scalar(1) - lo);
    const Scalar n = static_cast<Scalar>(p.size());
    Buffer<Scalar> out(1);
    out[0] = -(y * pc.log() + (Scalar(1) - y) * (Scalar(1) - pc).log()).sum() / n;
    return make_op<Scalar>("bce_loss", {1}, std::move(out), {probabilities},
                           [pc, y = Buffer<Scalar>(y), lo, n](Node<Scalar>& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               const Scalar g = self.grad[0] / n;
                               const Buffer<Scalar> d = -(y / pc - (Scalar(1) - y) / (Scalar(1) - pc)) * g;
                               const Buffer<Scalar> inside =
                                   ((in.value >= lo) && (in.value <= Scalar(1) - lo)).template cast<Scalar>();
                               in.accumulate(d * inside);
                           });
}

// Optimisers.

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;  // sgd
    double beta1 = 0.9;     // adam
    double beta2 = 0.999;
    double epsilon = 1e-7;
    std::optional<double> max_grad_norm;  // global-norm clipping, off by default

    /// Conventional defaults per optimiser (sgd lr 1e-2, adam lr 1e-3).
    static OptimizerConfig defaults(OptimizerKind kind);
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct OptimizerState {
    OptimizerConfig config;
    std::int64_t step_count = 0;
    std::map<std::string, Tensor> first_moment;   // sgd velocity / adam m
    std::map<std::string, Tensor> second_moment;  // adam v
};

/// One SGD step over the trainable parameters: v <- momentum * v + g,
/// p <- p - lr * v. `grads` pairs with `params`; entries of frozen or
/// buffer-kind parameters are ignored.
void sgd_step(const std::vector<NamedParameter>& params, const std::vector<Buffer<float>>& grads, OptimizerState& state);

/// One bias-corrected Adam step over the trainable parameters.
void adam_step(const std::vector<NamedParameter>& params, const std::vector<Buffer<float>>& grads, OptimizerState& state);

/// Reads gradients off the parameters (zero where none was populated),
/// optionally clips them, and dispatches on the configured optimiser.
void optimizer_step(const std::vector<NamedParameter>& params, OptimizerState& state);

Checkpoint optimizer_to_checkpoint(const OptimizerState& state);
OptimizerState optimizer_from_checkpoint(const Checkpoint& checkpoint);

// Early stopping.

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainState {
    int epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int epochs_since_improvement = 0;
    int patience = 20;
    std::vector<EpochRecord> history;
};

enum class StopDecision { Continue, Stop };

/// Counts an epoch without strict improvement against the patience budget.
/// Throws NonFiniteLoss on a NaN or infinite loss.
StopDecision early_stopping_update(TrainState& state, double val_loss);

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training loops.

struct TrainConfig {
    OptimizerConfig optimizer;
    int batch_size = 64;
    int max_epochs = 200;
    int patience = 20;
    int eval_batch_size = 16;
    std::uint64_t seed = 0;
    std::ostream* log = nullptr;  // receives `epoch,train_loss,val_loss,val_acc`
};

struct PretrainConfig {
    BackboneKind backbone_kind = BackboneKind::PlainCnn;
    int input_resolution = 64;
    TrainConfig train;
};

struct FinetuneConfig {
    ModelConfig model;
    CutoutConfig cutout;
    TrainConfig train;

    FinetuneConfig();
};

struct TrainResult {
    Checkpoint checkpoint;  // from the epoch with the lowest validation loss
    TrainState state;
    std::vector<std::string> warnings;
};

/// Trains a freshly initialised backbone with its own head on the train
/// split; the validation split drives early stopping.
TrainResult pretrain(const Dataset& data, const PretrainConfig& config);

/// Assembles the full model around the backbone checkpoint, freezes the
/// backbone and trains the rest on the fine-tune split with Cutout.
TrainResult finetune(const Checkpoint& backbone_checkpoint, const Dataset& data, const FinetuneConfig& config);

/// Shuffled visiting order for one epoch; deterministic in (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// Contiguous batches over `order`. A trailing batch of one item is merged
/// into its predecessor so batch statistics stay defined.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, int batch_size);

// Inference.

std::vector<double> predict(Model& model, const DatasetSplit& split, int batch_size = 16);
std::vector<double> predict(BackboneParams<float>& backbone, const DatasetSplit& split, int batch_size = 16);

EvalResult evaluate_split(Model& model, const DatasetSplit& split, int batch_size = 16);
EvalResult evaluate_split(BackboneParams<float>& backbone, const DatasetSplit& split, int batch_size = 16);

/// Mean BCE of scores against the split's labels.
double mean_bce(std::span<const double> scores, std::span<const int> labels);

}  // namespace dafdft
