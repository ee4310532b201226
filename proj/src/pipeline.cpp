#include "dafdft/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace dafdft {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t a, std::uint32_t b)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

const DatasetSplit& require_split(const Dataset& data, Role role)
{
    const auto it = data.find(role);
    if (it == data.end() || it->second.empty())
        throw DataError("the " + std::string(to_string(role)) + " split is missing or empty");
    return it->second;
}

Tensor label_tensor(const DatasetSplit& split, const std::vector<std::size_t>& indices)
{
    Buffer<float> y(static_cast<Index>(indices.size()));
    for (std::size_t k = 0; k < indices.size(); ++k) y[static_cast<Index>(k)] = static_cast<float>(split.labels[indices[k]]);
    return Tensor({static_cast<Index>(indices.size()), 1}, std::move(y));
}

void check_step_inputs(const std::vector<NamedParameter>& params, const std::vector<Buffer<float>>& grads)
{
    if (params.size() != grads.size())
        throw ShapeError("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].trainable && params[i].kind == ParamKind::Trainable && grads[i].size() != params[i].tensor.numel())
            throw ShapeError("gradient for " + params[i].name + " has " + std::to_string(grads[i].size()) +
                             " values, parameter has shape " + to_string(params[i].tensor.shape()));
}

Tensor& moment(std::map<std::string, Tensor>& buffers, const NamedParameter& p)
{
    auto it = buffers.find(p.name);
    if (it == buffers.end()) it = buffers.emplace(p.name, Tensor::zeros(p.tensor.shape())).first;
    if (it->second.shape() != p.tensor.shape())
        throw ShapeError("optimizer moment for " + p.name + " has shape " + to_string(it->second.shape()) +
                         ", parameter has " + to_string(p.tensor.shape()));
    return it->second;
}

bool updates(const NamedParameter& p) { return p.trainable && p.kind == ParamKind::Trainable; }

using Predictor = std::function<std::vector<double>()>;
using BatchLoss = std::function<Tensor(const std::vector<std::size_t>& batch, int epoch, std::size_t batch_index)>;
using Snapshot = std::function<Checkpoint()>;

TrainResult run_training(const DatasetSplit& train, const DatasetSplit& validation, const TrainConfig& cfg,
                         const std::vector<NamedParameter>& params, const BatchLoss& batch_loss,
                         const Predictor& predict_validation, const Snapshot& snapshot)
{
    if (cfg.batch_size < 2) throw std::invalid_argument("batch size must be at least 2 for batch normalisation");
    if (cfg.max_epochs < 1) throw std::invalid_argument("max_epochs must be positive");
    if (train.size() < 2) throw DataError("training needs at least two images");

    TrainResult result;
    result.state.patience = cfg.patience;
    OptimizerState optimizer{cfg.optimizer, 0, {}, {}};

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        result.state.epoch = epoch;
        double loss_sum = 0.0;
        const auto batches = make_batches(epoch_order(train.size(), cfg.seed, epoch), cfg.batch_size);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const Tensor loss = batch_loss(batches[b], epoch, b);
            const double value = loss.item();
            if (!std::isfinite(value))
                throw NonFiniteLoss("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(b));
            backward(loss);
            optimizer_step(params, optimizer);
            loss_sum += value * static_cast<double>(batches[b].size());
        }

        const std::vector<double> scores = predict_validation();
        EpochRecord record{epoch, loss_sum / static_cast<double>(train.size()), mean_bce(scores, validation.labels),
                           accuracy(scores, validation.labels)};
        if (!std::isfinite(record.val_loss))
            throw NonFiniteLoss("non-finite validation loss at epoch " + std::to_string(epoch));
        result.state.history.push_back(record);
        if (cfg.log) {
            *cfg.log << record.epoch << ',' << record.train_loss << ',' << record.val_loss << ',' << record.val_accuracy
                     << '\n';
            cfg.log->flush();
        }

        const double previous_best = result.state.best_val_loss;
        const StopDecision decision = early_stopping_update(result.state, record.val_loss);
        if (result.state.best_val_loss < previous_best) result.checkpoint = snapshot();
        if (decision == StopDecision::Stop) break;
    }
    return result;
}

}  // namespace

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(std::string_view name)
{
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

OptimizerConfig OptimizerConfig::defaults(OptimizerKind kind)
{
    OptimizerConfig c;
    c.kind = kind;
    c.learning_rate = kind == OptimizerKind::Sgd ? 1e-2 : 1e-3;
    return c;
}

void to_json(nlohmann::json& j, const OptimizerConfig& c)
{
    j = nlohmann::json{{"kind", std::string(to_string(c.kind))},
                       {"learning_rate", c.learning_rate},
                       {"momentum", c.momentum},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"max_grad_norm", c.max_grad_norm ? nlohmann::json(*c.max_grad_norm) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c)
{
    c.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("momentum").get_to(c.momentum);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("epsilon").get_to(c.epsilon);
    c.max_grad_norm.reset();
    if (j.contains("max_grad_norm") && !j.at("max_grad_norm").is_null()) c.max_grad_norm = j.at("max_grad_norm").get<double>();
}

void sgd_step(const std::vector<NamedParameter>& params, const std::vector<Buffer<float>>& grads, OptimizerState& state)
{
    check_step_inputs(params, grads);
    const auto lr = static_cast<float>(state.config.learning_rate);
    const auto mu = static_cast<float>(state.config.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!updates(params[i])) continue;
        Tensor velocity = moment(state.first_moment, params[i]);
        velocity.data() = mu * velocity.data() + grads[i];
        Tensor p = params[i].tensor;
        p.data() -= lr * velocity.data();
    }
    ++state.step_count;
}

void adam_step(const std::vector<NamedParameter>& params, const std::vector<Buffer<float>>& grads, OptimizerState& state)
{
    check_step_inputs(params, grads);
    const auto& c = state.config;
    const double t = static_cast<double>(state.step_count + 1);
    const auto b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
    const auto correction1 = static_cast<float>(1.0 - std::pow(c.beta1, t));
    const auto correction2 = static_cast<float>(1.0 - std::pow(c.beta2, t));
    const auto lr = static_cast<float>(c.learning_rate), eps = static_cast<float>(c.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!updates(params[i])) continue;
        Tensor m = moment(state.first_moment, params[i]);
        Tensor v = moment(state.second_moment, params[i]);
        m.data() = b1 * m.data() + (1.0f - b1) * grads[i];
        v.data() = b2 * v.data() + (1.0f - b2) * grads[i].square();
        Tensor p = params[i].tensor;
        p.data() -= lr * (m.data() / correction1) / ((v.data() / correction2).sqrt() + eps);
    }
    ++state.step_count;
}

void optimizer_step(const std::vector<NamedParameter>& params, OptimizerState& state)
{
    std::vector<Buffer<float>> grads;
    grads.reserve(params.size());
    double squared_norm = 0.0;
    for (const auto& p : params) {
        grads.push_back(p.tensor.has_grad() ? p.tensor.grad() : Buffer<float>(Buffer<float>::Zero(p.tensor.numel())));
        if (updates(p)) squared_norm += grads.back().template cast<double>().square().sum();
    }
    if (state.config.max_grad_norm) {
        const double norm = std::sqrt(squared_norm);
        if (norm > *state.config.max_grad_norm)
            for (auto& g : grads) g *= static_cast<float>(*state.config.max_grad_norm / norm);
    }
    if (state.config.kind == OptimizerKind::Sgd)
        sgd_step(params, grads, state);
    else
        adam_step(params, grads, state);
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

Checkpoint optimizer_to_checkpoint(const OptimizerState& state)
{
    Checkpoint ckpt;
    ckpt.metadata = {{"kind", "optimizer"}, {"config", state.config}, {"step_count", state.step_count}};
    for (const auto& [name, t] : state.first_moment) ckpt.tensors.push_back({"first_moment." + name, t.detach()});
    for (const auto& [name, t] : state.second_moment) ckpt.tensors.push_back({"second_moment." + name, t.detach()});
    return ckpt;
}

OptimizerState optimizer_from_checkpoint(const Checkpoint& checkpoint)
{
    using Code = CheckpointError::Code;
    if (checkpoint.metadata.value("kind", std::string()) != "optimizer")
        throw CheckpointError(Code::ConfigMismatch, "checkpoint does not hold optimizer state");
    OptimizerState state;
    try {
        state.config = checkpoint.metadata.at("config").get<OptimizerConfig>();
        state.step_count = checkpoint.metadata.at("step_count").get<std::int64_t>();
    } catch (const std::exception& e) {
        throw CheckpointError(Code::Malformed, std::string("optimizer checkpoint metadata: ") + e.what());
    }
    for (const auto& t : checkpoint.tensors) {
        const auto dot = t.name.find('.');
        const std::string group = t.name.substr(0, dot);
        if (dot == std::string::npos || (group != "first_moment" && group != "second_moment"))
            throw CheckpointError(Code::ExtraParameter, "unexpected optimizer tensor " + t.name);
        auto& target = group == "first_moment" ? state.first_moment : state.second_moment;
        if (!target.emplace(t.name.substr(dot + 1), t.tensor.detach()).second)
            throw CheckpointError(Code::DuplicateParameter, "duplicate optimizer tensor " + t.name);
    }
    return state;
}

StopDecision early_stopping_update(TrainState& state, double val_loss)
{
    if (!std::isfinite(val_loss)) throw NonFiniteLoss("validation loss is not finite");
    if (val_loss < state.best_val_loss) {
        state.best_val_loss = val_loss;
        state.best_epoch = state.epoch;
        state.epochs_since_improvement = 0;
    } else {
        ++state.epochs_since_improvement;
    }
    return state.epochs_since_improvement >= state.patience ? StopDecision::Stop : StopDecision::Continue;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x5eed, static_cast<std::uint32_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, int batch_size)
{
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

FinetuneConfig::FinetuneConfig()
{
    train.optimizer.learning_rate = 3e-4;
    train.batch_size = 8;
}

TrainResult pretrain(const Dataset& data, const PretrainConfig& config)
{
    const DatasetSplit& train = require_split(data, Role::Train);
    const DatasetSplit& validation = require_split(data, Role::Validation);
    if (train.resolution != config.input_resolution || validation.resolution != config.input_resolution)
        throw DataError("dataset resolution does not match the pretraining config");

    auto backbone = build_backbone<float>(config.backbone_kind, config.train.seed);
    std::vector<NamedParameter> params;
    backbone.visit("backbone", [&](const std::string& name, const Tensor& t, ParamKind kind) {
        params.push_back({name, t, kind, true});
    });

    const auto batch_loss = [&](const std::vector<std::size_t>& batch, int, std::size_t) {
        return bce_loss(backbone_classify(train.stack(batch), backbone, Mode::Train), label_tensor(train, batch));
    };
    const auto predict_validation = [&] { return predict(backbone, validation, config.train.eval_batch_size); };
    const auto snapshot = [&] { return backbone_to_checkpoint(backbone, config.input_resolution); };
    return run_training(train, validation, config.train, params, batch_loss, predict_validation, snapshot);
}

TrainResult finetune(const Checkpoint& backbone_checkpoint, const Dataset& data, const FinetuneConfig& config)
{
    const DatasetSplit& tune = require_split(data, Role::Finetune);
    const DatasetSplit& validation = require_split(data, Role::Validation);
    std::vector<std::string> warnings;
    if (const auto it = data.find(Role::Train); it != data.end() && !it->second.empty() &&
                                               10 * tune.size() > it->second.size())
        warnings.push_back("fine-tune split holds " + std::to_string(tune.size()) + " images, more than 10% of the " +
                           std::to_string(it->second.size()) + "-image train split");

    Model model = Model::assemble(backbone_checkpoint, config.model, config.train.seed);
    const std::vector<NamedParameter> params = model.parameters();

    const auto batch_loss = [&](const std::vector<std::size_t>& batch, int epoch, std::size_t index) {
        Tensor images = tune.stack(batch);
        images = augment_batch(images, config.cutout,
                               derive_seed(config.train.seed, static_cast<std::uint32_t>(epoch),
                                           static_cast<std::uint32_t>(index)));
        return bce_loss(model.forward(images, Mode::Train), label_tensor(tune, batch));
    };
    const auto predict_validation = [&] { return predict(model, validation, config.train.eval_batch_size); };
    const auto snapshot = [&] { return model.to_checkpoint(); };
    TrainResult result = run_training(tune, validation, config.train, params, batch_loss, predict_validation, snapshot);
    result.warnings.insert(result.warnings.begin(), warnings.begin(), warnings.end());
    return result;
}

namespace {

template <typename Forward>
std::vector<double> predict_chunks(const DatasetSplit& split, int batch_size, Forward&& forward)
{
    if (batch_size < 1) throw std::invalid_argument("evaluation batch size must be positive");
    NoGradGuard no_grad;
    std::vector<double> scores;
    scores.reserve(split.size());
    std::vector<std::size_t> chunk;
    for (std::size_t i = 0; i < split.size(); i += static_cast<std::size_t>(batch_size)) {
        chunk.clear();
        for (std::size_t k = i; k < std::min(split.size(), i + static_cast<std::size_t>(batch_size)); ++k) chunk.push_back(k);
        const Tensor p = forward(split.stack(chunk));
        for (Index k = 0; k < p.numel(); ++k) scores.push_back(p.data()[k]);
    }
    return scores;
}

}  // namespace

std::vector<double> predict(Model& model, const DatasetSplit& split, int batch_size)
{
    return predict_chunks(split, batch_size, [&](const Tensor& x) { return model.forward(x, Mode::Infer); });
}

std::vector<double> predict(BackboneParams<float>& backbone, const DatasetSplit& split, int batch_size)
{
    return predict_chunks(split, batch_size, [&](const Tensor& x) { return backbone_classify(x, backbone, Mode::Infer); });
}

EvalResult evaluate_split(Model& model, const DatasetSplit& split, int batch_size)
{
    return evaluate(predict(model, split, batch_size), split.labels);
}

EvalResult evaluate_split(BackboneParams<float>& backbone, const DatasetSplit& split, int batch_size)
{
    return evaluate(predict(backbone, split, batch_size), split.labels);
}

double mean_bce(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("mean_bce needs equally sized, nonempty inputs");
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double p = std::clamp(scores[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
        total -= labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
    }
    return total / static_cast<double>(scores.size());
}

}  // namespace dafdft
