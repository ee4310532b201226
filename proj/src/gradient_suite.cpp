#include "dafdft/gradient_suite.hpp"

#include "dafdft/blocks.hpp"
#include "dafdft/pipeline.hpp"

#include <algorithm>
#include <memory>

namespace dafdft {

namespace {

constexpr double kStep = 1e-3;
// Blocks with ReLU-family kinks behind BN: a smaller step keeps central
// differences from straddling a kink.
constexpr double kKinkedStep = 1e-5;

struct Case {
    std::vector<CheckedTensor> wrt;
    LossBuilder build;
    double step = kStep;
};

using CaseFactory = std::function<Case(Rng&)>;

TensorD uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad = true)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Buffer<double> data(element_count(shape));
    for (Index i = 0; i < data.size(); ++i) data[i] = u(rng);
    return TensorD(shape, std::move(data), requires_grad);
}

/// Uniform draws that keep at least `margin` away from every kink.
TensorD away_from(const Shape& shape, double lo, double hi, std::initializer_list<double> kinks, Rng& rng)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Buffer<double> data(element_count(shape));
    for (Index i = 0; i < data.size(); ++i) {
        double v;
        do {
            v = u(rng);
        } while (std::any_of(kinks.begin(), kinks.end(), [v](double k) { return std::abs(v - k) < 0.05; }));
        data[i] = v;
    }
    return TensorD(shape, std::move(data), true);
}

/// Weighted sum with fixed random weights, so every output element matters.
LossBuilder weighted(std::function<TensorD()> forward, const Shape& shape, Rng& rng)
{
    auto weights = std::make_shared<TensorD>(uniform(shape, -1.0, 1.0, rng, false));
    return [forward = std::move(forward), weights] { return sum(mul(forward(), *weights)); };
}

template <typename Params>
void add_trainable(std::vector<CheckedTensor>& wrt, const Params& params, const std::string& prefix)
{
    params.visit(prefix, [&](const std::string& name, const TensorD& t, ParamKind kind) {
        if (kind == ParamKind::Trainable) wrt.push_back({name, t});
    });
}

/// Moves BN affine parameters off their identity initialisation.
template <typename Params>
void perturb_batch_norm(const Params& params, Rng& rng)
{
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    params.visit("", [&](const std::string& name, const TensorD& t, ParamKind) {
        const auto ends_with = [&](std::string_view suffix) {
            return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (!ends_with("bn.gamma") && !ends_with("bn.beta")) return;
        TensorD shared = t;
        for (Index i = 0; i < shared.numel(); ++i) shared.data()[i] += u(rng);
    });
}

Case unary_case(TensorD (*op)(const TensorD&), TensorD x, Rng& rng)
{
    Case c;
    c.wrt = {{"x", x}};
    c.build = weighted([op, x] { return op(x); }, x.shape(), rng);
    return c;
}

std::vector<std::pair<std::string, CaseFactory>> cases()
{
    std::vector<std::pair<std::string, CaseFactory>> out;

    out.emplace_back("conv2d", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto p = std::make_shared<Conv2dParams<double>>(Conv2dParams<double>::glorot(3, 4, 3, 1, true, rng));
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "conv");
        c.build = weighted([x, p] { return conv2d(x, *p); }, {2, 4, 5, 5}, rng);
        return c;
    });
    out.emplace_back("conv2d_stride2", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto p = std::make_shared<Conv2dParams<double>>(Conv2dParams<double>::glorot(3, 4, 3, 2, true, rng));
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "conv");
        c.build = weighted([x, p] { return conv2d(x, *p); }, {2, 4, 3, 3}, rng);
        return c;
    });
    out.emplace_back("depthwise_conv2d", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto w = uniform({3, 1, 3, 3}, -1, 1, rng);
        Case c{{{"x", x}, {"weight", w}}, {}};
        c.build = weighted([x, w] { return depthwise_conv2d(x, w, 2, Padding::Same); }, {2, 3, 3, 3}, rng);
        return c;
    });
    out.emplace_back("separable_conv2d", [](Rng& rng) {
        auto x = uniform({2, 3, 5, 5}, -1, 1, rng);
        auto p = std::make_shared<SeparableConvParams<double>>(SeparableConvParams<double>::glorot(3, 5, 2, true, rng));
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "sep");
        c.build = weighted([x, p] { return separable_conv2d(x, *p); }, {2, 5, 3, 3}, rng);
        return c;
    });
    out.emplace_back("batch_norm", [](Rng& rng) {
        auto x = uniform({3, 4, 3, 3}, -2, 2, rng);
        auto s = std::make_shared<BatchNormState<double>>(BatchNormState<double>::identity(4));
        perturb_batch_norm(*s, rng);
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *s, "bn");
        c.build = weighted([x, s] { return batch_norm(x, *s, Mode::Train); }, x.shape(), rng);
        return c;
    });
    out.emplace_back("relu", [](Rng& rng) { return unary_case(relu<double>, away_from({2, 3, 4}, -2, 2, {0}, rng), rng); });
    out.emplace_back("relu6", [](Rng& rng) {
        return unary_case(relu6<double>, away_from({2, 3, 4}, -2, 8, {0, 6}, rng), rng);
    });
    out.emplace_back("h_swish", [](Rng& rng) {
        return unary_case(h_swish<double>, away_from({2, 3, 4}, -5, 5, {-3, 3}, rng), rng);
    });
    out.emplace_back("hard_sigmoid", [](Rng& rng) {
        return unary_case(hard_sigmoid<double>, away_from({2, 3, 4}, -5, 5, {-3, 3}, rng), rng);
    });
    out.emplace_back("sigmoid", [](Rng& rng) { return unary_case(sigmoid<double>, uniform({2, 3, 4}, -4, 4, rng), rng); });
    out.emplace_back("squeeze_excite", [](Rng& rng) {
        auto x = uniform({2, 8, 3, 3}, -1, 1, rng);
        auto p = std::make_shared<SqueezeExciteParams<double>>(SqueezeExciteParams<double>::glorot(8, 4, rng));
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "se");
        c.build = weighted([x, p] { return squeeze_excite(x, *p); }, x.shape(), rng);
        return c;
    });
    out.emplace_back("dense", [](Rng& rng) {
        auto x = uniform({3, 5}, -1, 1, rng);
        auto p = std::make_shared<DenseParams<double>>(DenseParams<double>::glorot(5, 4, rng));
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "dense");
        c.build = weighted([x, p] { return dense(x, *p); }, {3, 4}, rng);
        return c;
    });
    out.emplace_back("global_avg_pool", [](Rng& rng) {
        auto x = uniform({2, 3, 4, 4}, -1, 1, rng);
        Case c{{{"x", x}}, {}};
        c.build = weighted([x] { return global_avg_pool(x); }, {2, 3}, rng);
        return c;
    });
    out.emplace_back("avg_pool2d", [](Rng& rng) {
        auto x = uniform({2, 3, 4, 4}, -1, 1, rng);
        Case c{{{"x", x}}, {}};
        c.build = weighted([x] { return avg_pool2d(x, 2); }, {2, 3, 2, 2}, rng);
        return c;
    });
    out.emplace_back("concat_channels", [](Rng& rng) {
        auto a = uniform({2, 3, 2, 2}, -1, 1, rng);
        auto b = uniform({2, 2, 2, 2}, -1, 1, rng);
        Case c{{{"a", a}, {"b", b}}, {}};
        c.build = weighted([a, b] { return concat_channels(a, b); }, {2, 5, 2, 2}, rng);
        return c;
    });
    out.emplace_back("batch_dot", [](Rng& rng) {
        auto a = uniform({2, 3, 4}, -1, 1, rng);
        auto b = uniform({2, 4, 5}, -1, 1, rng);
        Case c{{{"a", a}, {"b", b}}, {}};
        c.build = weighted([a, b] { return batch_dot(a, b); }, {2, 3, 5}, rng);
        return c;
    });
    out.emplace_back("softmax", [](Rng& rng) {
        auto x = uniform({2, 3, 4}, -2, 2, rng);
        Case c{{{"x", x}}, {}};
        c.build = weighted([x] { return add(softmax(x, 2), softmax(x, 1)); }, x.shape(), rng);
        return c;
    });
    out.emplace_back("bce_loss", [](Rng& rng) {
        auto p = uniform({6, 1}, 0.05, 0.95, rng);
        Buffer<double> y(6);
        for (Index i = 0; i < 6; ++i) y[i] = static_cast<double>(i % 2);
        auto labels = TensorD({6, 1}, std::move(y));
        Case c{{{"probabilities", p}}, {}};
        c.build = [p, labels] { return bce_loss(p, labels); };
        return c;
    });
    out.emplace_back("self_attention", [](Rng& rng) {
        auto x = uniform({2, 8, 3, 3}, -1, 1, rng);
        auto p = std::make_shared<SelfAttentionParams<double>>(SelfAttentionParams<double>::glorot(8, rng));
        p->gamma.data()[0] = 0.5;
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *p, "attention");
        c.build = weighted([x, p] { return self_attention_forward(x, *p).y; }, x.shape(), rng);
        return c;
    });
    out.emplace_back("channel_attention", [](Rng& rng) {
        auto x = uniform({2, 4, 3, 3}, -0.5, 0.5, rng);
        Case c{{{"x", x}}, {}};
        c.build = weighted([x] { return channel_attention_forward(x).y; }, x.shape(), rng);
        return c;
    });
    out.emplace_back("mbblock_v3", [](Rng& rng) {
        auto x = uniform({2, 8, 4, 4}, -1, 1, rng);
        auto b = std::make_shared<MBBlockParams<double>>(MBBlockParams<double>::create(8, 8, 2, 4, 1, rng));
        perturb_batch_norm(*b, rng);
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *b, "mbblock");
        c.build = weighted([x, b] { return mbblock_forward(x, *b, Mode::Train); }, x.shape(), rng);
        c.step = kKinkedStep;
        return c;
    });
    out.emplace_back("mbblock_v3_stride2", [](Rng& rng) {
        auto x = uniform({2, 8, 4, 4}, -1, 1, rng);
        auto b = std::make_shared<MBBlockParams<double>>(MBBlockParams<double>::create(8, 16, 2, 4, 2, rng));
        perturb_batch_norm(*b, rng);
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *b, "mbblock");
        c.build = weighted([x, b] { return mbblock_forward(x, *b, Mode::Train); }, {2, 16, 2, 2}, rng);
        c.step = kKinkedStep;
        return c;
    });
    out.emplace_back("ftt_stage", [](Rng& rng) {
        auto x = uniform({2, 8, 4, 4}, -1, 1, rng);
        auto s = std::make_shared<FttStageParams<double>>(FttStageParams<double>::create(8, 16, rng));
        s->attention.gamma.data()[0] = 0.5;
        perturb_batch_norm(*s, rng);
        Case c{{{"x", x}}, {}};
        add_trainable(c.wrt, *s, "ftt_stage");
        c.build = weighted([x, s] { return ftt_stage_forward(x, *s, Mode::Train); }, {2, 16, 2, 2}, rng);
        c.step = kKinkedStep;
        return c;
    });
    return out;
}

}  // namespace

std::vector<std::string> gradient_suite_operations()
{
    std::vector<std::string> names;
    for (const auto& [name, factory] : cases()) names.push_back(name);
    return names;
}

std::vector<GradCheckReport> run_gradient_suite(const GradientSuiteOptions& options)
{
    if (options.seeds < 1) throw std::invalid_argument("the gradient suite needs at least one seed");
    std::vector<GradCheckReport> reports;
    std::size_t index = 0;
    for (const auto& [name, factory] : cases()) {
        GradCheckReport total;
        total.op_name = name;
        total.tolerance = options.tolerance;
        total.passed = true;
        for (int s = 0; s < options.seeds; ++s) {
            std::seed_seq seq{static_cast<std::uint32_t>(options.base_seed), static_cast<std::uint32_t>(index),
                              static_cast<std::uint32_t>(s)};
            Rng rng(seq);
            const Case c = factory(rng);
            const GradCheckReport r = grad_check(name, c.wrt, c.build, options.tolerance, c.step);
            total.max_relative_error = std::max(total.max_relative_error, r.max_relative_error);
            for (const auto& [param, err] : r.per_parameter_errors)
                total.per_parameter_errors[param] = std::max(total.per_parameter_errors[param], err);
            total.passed = total.passed && r.passed;
            if (!r.failure.empty() && total.failure.empty()) total.failure = "seed " + std::to_string(s) + ": " + r.failure;
        }
        reports.push_back(std::move(total));
        ++index;
    }
    return reports;
}

}  // namespace dafdft
