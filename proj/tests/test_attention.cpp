#include <doctest.h>

#include "dafdft/attention.hpp"
#include "dafdft/gradcheck.hpp"
#include "dafdft/pipeline.hpp"
#include "support.hpp"

#include <cmath>
#include <numeric>

using namespace dafdft;
using dafdft::test::uniform;

namespace {

template <typename Scalar>
double worst_row_sum_error(const TensorT<Scalar>& map)
{
    const Index rows = map.dim(0) * map.dim(1), len = map.dim(2);
    double worst = 0;
    for (Index r = 0; r < rows; ++r)
        worst = std::max(worst, std::abs(static_cast<double>(map.data().segment(r * len, len).sum()) - 1.0));
    return worst;
}

}  // namespace

TEST_CASE("self-attention at gamma zero is the identity, bit for bit")
{
    Rng rng(1);
    for (Index c : {8, 16}) {
        auto p = SelfAttentionParams<float>::glorot(c, rng);
        CHECK(p.gamma.item() == 0.0f);
        auto x = uniform<float>({2, c, 5, 3}, rng, -4, 4);
        auto out = self_attention_forward(x, p);
        CHECK((out.y.data() == x.data()).all());
    }
}

TEST_CASE("self-attention on a single position")
{
    Rng rng(2);
    auto p = SelfAttentionParams<double>::glorot(8, rng);
    p.gamma.data()[0] = 0.7;
    auto x = uniform<double>({1, 8, 1, 1}, rng);
    auto out = self_attention_forward(x, p);
    CHECK(out.alpha.shape() == Shape{1, 1, 1});
    CHECK(out.alpha.item() == 1.0);
    auto h = conv2d(x, p.value);
    CHECK(((out.y.data() - (x.data() + 0.7 * h.data())).abs() < 1e-12).all());
}

TEST_CASE("self-attention needs channels divisible by 8")
{
    Rng rng(3);
    CHECK_THROWS_AS(SelfAttentionParams<float>::glorot(12, rng), ShapeError);
    CHECK_THROWS_AS(SelfAttentionParams<float>::glorot(4, rng), ShapeError);
    auto p = SelfAttentionParams<float>::glorot(8, rng);
    CHECK_THROWS_AS(self_attention_forward(Tensor::zeros({1, 12, 2, 2}), p), ShapeError);
}

TEST_CASE("alpha row j is a distribution over source positions for query j")
{
    // Zero key and query weights leave only the biases; a key bias that is
    // constant across positions then gives uniform rows, while making the
    // key depend on position i skews every row the same way.
    Rng rng(4);
    auto p = SelfAttentionParams<double>::glorot(8, rng);
    p.key.weight.data().setZero();
    p.query.weight.data().setZero();
    p.query.bias.data().setConstant(1.0);
    p.key.bias.data().setZero();
    // f(x_i) = W_f x_i with W_f reading channel 0 only.
    p.key.weight.data()[p.key.weight.offset({0, 0, 0, 0})] = 1.0;

    auto x = TensorD::zeros({1, 8, 1, 3});
    x.data()[x.offset({0, 0, 0, 2})] = 5.0;  // only source position i = 2 has a large key
    auto alpha = self_attention_forward(x, p).alpha;
    for (Index j = 0; j < 3; ++j) {
        CHECK(alpha.at({0, j, 2}) > 0.98);
        CHECK(alpha.at({0, j, 0}) == doctest::Approx(alpha.at({0, j, 1})));
    }
    // Column 2 dominates; the transposed reading would concentrate row 2 instead.
    CHECK(alpha.at({0, 0, 2}) > alpha.at({0, 2, 0}));
}

TEST_CASE("alpha and beta rows sum to one across shapes")
{
    Rng rng(5);
    std::uniform_int_distribution<int> batch(1, 4), side(1, 8), width(1, 2), cdim(1, 16);
    for (int trial = 0; trial < 40; ++trial) {
        const Index b = batch(rng), h = side(rng), w = side(rng);
        const Index c_attn = 8 * width(rng);
        auto p = SelfAttentionParams<float>::glorot(c_attn, rng);
        auto x = uniform<float>({b, c_attn, h, w}, rng, -2, 2);
        auto alpha = self_attention_forward(x, p).alpha;
        CHECK(alpha.shape() == Shape{b, h * w, h * w});
        CHECK((alpha.data() >= 0.0f).all());
        CHECK(worst_row_sum_error(alpha) < 1e-5);

        const Index c = cdim(rng);
        auto xc = uniform<float>({b, c, h, w}, rng, -1, 1);
        auto ca = channel_attention_forward(xc);
        CHECK(ca.beta.shape() == Shape{b, c, c});
        CHECK((ca.beta.data() >= 0.0f).all());
        CHECK(worst_row_sum_error(ca.beta) < 1e-5);
        CHECK(ca.y.shape() == xc.shape());
    }
}

TEST_CASE("attention maps are strictly positive on moderate inputs")
{
    Rng rng(6);
    auto p = SelfAttentionParams<double>::glorot(8, rng);
    auto x = uniform<double>({2, 8, 4, 4}, rng);
    CHECK((self_attention_forward(x, p).alpha.data() > 0.0).all());
    CHECK((channel_attention_forward(x).beta.data() > 0.0).all());
}

TEST_CASE("channel attention with one channel doubles the input")
{
    Rng rng(7);
    auto x = uniform<double>({2, 1, 3, 3}, rng);
    auto out = channel_attention_forward(x);
    CHECK((out.beta.data() == 1.0).all());
    CHECK((out.y.data() == 2.0 * x.data()).all());
}

TEST_CASE("channel attention with identical channels has uniform beta")
{
    Rng rng(8);
    auto v = uniform<double>({1, 1, 3, 3}, rng);
    Buffer<double> data(4 * 9);
    for (Index c = 0; c < 4; ++c) data.segment(c * 9, 9) = v.data();
    auto x = TensorD({1, 4, 3, 3}, data);
    auto out = channel_attention_forward(x);
    CHECK(((out.beta.data() - 0.25).abs() < 1e-15).all());
    CHECK(((out.y.data() - 2.0 * x.data()).abs() < 1e-12).all());
}

TEST_CASE("channel attention is equivariant under channel permutations")
{
    Rng rng(9);
    const std::vector<Index> perm{2, 0, 3, 1};
    for (int trial = 0; trial < 5; ++trial) {
        auto x = uniform<double>({1, 4, 3, 3}, rng);
        Buffer<double> permuted(x.numel());
        for (Index c = 0; c < 4; ++c) permuted.segment(c * 9, 9) = x.data().segment(perm[c] * 9, 9);
        auto a = channel_attention_forward(x);
        auto b = channel_attention_forward(TensorD(x.shape(), permuted));
        for (Index c = 0; c < 4; ++c)
            CHECK((b.y.data().segment(c * 9, 9) - a.y.data().segment(perm[c] * 9, 9)).abs().maxCoeff() < 1e-12);
        for (Index j = 0; j < 4; ++j)
            for (Index i = 0; i < 4; ++i)
                CHECK(std::abs(b.beta.at({0, j, i}) - a.beta.at({0, perm[j], perm[i]})) < 1e-12);
    }
}

TEST_CASE("attention gradients match finite differences")
{
    Rng rng(10);
    auto p = SelfAttentionParams<double>::glorot(8, rng);
    p.gamma.data()[0] = 0.5;
    auto x = uniform<double>({1, 8, 4, 4}, rng, -1, 1, true);
    auto weights = uniform<double>({1, 8, 4, 4}, rng);
    auto sa = grad_check("self_attention",
                         {{"x", x},
                          {"key.weight", p.key.weight},
                          {"query.weight", p.query.weight},
                          {"value.weight", p.value.weight},
                          {"value.bias", p.value.bias},
                          {"gamma", p.gamma}},
                         [&] { return sum(mul(self_attention_forward(x, p).y, weights)); }, 1e-3);
    CHECK_MESSAGE(sa.passed, sa.max_relative_error);
    CHECK(sa.per_parameter_errors.count("gamma") == 1);

    auto xc = uniform<double>({1, 4, 3, 3}, rng, -1, 1, true);
    auto wc = uniform<double>({1, 4, 3, 3}, rng);
    auto ca = grad_check("channel_attention", {{"x", xc}},
                         [&] { return sum(mul(channel_attention_forward(xc).y, wc)); }, 1e-3);
    CHECK(ca.passed);
}

TEST_CASE("training a self-attention layer moves gamma off zero")
{
    Rng rng(11);
    auto p = SelfAttentionParams<float>::glorot(8, rng);
    auto head = DenseParams<float>::glorot(8, 1, rng);
    auto x = uniform<float>({4, 8, 3, 3}, rng);
    auto y = Tensor::from_values({4, 1}, {0, 1, 0, 1});

    std::vector<NamedParameter> params;
    auto collect = [&](const std::string& name, const Tensor& t, ParamKind kind) {
        params.push_back({name, t, kind, true});
    };
    p.visit("attn", collect);
    head.visit("head", collect);
    OptimizerState state;
    state.config = OptimizerConfig::defaults(OptimizerKind::Sgd);
    for (int step = 0; step < 5; ++step) {
        backward(bce_loss(sigmoid(dense(global_avg_pool(self_attention_forward(x, p).y), head)), y));
        optimizer_step(params, state);
    }
    CHECK(p.gamma.item() != 0.0f);
}
