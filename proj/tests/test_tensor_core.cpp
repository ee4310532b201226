#include <doctest.h>

#include "dafdft/gradcheck.hpp"
#include "dafdft/gradient_suite.hpp"
#include "dafdft/ops.hpp"
#include "dafdft/pipeline.hpp"
#include "support.hpp"

#include <cmath>

using namespace dafdft;
using dafdft::test::uniform;

TEST_CASE("tensor rejects inconsistent shapes")
{
    CHECK_THROWS_AS(Tensor({2, 3}, Buffer<float>::Zero(5)), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    auto t = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(t.at({1, 0}) == 3.0f);
    CHECK(t.dim(-1) == 2);
    CHECK_THROWS_AS(t.dim(2), ShapeError);
    CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("batch_dot small examples")
{
    // [[1,2],[3,4]] x [[5,6],[7,8]]
    auto a = Tensor::from_values({1, 2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from_values({1, 2, 2}, {5, 6, 7, 8});
    auto c = batch_dot(a, b);
    CHECK(c.shape() == Shape{1, 2, 2});
    CHECK(c.at({0, 0, 0}) == 19.0f);
    CHECK(c.at({0, 0, 1}) == 22.0f);
    CHECK(c.at({0, 1, 0}) == 43.0f);
    CHECK(c.at({0, 1, 1}) == 50.0f);

    auto row = Tensor::from_values({1, 1, 3}, {1, 2, 3});
    auto col = Tensor::from_values({1, 3, 1}, {4, 5, 6});
    CHECK(batch_dot(row, col).item() == 32.0f);
}

TEST_CASE("batch_dot matches a naive triple loop")
{
    Rng rng(11);
    auto a = uniform<double>({4, 8, 8}, rng);
    auto b = uniform<double>({4, 8, 8}, rng);
    auto c = batch_dot(a, b);
    double worst = 0;
    for (Index n = 0; n < 4; ++n)
        for (Index i = 0; i < 8; ++i)
            for (Index j = 0; j < 8; ++j) {
                double acc = 0;
                for (Index k = 0; k < 8; ++k) acc += a.at({n, i, k}) * b.at({n, k, j});
                worst = std::max(worst, std::abs(acc - c.at({n, i, j})));
            }
    CHECK(worst < 1e-6);
}

TEST_CASE("batch_dot shape error names both shapes")
{
    auto a = Tensor::zeros({2, 3, 4});
    auto b = Tensor::zeros({2, 5, 6});
    try {
        batch_dot(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("[2,3,4]") != std::string::npos);
        CHECK(what.find("[2,5,6]") != std::string::npos);
    }
    CHECK_THROWS_AS(batch_dot(Tensor::zeros({2, 3, 4}), Tensor::zeros({3, 4, 1})), ShapeError);
}

TEST_CASE("softmax examples")
{
    auto uniform3 = softmax(TensorD::from_values({1, 3}, {1, 1, 1}), 1);
    for (Index i = 0; i < 3; ++i) CHECK(uniform3.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    auto pair = softmax(TensorD::from_values({1, 2}, {0, std::log(2.0)}), 1);
    CHECK(pair.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(pair.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    auto large = softmax(Tensor::from_values({1, 2}, {1000, 1000}), 1);
    CHECK(large.data().allFinite());
    CHECK(large.data()[0] == 0.5f);
    CHECK(large.data()[1] == 0.5f);
}

TEST_CASE("softmax rejects an axis outside the rank")
{
    auto x = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(softmax(x, 2), ShapeError);
    CHECK_THROWS_AS(softmax(x, -3), ShapeError);
    CHECK_NOTHROW(softmax(x, -1));
}

TEST_CASE("softmax slices are positive and sum to one on every axis")
{
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = uniform<double>({3, 4, 5}, rng, -30.0, 30.0);
        for (int axis = 0; axis < 3; ++axis) {
            auto y = softmax(x, axis);
            CHECK((y.data() > 0.0).all());
            const Index len = x.dim(axis);
            const Index inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
            const Index outer = x.numel() / (len * inner);
            for (Index o = 0; o < outer; ++o)
                for (Index i = 0; i < inner; ++i) {
                    double total = 0;
                    for (Index j = 0; j < len; ++j) total += y.data()[o * len * inner + j * inner + i];
                    CHECK(std::abs(total - 1.0) < 1e-12);
                }
        }
    }
}

TEST_CASE("backward of sum and of a square")
{
    auto x = TensorD::from_values({3}, {1, -2, 0.5}, true);
    backward(sum(x));
    CHECK((x.grad() == 1.0).all());

    x.zero_grad();
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == -4.0);
    CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("leaf gradients accumulate across backward calls")
{
    auto x = TensorD::from_values({2}, {3, 4}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    backward(loss);
    CHECK(x.grad()[0] == 12.0);
    CHECK(x.grad()[1] == 16.0);
}

TEST_CASE("backward needs a scalar loss that depends on a trainable tensor")
{
    auto x = TensorD::from_values({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
    CHECK_THROWS(backward(sum(TensorD::from_values({2}, {1, 2}))));
}

TEST_CASE("no-grad mode records nothing")
{
    auto x = TensorD::from_values({2}, {1, 2}, true);
    TensorD y;
    {
        NoGradGuard guard;
        y = sum(mul(x, x));
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(grad_enabled());
}

TEST_CASE("gradients have the shape of their tensors")
{
    Rng rng(3);
    auto a = uniform<double>({2, 3, 4}, rng, -1, 1, true);
    auto b = uniform<double>({2, 4, 5}, rng, -1, 1, true);
    backward(sum(softmax(batch_dot(a, b), 2) * uniform<double>({2, 3, 5}, rng)));
    CHECK(a.grad().size() == a.numel());
    CHECK(b.grad().size() == b.numel());
    CHECK(a.grad_tensor().shape() == a.shape());
}

TEST_CASE("composite conv, BN, h-swish, pooling, dense and BCE passes a finite-difference check")
{
    Rng rng(21);
    auto x = uniform<double>({4, 3, 6, 6}, rng, -1, 1, true);
    auto conv = Conv2dParams<double>::glorot(3, 8, 3, 1, false, rng);
    auto bn = BatchNormState<double>::identity(8);
    auto head = DenseParams<double>::glorot(8, 1, rng);
    auto labels = TensorD::from_values({4, 1}, {0, 1, 1, 0});

    auto build = [&] {
        auto state = bn;
        state.running_mean = state.running_mean.detach();
        state.running_var = state.running_var.detach();
        state.num_updates = state.num_updates.detach();
        auto z = h_swish(batch_norm(conv2d(x, conv), state, Mode::Train));
        return bce_loss(sigmoid(dense(global_avg_pool(z), head)), labels);
    };
    auto report = grad_check("composite",
                             {{"x", x},
                              {"conv.weight", conv.weight},
                              {"bn.gamma", bn.gamma},
                              {"bn.beta", bn.beta},
                              {"head.weight", head.weight},
                              {"head.bias", head.bias}},
                             build, 1e-3, 1e-5);
    CHECK_MESSAGE(report.passed, "max relative error " << report.max_relative_error);
}

TEST_CASE("grad_check flags a corrupted gradient rule")
{
    // x^2 with the derivative x instead of 2x
    auto broken_square = [](const TensorD& x) {
        Buffer<double> out = x.data().square();
        return make_op<double>("broken_square", x.shape(), std::move(out), {x},
                               [x](Node<double>& self) { x.node()->accumulate(self.grad * x.data()); });
    };
    Rng rng(8);
    auto x = uniform<double>({5}, rng, 0.5, 2.0, true);
    auto bad = grad_check("broken", {{"x", x}}, [&] { return sum(broken_square(x)); }, 1e-3);
    CHECK_FALSE(bad.passed);
    CHECK(bad.max_relative_error > 0.1);

    auto good = grad_check("square", {{"x", x}}, [&] { return sum(mul(x, x)); }, 1e-3);
    CHECK(good.passed);
}

TEST_CASE("grad_check reports non-finite values instead of passing")
{
    auto x = TensorD::from_values({2}, {-1, 2}, true);
    auto report = grad_check(
        "log", {{"x", x}},
        [&] { return sum(unary_map(x, "log", [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; })); },
        1e-3);
    CHECK_FALSE(report.passed);
    CHECK_FALSE(report.failure.empty());
}

TEST_CASE("gradient suite covers every operation and passes")
{
    const auto reports = run_gradient_suite();
    const auto names = gradient_suite_operations();
    REQUIRE(reports.size() == names.size());
    for (std::size_t i = 0; i < reports.size(); ++i) {
        CHECK(reports[i].op_name == names[i]);
        CHECK_MESSAGE(reports[i].passed, reports[i].op_name << " error " << reports[i].max_relative_error);
    }
}

TEST_CASE("gradient suite fails at an unattainable tolerance")
{
    GradientSuiteOptions options;
    options.tolerance = 1e-12;
    options.seeds = 1;
    int failures = 0;
    for (const auto& r : run_gradient_suite(options)) failures += r.passed ? 0 : 1;
    CHECK(failures > 0);
}
