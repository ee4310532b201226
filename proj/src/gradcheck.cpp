#include "dafdft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dafdft {

namespace {

double loss_value(const LossBuilder& build)
{
    const TensorD loss = build();
    if (loss.numel() != 1) throw ShapeError("grad_check: builder returned non-scalar " + to_string(loss.shape()));
    return loss.item();
}

}  // namespace

GradCheckReport grad_check(const std::string& op_name, const std::vector<CheckedTensor>& wrt, const LossBuilder& build,
                           double tolerance, double step)
{
    GradCheckReport report;
    report.op_name = op_name;
    report.tolerance = tolerance;

    for (const auto& item : wrt) {
        auto t = item.tensor;
        t.set_requires_grad(true);
        t.zero_grad();
    }
    const TensorD loss = build();
    if (loss.numel() != 1) throw ShapeError("grad_check: builder returned non-scalar " + to_string(loss.shape()));
    if (!std::isfinite(loss.item())) {
        report.failure = "non-finite loss in forward pass";
        report.max_relative_error = std::numeric_limits<double>::infinity();
        return report;
    }
    backward(loss);

    for (const auto& item : wrt) {
        TensorD t = item.tensor;
        const Buffer<double> analytic = t.has_grad() ? t.grad() : Buffer<double>::Zero(t.numel());
        Buffer<double> numeric(t.numel());
        for (Index i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + step;
            const double plus = loss_value(build);
            t.data()[i] = saved - step;
            const double minus = loss_value(build);
            t.data()[i] = saved;
            numeric[i] = (plus - minus) / (2.0 * step);
        }
        if (!analytic.allFinite() || !numeric.allFinite()) {
            report.failure = "non-finite gradient for " + item.name;
            report.per_parameter_errors[item.name] = std::numeric_limits<double>::infinity();
            report.max_relative_error = std::numeric_limits<double>::infinity();
            continue;
        }
        const double scale = std::max({analytic.matrix().norm(), numeric.matrix().norm(), kGradCheckNormFloor});
        const double error = (analytic - numeric).matrix().norm() / scale;
        report.per_parameter_errors[item.name] = error;
        report.max_relative_error = std::max(report.max_relative_error, error);
    }
    report.passed = report.failure.empty() && report.max_relative_error < tolerance;
    return report;
}

}  // namespace dafdft
