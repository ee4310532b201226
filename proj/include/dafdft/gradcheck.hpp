#pragma once

#include "dafdft/tensor.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace dafdft {

struct GradCheckReport {
    std::string op_name;
    double max_relative_error = 0.0;
    std::map<std::string, double> per_parameter_errors;
    double tolerance = 0.0;
    bool passed = false;
    std::string failure;  // set when a non-finite value was encountered
};

/// Rebuilds the graph from the current values of the checked tensors and
/// returns a scalar loss.
using LossBuilder = std::function<TensorD()>;

inline constexpr double kGradCheckNormFloor = 1e-6;

struct CheckedTensor {
    std::string name;
    TensorD tensor;
};

/// Compares reverse-mode gradients with central differences, both in double.
///
/// The error for each tensor is ||analytic - numeric||_2 divided by the larger
/// of the two norms, floored at kGradCheckNormFloor so that a gradient that
/// vanishes identically is compared absolutely. The report passes when every
/// error is below `tolerance`.
GradCheckReport grad_check(const std::string& op_name, const std::vector<CheckedTensor>& wrt, const LossBuilder& build,
                           double tolerance, double step = 1e-3);

}  // namespace dafdft
