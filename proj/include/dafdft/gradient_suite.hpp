#pragma once

// Finite-difference checks over every differentiable operation, from single
// ops up to a full MBblockV3 and FTT stage. Each entry aggregates several
// seeds, each seed redrawing inputs and parameters.

#include "dafdft/gradcheck.hpp"

#include <cstdint>

namespace dafdft {

struct GradientSuiteOptions {
    double tolerance = 1e-3;
    int seeds = 5;
    std::uint64_t base_seed = 2024;
};

/// One report per operation; per_parameter_errors holds the worst error
/// across seeds for each checked tensor.
std::vector<GradCheckReport> run_gradient_suite(const GradientSuiteOptions& options = {});

/// Names of the operations run_gradient_suite covers, in report order.
std::vector<std::string> gradient_suite_operations();

}  // namespace dafdft
