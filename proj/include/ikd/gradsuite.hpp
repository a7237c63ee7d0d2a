#pragma once

#include <string>
#include <vector>

#include "ikd/gradcheck.hpp"

namespace ikd {

struct GradSuiteEntry {
    std::string name;
    double tol = 0.0;
    GradCheckReport report;
};

struct GradSuiteOptions {
    double op_tol = 1e-4;
    double model_tol = 1e-3;
    // Parameter coordinates sampled for the end-to-end joint loss check.
    std::size_t model_coords = 20;
    std::uint64_t seed = 0;
};

// Central-difference checks of every differentiable op, the similarity
// kernels and the full joint training loss on a small model.
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace ikd
