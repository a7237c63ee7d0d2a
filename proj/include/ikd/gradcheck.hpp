#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd {

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    // Denominator floor of the relative error, so entries whose true
    // gradient is ~0 are compared absolutely.
    double floor = 1e-6;
    // 0 checks every coordinate; otherwise a seeded random subset.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = false;
};

// Compares the reverse-mode gradient of scalar f at x against central
// differences. Throws ContractError if f is not deterministic.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options = {});

// Same comparison over the parameters captured by `loss`. Coordinates are
// sampled uniformly across all parameters when max_coords > 0. Parameter
// values are restored afterwards; grads are left zeroed.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace ikd
