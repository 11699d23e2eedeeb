#pragma once

#include <functional>

#include "tevit/tensor.hpp"

namespace tevit {

// Compares the analytic gradient of f at x against central differences.
// f must be deterministic; it is evaluated once under a fresh tape for the
// analytic gradient and 2*numel(x) times without a tape for the numeric one.
// Returns max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step);

}  // namespace tevit
