#pragma once

#include "factorwm/tensor.hpp"

#include <functional>

namespace fwm {

/// A scalar-valued differentiable map; `x` arrives already watched when the
/// checker wants gradients and untracked when it only wants values.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Compares the tape gradient of f at x0 against central finite differences
/// with step h. Returns max over coordinates of
/// |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-8).
double grad_check(const ScalarFn& f, const Tensor& x0, double h = 1e-5);

} // namespace fwm
